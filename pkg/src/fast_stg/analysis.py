"""Forecast metrics and low-rank fidelity diagnostics for agent attention.

The fidelity tools treat one attention layer as the effective projection
``P = A_dist @ A_agg`` (value projection ignored) and compare the residual
``||H - P H||_F / ||H||_F`` with the best possible rank-``a`` residual.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import ContractError

logger = logging.getLogger(__name__)

MAPE_MASK = 1e-6


@dataclass
class MetricsReport:
    mae: float
    rmse: float
    mape: float  # percent; NaN when every target is masked
    r2: float
    per_step: list = field(default_factory=list)  # (step, mae, rmse, mape, r2), 1-based step

    def rows(self):
        yield ("all", self.mae, self.rmse, self.mape, self.r2)
        yield from self.per_step


def _scores(y: np.ndarray, y_hat: np.ndarray):
    err = y - y_hat
    mae = float(np.mean(np.abs(err)))
    rmse = float(np.sqrt(np.mean(err**2)))
    mask = np.abs(y) >= MAPE_MASK
    mape = float(np.mean(np.abs(err[mask]) / np.abs(y[mask])) * 100) if mask.any() else math.nan
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(err**2)) / ss_tot if ss_tot > 0 else math.nan
    return mae, rmse, mape, r2


def metrics(Y: np.ndarray, Y_hat: np.ndarray) -> MetricsReport:
    """MAE, RMSE, MAPE (%) and R^2, overall and per horizon step (last axis)."""
    Y, Y_hat = np.asarray(Y, dtype=float), np.asarray(Y_hat, dtype=float)
    if Y.shape != Y_hat.shape:
        raise ValueError(f"metrics: shapes {Y.shape} and {Y_hat.shape} differ")
    report = MetricsReport(*_scores(Y, Y_hat))
    if Y.ndim >= 2:
        for p in range(Y.shape[-1]):
            report.per_step.append((p + 1, *_scores(Y[..., p], Y_hat[..., p])))
    return report


# ---------------------------------------------------------------- low-rank fidelity


def projection_matrix(A_dist: np.ndarray, A_agg: np.ndarray) -> np.ndarray:
    """``N x N`` effective projection. Analysis only; the model never forms it."""
    return A_dist @ A_agg


def reconstruction_error(H: np.ndarray, P: np.ndarray) -> float:
    norm = np.linalg.norm(H)
    if norm == 0:
        raise ContractError("reconstruction_error: H has zero Frobenius norm")
    return float(np.linalg.norm(H - P @ H) / norm)


def eckart_young_lower_bound(H: np.ndarray, a: int) -> float:
    """Smallest normalized Frobenius residual of any rank-``a`` approximation of ``H``."""
    s = np.linalg.svd(H, compute_uv=False)
    total = float(np.sum(s**2))
    if total == 0:
        return 0.0
    return float(np.sqrt(np.sum(s[a:] ** 2) / total))


def nystrom_upper_first_term(H: np.ndarray, a: int) -> float:
    """Spectral term of the Nystrom-style upper bound.

    ``sqrt(sum_{i>a} lambda_i^2) / ||H||_F`` with ``lambda`` the eigenvalues of
    the Gram matrix ``H H^T``. The additive sampling term, O(1/sqrt(a)) with no
    known constant, is not included.
    """
    lam = np.sort(np.linalg.eigvalsh(H @ H.T))[::-1]
    lam = np.clip(lam, 0.0, None)
    norm = np.linalg.norm(H)
    if norm == 0:
        return 0.0
    return float(np.sqrt(np.sum(lam[a:] ** 2)) / norm)


def top_a_projector(H: np.ndarray, a: int) -> np.ndarray:
    """``U_a U_a^T`` from the leading left singular vectors of ``H``."""
    U = np.linalg.svd(H, full_matrices=False)[0][:, :a]
    return U @ U.T


def numerical_rank(M: np.ndarray, rtol: float = 1e-10) -> int:
    s = np.linalg.svd(M, compute_uv=False)
    if s.size == 0 or s[0] == 0:
        return 0
    return int(np.sum(s > rtol * s[0]))


@dataclass
class LayerFidelity:
    layer: int
    epsilon: float
    lower_bound: float
    upper_first_term: float
    min_slack: float  # min over samples of epsilon - lower_bound


@dataclass
class FidelityReport:
    agents: int
    layers: list
    mae: float = math.nan
    rmse: float = math.nan

    @property
    def epsilon_avg(self) -> float:
        return float(np.mean([lf.epsilon for lf in self.layers]))


def layer_fidelity(trace, a: int) -> list[LayerFidelity]:
    """Per-layer mean epsilon and bounds over the samples of one traced batch.

    The reference features for layer ``l`` are ``H^{l-1}``, the attention input.
    """
    out = []
    for layer in range(1, len(trace.H)):
        Hs = trace.H[layer - 1]
        eps, lbs, ubs = [], [], []
        for b in range(Hs.shape[0]):
            H = Hs[b]
            P = projection_matrix(trace.A_dist[layer][b], trace.A_agg[layer][b])
            eps.append(reconstruction_error(H, P))
            lbs.append(eckart_young_lower_bound(H, a))
            ubs.append(nystrom_upper_first_term(H, a))
        eps, lbs = np.array(eps), np.array(lbs)
        out.append(LayerFidelity(layer, float(eps.mean()), float(lbs.mean()), float(np.mean(ubs)),
                                 float((eps - lbs).min())))
    return out


def fidelity_table(reports: list[FidelityReport]):
    """Rows shaped like a per-agent-count reconstruction table.

    Returns ``(header, rows)``: one row per layer epsilon, then ``eps_avg``,
    ``MAE`` and ``RMSE``; one column per agent count.
    """
    header = ["metric"] + [f"a={r.agents}" for r in reports]
    L = len(reports[0].layers) if reports else 0
    rows = [[f"eps_{l}"] + [r.layers[l - 1].epsilon for r in reports] for l in range(1, L + 1)]
    rows.append(["eps_avg"] + [r.epsilon_avg for r in reports])
    rows.append(["MAE"] + [r.mae for r in reports])
    rows.append(["RMSE"] + [r.rmse for r in reports])
    return header, rows


def fidelity_detail_rows(reports: list[FidelityReport]):
    header = ["agents", "layer", "epsilon", "lower_bound", "upper_first_term", "min_slack"]
    rows = [
        [r.agents, lf.layer, lf.epsilon, lf.lower_bound, lf.upper_first_term, lf.min_slack]
        for r in reports
        for lf in r.layers
    ]
    return header, rows


def pearson(x, y) -> float:
    """Sample correlation; NaN when either input has zero variance."""
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    if x.shape != y.shape or x.size < 2:
        raise ValueError("pearson: need two equal-length vectors of length >= 2")
    dx, dy = x - x.mean(), y - y.mean()
    den = math.sqrt(float(dx @ dx) * float(dy @ dy))
    if den == 0:
        return math.nan
    return float(np.clip(dx @ dy / den, -1.0, 1.0))


# ---------------------------------------------------------------- routing diagnostics


def usage_entropy(G: np.ndarray) -> float:
    """Entropy (nats) of the expert-usage marginal, i.e. G averaged over all rows."""
    marginal = np.asarray(G, dtype=float).reshape(-1, G.shape[-1]).mean(axis=0)
    p = marginal[marginal > 0]
    return float(-(p * np.log(p)).sum())


def expert_weight_profile(G_batches) -> np.ndarray:
    """Mean routing row per node over a stream of ``B x N x e`` weight arrays."""
    total, count = None, 0
    for G in G_batches:
        s = G.sum(axis=0)
        total = s if total is None else total + s
        count += G.shape[0]
    if total is None:
        raise ValueError("expert_weight_profile: no routing weights given")
    return total / count


def cosine_similarity_matrix(profile: np.ndarray) -> np.ndarray:
    unit = profile / np.linalg.norm(profile, axis=1, keepdims=True)
    return unit @ unit.T

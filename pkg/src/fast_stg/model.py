"""FaST forecaster: MoE temporal compression, agent attention backbone, MLP head.

Shapes follow ``B x N x ...`` (batch, nodes, features). A 2-D ``N x T``
input is accepted everywhere and treated as a batch of one.

Parameters live in a flat ``{dotted_name: Tensor}`` registry. Layer 0 is the
input MoE (experts map ``T -> d``); layers ``1..L`` are backbone blocks.
"""

from __future__ import annotations

import io
import json
import logging
import time
import warnings
import zipfile
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tn
from ._io import atomic_path
from .tensor import ContractError, ElementCounter, Tensor

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
ROUTER_MODES = ("ha", "nobias", "hidden")


class NonFiniteError(FloatingPointError):
    """Raised when a forward stage produces NaN or Inf."""

    def __init__(self, stage: str):
        super().__init__(f"non-finite values produced at stage '{stage}'")
        self.stage = stage


@dataclass(frozen=True)
class ModelConfig:
    N: int
    T: int
    P: int
    d: int = 64
    e: int = 8
    a: int = 32
    L: int = 3
    steps_per_day: int = 96
    days_per_week: int = 7
    norm_eps: float = 1e-8
    # "ha": raw-series scores plus node/time biases; "nobias": raw-series
    # scores only; "hidden": scores from the layer input Z (no raw series).
    router: str = "ha"

    def __post_init__(self):
        for k in ("N", "T", "P", "d", "e", "a", "L", "steps_per_day", "days_per_week"):
            if int(getattr(self, k)) < 1:
                raise ContractError(f"ModelConfig.{k} must be positive, got {getattr(self, k)}")
        if self.router not in ROUTER_MODES:
            raise ContractError(f"ModelConfig.router must be one of {ROUTER_MODES}, got {self.router!r}")
        if self.a > self.N:
            warnings.warn(f"agent count a={self.a} exceeds node count N={self.N}", stacklevel=3)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class ForwardTrace:
    """Per-layer states kept for analysis (plain arrays, batch-first).

    ``H[0]`` is the embedded input; ``H[l]``, ``Z[l]``, ``A_agg[l]`` and
    ``A_dist[l]`` are indexed by backbone layer ``l = 1..L`` (index 0 of the
    attention lists is ``None``). ``G[0]`` is the input-layer routing.
    """

    H: list = field(default_factory=list)
    Z: list = field(default_factory=list)
    G: list = field(default_factory=list)
    A_agg: list = field(default_factory=list)
    A_dist: list = field(default_factory=list)


def _moe_names(prefix: str) -> dict[str, str]:
    return {
        "router_w": f"{prefix}.router.weight",
        "node_bias": f"{prefix}.router.node_bias",
        "tod_bias": f"{prefix}.router.tod_bias",
        "dow_bias": f"{prefix}.router.dow_bias",
        "expert_w": f"{prefix}.experts.weight",
        "expert_b": f"{prefix}.experts.bias",
    }


def moe_prefix(layer: int) -> str:
    return "input.moe" if layer == 0 else f"blocks.{layer}.moe"


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Fresh parameter registry.

    Weight matrices ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); embeddings, agent
    tokens and router biases ~ N(0, 0.02^2); additive biases zero; norm gains one.
    """
    N, T, P, d, e, a, L = cfg.N, cfg.T, cfg.P, cfg.d, cfg.e, cfg.a, cfg.L
    spd, dpw = cfg.steps_per_day, cfg.days_per_week
    params: dict[str, np.ndarray] = {}

    def uniform(fan_in, shape):
        lim = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-lim, lim, size=shape)

    def normal(shape):
        return rng.normal(0.0, 0.02, size=shape)

    params["embed.node"] = normal((N, d))
    params["embed.tod"] = normal((spd, d))
    params["embed.dow"] = normal((dpw, d))
    for layer in range(L + 1):
        din = T if layer == 0 else d
        names = _moe_names(moe_prefix(layer))
        score_in = din if cfg.router == "hidden" else T
        params[names["router_w"]] = uniform(score_in, (score_in, e))
        if cfg.router == "ha":
            params[names["node_bias"]] = normal((N, e))
            params[names["tod_bias"]] = normal((spd, e))
            params[names["dow_bias"]] = normal((dpw, e))
        params[names["expert_w"]] = uniform(din, (din, 2 * e * d))
        params[names["expert_b"]] = np.zeros(2 * e * d)
        if layer == 0:
            continue
        p = f"blocks.{layer}"
        params[f"{p}.attn.agents"] = normal((a, d))
        for name in ("agg_q", "agg_k", "dist_q", "dist_k", "value"):
            params[f"{p}.attn.{name}"] = uniform(d, (d, d))
        params[f"{p}.norm1.gain"] = np.ones(d)
        params[f"{p}.norm2.gain"] = np.ones(d)
    params["head.w1"] = uniform(L * d, (L * d, L * d))
    params["head.b1"] = np.zeros(L * d)
    params["head.w2"] = uniform(L * d, (L * d, P))
    params["head.b2"] = np.zeros(P)
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in params.items()}


# ---------------------------------------------------------------- expert packing


def pack_experts(experts: list[tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]]):
    """Fuse per-expert ``(W_lin, b_lin, W_gate, b_gate)`` into one weight/bias.

    Canonical layout: ``[gate_0 .. gate_{e-1} | lin_0 .. lin_{e-1}]`` along the
    output axis, each block ``d`` wide.
    """
    W = np.concatenate([g for _, _, g, _ in experts] + [w for w, _, _, _ in experts], axis=1)
    b = np.concatenate([gb for _, _, _, gb in experts] + [lb for _, lb, _, _ in experts])
    return W, b


def unpack_experts(W: np.ndarray, b: np.ndarray, e: int):
    """Inverse of :func:`pack_experts`."""
    cols = W.shape[1]
    if cols % (2 * e):
        raise tn.ShapeError(f"fused expert weight has {cols} columns, not a multiple of 2e={2 * e}")
    d = cols // (2 * e)
    out = []
    for i in range(e):
        gate = slice(i * d, (i + 1) * d)
        lin = slice(e * d + i * d, e * d + (i + 1) * d)
        out.append((W[:, lin], b[lin], W[:, gate], b[gate]))
    return out


def glu_expert(Z: np.ndarray, W_lin, b_lin, W_gate, b_gate) -> np.ndarray:
    """One GLU expert, unfused: ``sigmoid(Z W_gate + b_gate) * (Z W_lin + b_lin)``.

    Plain numpy reference used to check the fused path.
    """
    gate = 1.0 / (1.0 + np.exp(-(Z @ W_gate + b_gate)))
    return gate * (Z @ W_lin + b_lin)


# ---------------------------------------------------------------- building blocks


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return tn.reshape(x, (1,) + x.shape), True
    return x, False


def _time_rows(table: Tensor, idx, batch: int) -> Tensor:
    """Look up per-sample rows and shape them ``B x 1 x k`` for broadcasting over nodes."""
    idx = np.broadcast_to(np.asarray(idx, dtype=np.intp).reshape(-1), (batch,))
    rows = tn.take_rows(table, idx)
    return tn.reshape(rows, (batch, 1, table.shape[1]))


def _check_time(cfg: ModelConfig, tod, dow) -> None:
    tod, dow = np.asarray(tod), np.asarray(dow)
    if np.any(tod < 0) or np.any(tod >= cfg.steps_per_day):
        raise ContractError(f"time-of-day index out of range [0, {cfg.steps_per_day}): {tod}")
    if np.any(dow < 0) or np.any(dow >= cfg.days_per_week):
        raise ContractError(f"day-of-week index out of range [0, {cfg.days_per_week}): {dow}")


def ha_router(params, cfg: ModelConfig, X: Tensor, tod, dow, layer: int, Z: Tensor | None = None) -> Tensor:
    """Expert weights ``B x N x e``; rows are a softmax over experts."""
    names = _moe_names(moe_prefix(layer))
    X = tn.as_tensor(X)
    if cfg.router == "hidden":
        scores = tn.matmul(Z if Z is not None else X, params[names["router_w"]])
    else:
        scores = tn.matmul(X, params[names["router_w"]])
    if cfg.router == "ha":
        B = scores.shape[0]
        scores = scores + params[names["node_bias"]]
        scores = scores + _time_rows(params[names["tod_bias"]], tod, B)
        scores = scores + _time_rows(params[names["dow_bias"]], dow, B)
    return tn.softmax_rows(scores)


def parallel_glu_experts(params, cfg: ModelConfig, Z: Tensor, layer: int) -> Tensor:
    """All ``e`` GLU experts in one fused matmul: ``B x N x e x d``."""
    names = _moe_names(moe_prefix(layer))
    W, b = params[names["expert_w"]], params[names["expert_b"]]
    if W.shape != (Z.shape[-1], 2 * cfg.e * cfg.d):
        raise tn.ShapeError(
            f"fused expert weight {W.shape} does not match input dim {Z.shape[-1]} "
            f"and 2ed={2 * cfg.e * cfg.d}"
        )
    F = tn.matmul(Z, W) + b
    gate, lin = tn.split_half(F)
    out = tn.sigmoid(gate) * lin
    return tn.reshape(out, Z.shape[:-1] + (cfg.e, cfg.d))


def ha_moe(params, cfg: ModelConfig, Z: Tensor, X: Tensor, tod, dow, layer: int):
    """Dense mixture: every expert contributes, weighted by the router.

    Returns ``(output B x N x d, G B x N x e)``.
    """
    G = ha_router(params, cfg, X, tod, dow, layer, Z=Z)
    experts = parallel_glu_experts(params, cfg, Z, layer)
    weighted = tn.reshape(G, G.shape + (1,)) * experts
    return tn.sum(weighted, axis=-2), G


def embed_input(params, cfg: ModelConfig, X: Tensor, tod, dow):
    """``H0 = MoE(X, X) + E_S + E_D[tod] + E_W[dow]``. Returns ``(H0, G0)``."""
    _check_time(cfg, tod, dow)
    moe, G = ha_moe(params, cfg, X, X, tod, dow, layer=0)
    B = X.shape[0]
    H = moe + params["embed.node"]
    H = H + _time_rows(params["embed.tod"], tod, B)
    H = H + _time_rows(params["embed.dow"], dow, B)
    return H, G


def aga_attention(params, cfg: ModelConfig, H: Tensor, layer: int):
    """Agent attention: ``A_dist @ (A_agg @ (H W_V))``.

    The value aggregation runs first so no ``N x N`` product is ever formed;
    cost is O(N a d). Returns ``(output, A_agg B x a x N, A_dist B x N x a)``.
    """
    p = f"blocks.{layer}.attn"
    A = params[f"{p}.agents"]
    scale = 1.0 / np.sqrt(cfg.d)
    q_agents = tn.matmul(A, params[f"{p}.agg_q"])
    k_nodes = tn.matmul(H, params[f"{p}.agg_k"])
    A_agg = tn.softmax_rows(tn.matmul(q_agents, tn.transpose(k_nodes)) * scale)
    q_nodes = tn.matmul(H, params[f"{p}.dist_q"])
    k_agents = tn.matmul(A, params[f"{p}.dist_k"])
    A_dist = tn.softmax_rows(tn.matmul(q_nodes, tn.transpose(k_agents)) * scale)
    V = tn.matmul(H, params[f"{p}.value"])
    out = tn.matmul(A_dist, tn.matmul(A_agg, V))
    return out, A_agg, A_dist


def backbone_block(params, cfg: ModelConfig, H_prev: Tensor, X: Tensor, tod, dow, layer: int, timers=None):
    """Post-norm residual block: attention then MoE, each followed by RMSNorm."""
    p = f"blocks.{layer}"
    with _timed(timers, "attention"):
        att, A_agg, A_dist = aga_attention(params, cfg, H_prev, layer)
        Z = tn.rmsnorm(att + H_prev, params[f"{p}.norm1.gain"], cfg.norm_eps)
    _check_finite(Z, f"{p}.attention")
    with _timed(timers, "moe"):
        moe, G = ha_moe(params, cfg, Z, X, tod, dow, layer)
        H = tn.rmsnorm(moe + Z, params[f"{p}.norm2.gain"], cfg.norm_eps)
    _check_finite(H, f"{p}.moe")
    return H, Z, G, A_agg, A_dist


@contextmanager
def _timed(timers, key):
    if timers is None:
        yield
        return
    t0 = time.perf_counter()
    yield
    timers[key] = timers.get(key, 0.0) + time.perf_counter() - t0


def _check_finite(x: Tensor, stage: str) -> None:
    if not np.isfinite(x.data).all():
        raise NonFiniteError(stage)


def forward(params, cfg: ModelConfig, X, tod, dow, timers: dict | None = None):
    """Full forecast ``B x N x P`` (or ``N x P`` for 2-D input) plus trace."""
    X = tn.as_tensor(X)
    if not np.isfinite(X.data).all():
        raise NonFiniteError("input")
    X, squeeze = _batched(X)
    if X.shape[1:] != (cfg.N, cfg.T):
        raise tn.ShapeError(f"input shape {X.shape[1:]} does not match (N, T)=({cfg.N}, {cfg.T})")
    trace = ForwardTrace()
    with _timed(timers, "input"):
        H, G0 = embed_input(params, cfg, X, tod, dow)
    _check_finite(H, "input")
    trace.H.append(H.data)
    trace.Z.append(None)
    trace.G.append(G0.data)
    trace.A_agg.append(None)
    trace.A_dist.append(None)
    outs = []
    for layer in range(1, cfg.L + 1):
        H, Z, G, A_agg, A_dist = backbone_block(params, cfg, H, X, tod, dow, layer, timers)
        trace.H.append(H.data)
        trace.Z.append(Z.data)
        trace.G.append(G.data)
        trace.A_agg.append(A_agg.data)
        trace.A_dist.append(A_dist.data)
        outs.append(H)
    with _timed(timers, "head"):
        U = tn.concat(outs, axis=-1)
        hidden = tn.relu(tn.matmul(U, params["head.w1"]) + params["head.b1"])
        Y = tn.matmul(hidden, params["head.w2"]) + params["head.b2"]
    _check_finite(Y, "head")
    if squeeze:
        Y = tn.reshape(Y, Y.shape[1:])
    return Y, trace


class FaST:
    """Config plus parameter registry, with checkpoint I/O."""

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor] | None = None, seed: int = 0):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, np.random.default_rng(seed))

    def __call__(self, X, tod, dow, timers=None):
        return forward(self.params, self.cfg, X, tod, dow, timers)

    def predict(self, X, tod, dow) -> np.ndarray:
        with tn.no_grad():
            Y, _ = forward(self.params, self.cfg, X, tod, dow)
        return Y.data

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self):
        return self.params.items()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) ^ set(state)
        if missing:
            raise ContractError(f"state dict keys differ from model: {sorted(missing)}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise tn.ShapeError(f"{k}: stored shape {v.shape} != model shape {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=np.float64)

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def save(self, path, extra: dict[str, np.ndarray] | None = None, meta: dict | None = None) -> None:
        save_checkpoint(path, self.cfg, self.state_dict(), extra=extra, meta=meta)

    @classmethod
    def load(cls, path) -> tuple["FaST", dict[str, np.ndarray], dict]:
        cfg, state, extra, meta = load_checkpoint(path)
        model = cls(cfg, params={k: Tensor(v, requires_grad=True, name=k) for k, v in state.items()})
        return model, extra, meta


# ---------------------------------------------------------------- checkpoints

# Layout (numpy .npz, uncompressed): "__meta__" holds a JSON document with
# format_version, config and free-form metadata; "param/<name>" and
# "extra/<name>" hold row-major float64 arrays. Shapes are self-describing.


def save_checkpoint(path, cfg: ModelConfig, state: dict, extra: dict | None = None, meta: dict | None = None) -> None:
    doc = {"format_version": CHECKPOINT_VERSION, "config": cfg.to_dict(), "meta": meta or {}}
    arrays = {"__meta__": np.array(json.dumps(doc, sort_keys=True))}
    for k in sorted(state):
        arrays[f"param/{k}"] = np.ascontiguousarray(state[k], dtype=np.float64)
    for k in sorted(extra or {}):
        arrays[f"extra/{k}"] = np.ascontiguousarray(extra[k], dtype=np.float64)
    with atomic_path(path) as tmp:
        _write_npz(tmp, arrays)


def _write_npz(path, arrays: dict) -> None:
    """``np.savez`` layout with a fixed member timestamp, so equal content gives equal bytes."""
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asanyarray(arr), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())


def load_checkpoint(path):
    path = Path(path)
    with np.load(path, allow_pickle=False) as z:
        doc = json.loads(str(z["__meta__"]))
        if doc.get("format_version") != CHECKPOINT_VERSION:
            raise ContractError(f"{path}: unsupported checkpoint format {doc.get('format_version')}")
        state = {k[6:]: z[k] for k in z.files if k.startswith("param/")}
        extra = {k[6:]: z[k] for k in z.files if k.startswith("extra/")}
    return ModelConfig.from_dict(doc["config"]), state, extra, doc["meta"]


def aga_peak_elements(params, cfg: ModelConfig, H: Tensor, layer: int = 1) -> int:
    """Largest single intermediate (per sample) allocated by one attention call."""
    H, _ = _batched(tn.as_tensor(H))
    with ElementCounter() as c, tn.no_grad():
        aga_attention(params, cfg, H, layer)
    return c.peak // H.shape[0]

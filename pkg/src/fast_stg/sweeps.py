"""Checkpoint-level analyses: fidelity across agent counts, routing profiles."""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

from . import tensor as tn
from .analysis import FidelityReport, expert_weight_profile, layer_fidelity, usage_entropy
from .data import SeriesDataset, chronological_split, window_iter
from .training import evaluate, load_trained

logger = logging.getLogger(__name__)

EVAL_BATCH = 64


def eval_batch(model, norm, ds: SeriesDataset, split_ratios, split="test", size=EVAL_BATCH, time_anchor="last"):
    """The first ``size`` windows of a split, normalized; fixed for comparability."""
    ranges = dict(zip(("train", "val", "test"), chronological_split(ds.T_total, split_ratios)))
    nds = ds.with_values(norm.apply(ds.values))
    return next(window_iter(nds, ranges[split], model.cfg.T, model.cfg.P, size, time_anchor=time_anchor))


def fidelity_sweep(checkpoints, ds: SeriesDataset, split: str = "test") -> list[FidelityReport]:
    """One report per checkpoint; missing files are skipped with a warning."""
    reports = []
    for path in checkpoints:
        if not Path(path).exists():
            logger.warning("checkpoint %s not found; skipping", path)
            continue
        model, norm, tc = load_trained(path)
        batch = eval_batch(model, norm, ds, tc.split, split, time_anchor=tc.time_anchor)
        with tn.no_grad():
            _, trace = model(batch.X, batch.tod, batch.dow)
        rep = evaluate(model, norm, ds, split, tc)
        reports.append(FidelityReport(model.cfg.a, layer_fidelity(trace, model.cfg.a), rep.mae, rep.rmse))
    reports.sort(key=lambda r: r.agents)
    return reports


def routing_weights(model, norm, ds: SeriesDataset, split_ratios, split="test", layer=0, batch_size=64, time_anchor="last"):
    """Yield ``B x N x e`` routing weights of one layer over every window of a split."""
    ranges = dict(zip(("train", "val", "test"), chronological_split(ds.T_total, split_ratios)))
    nds = ds.with_values(norm.apply(ds.values))
    for batch in window_iter(nds, ranges[split], model.cfg.T, model.cfg.P, batch_size, time_anchor=time_anchor):
        with tn.no_grad():
            _, trace = model(batch.X, batch.tod, batch.dow)
        yield trace.G[layer]


def routing_profile(path, ds: SeriesDataset, split="test", layer=0):
    """``(per-node mean G, usage entropy)`` for a trained checkpoint."""
    model, norm, tc = load_trained(path)
    Gs = list(routing_weights(model, norm, ds, tc.split, split, layer, tc.batch_size, tc.time_anchor))
    profile = expert_weight_profile(Gs)
    return profile, usage_entropy(np.concatenate(Gs))

"""Acceptance criteria 1-10.

Each test records a one-line verdict; the lines are printed in the pytest
terminal summary, or directly when run as a script::

    python tests/test_acceptance.py
"""

from __future__ import annotations

import csv
import time

import numpy as np
import pytest

from fast_stg import tensor as tn
from fast_stg.analysis import (
    eckart_young_lower_bound,
    numerical_rank,
    projection_matrix,
    reconstruction_error,
    top_a_projector,
    usage_entropy,
)
from fast_stg.bench import fit_exponent, run_bench
from fast_stg.cli import main as cli
from fast_stg.data import chronological_split, load_series, save_series, synth_generate
from fast_stg.model import FaST, ModelConfig, aga_attention, aga_peak_elements, glu_expert, pack_experts, parallel_glu_experts
from fast_stg.sweeps import routing_weights
from fast_stg.tensor import Tensor
from fast_stg.training import evaluate, huber_loss, load_trained, lr_schedule, persistence_forecast

RESULTS: dict[int, str] = {}

GRAD_CFG = dict(N=8, T=12, P=6, d=8, e=2, a=4, L=2, steps_per_day=12)
OVERFIT_MODEL = dict(T=24, P=12, d=16, e=4, a=8, L=2)
OVERFIT_EPOCHS = 30


def report(k: int, ok: bool, detail: str) -> None:
    RESULTS[k] = f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(RESULTS[k])


def stochastic(rng, rows, cols):
    m = rng.uniform(size=(rows, cols)) ** 3
    return m / m.sum(axis=1, keepdims=True)


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


# ---------------------------------------------------------------- shared overfit runs


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    """The overfit dataset and CLI training runs shared by criteria 5, 7, 9 and 10."""
    root = tmp_path_factory.mktemp("acceptance")
    data = root / "synth.fstg"
    save_series(synth_generate(16, 14, granularity=15, seed=0), data)
    cfg = root / "overfit.cfg"
    lines = [f"{k} = {v}" for k, v in OVERFIT_MODEL.items()]
    lines += [f"max_epochs = {OVERFIT_EPOCHS}", "seed = 0", "timing = 0"]
    cfg.write_text("\n".join(lines) + "\n")

    def run(name, *sets):
        out = root / name
        args = ["train", "--config", str(cfg), "--dataset", str(data), "--out", str(out)]
        for s in sets:
            args += ["--set", s]
        assert cli(args) == 0
        return out

    return {"root": root, "data": data, "run": run, "cache": {}}


def trained(runs, name, *sets):
    cache = runs["cache"]
    if name not in cache:
        cache[name] = runs["run"](name, *sets)
    return cache[name]


# ---------------------------------------------------------------- criteria


def test_c01_gradient_fidelity():
    t0 = time.perf_counter()
    cfg = ModelConfig(**GRAD_CFG)
    model = FaST(cfg, seed=0)
    rng = np.random.default_rng(0)
    X = rng.standard_normal((2, cfg.N, cfg.T))
    Y = rng.standard_normal((2, cfg.N, cfg.P))
    tod, dow = np.array([3, 11]), np.array([0, 6])
    loss = lambda: huber_loss(Y, model(X, tod, dow)[0])
    model.zero_grad()
    loss().backward()
    worst, worst_name, max_abs = 0.0, "", 0.0
    with tn.no_grad():
        for name, p in model.named_parameters():
            num = tn.numerical_grad(lambda: loss().item(), p.data, h=1e-5)
            err = tn.relative_error(p.grad, num, floor=1e-8)
            max_abs = max(max_abs, float(np.abs(p.grad - num).max()))
            if err >= worst:
                worst, worst_name = err, name
    secs = time.perf_counter() - t0
    ok = worst < 1e-4 and secs < 120
    report(1, ok, f"max rel err {worst:.2e} ({worst_name}; diffs <= 1e-8 count as 0, max abs diff {max_abs:.1e}), "
                  f"{len(model.params)} params, {secs:.1f}s")
    assert ok


def test_c02_parallel_expert_oracle():
    rng = np.random.default_rng(2)
    worst = 0.0
    for i in range(100):
        e = (1, 2, 3, 8)[i % 4]
        N, din, d = int(rng.integers(1, 12)), int(rng.integers(1, 10)), int(rng.integers(1, 10))
        cfg = ModelConfig(N=max(N, 1), T=din, P=1, d=d, e=e, a=1, L=1, steps_per_day=4)
        experts = [tuple(rng.standard_normal(s) for s in ((din, d), (d,), (din, d), (d,))) for _ in range(e)]
        W, b = pack_experts(experts)
        params = {"input.moe.experts.weight": Tensor(W), "input.moe.experts.bias": Tensor(b)}
        Z = rng.standard_normal((2, cfg.N, din))
        out = parallel_glu_experts(params, cfg, Tensor(Z), layer=0).data
        for j, ex in enumerate(experts):
            worst = max(worst, float(np.abs(out[:, :, j, :] - glu_expert(Z, *ex)).max()))
    ok = worst < 1e-12
    report(2, ok, f"max abs diff {worst:.2e} over 100 draws, e in {{1,2,3,8}}")
    assert ok


def test_c03_stochasticity_and_rank():
    rng = np.random.default_rng(3)
    worst_sum, worst_rank_excess, worst_peak_ratio = 0.0, -10**9, 0.0
    for i in range(50):
        N = int(rng.integers(6, 40))
        a = int(rng.integers(1, 6))
        d = int(rng.integers(2, 12))
        cfg = ModelConfig(N=N, T=int(rng.integers(2, 10)), P=3, d=d, e=int(rng.integers(1, 5)), a=a, L=2,
                          steps_per_day=8)
        model = FaST(cfg, seed=i)
        X = rng.standard_normal((2, N, cfg.T)) * rng.uniform(0.1, 10)
        with tn.no_grad():
            _, trace = model(X, rng.integers(0, 8, 2), rng.integers(0, 7, 2))
        mats = list(trace.G) + trace.A_agg[1:] + trace.A_dist[1:]
        worst_sum = max(worst_sum, max(float(np.abs(m.sum(-1) - 1).max()) for m in mats))
        for layer in (1, 2):
            H = Tensor(trace.H[layer - 1])
            out, _, _ = aga_attention(model.params, cfg, H, layer)
            for s in range(2):
                worst_rank_excess = max(worst_rank_excess, numerical_rank(out.data[s]) - a)
            peak = aga_peak_elements(model.params, cfg, H, layer)
            worst_peak_ratio = max(worst_peak_ratio, peak / (N * a + N * d + a * d))
    ok = worst_sum <= 1e-9 and worst_rank_excess <= 0 and worst_peak_ratio <= 8
    report(3, ok, f"max |row sum - 1| {worst_sum:.1e}, max rank - a {worst_rank_excess}, "
                  f"peak/(Na+Nd+ad) {worst_peak_ratio:.2f} (limit 8), 50 forwards")
    assert ok


def test_c04_eckart_young():
    rng = np.random.default_rng(4)
    min_slack, worst_tight = np.inf, 0.0
    for i in range(200):
        N, d = (16, 64)[i % 2], (8, 32)[(i // 2) % 2]
        a = int(rng.integers(1, min(N, d)))
        H = rng.standard_normal((N, d)) * rng.uniform(0.1, 10, size=(1, d))
        lb = eckart_young_lower_bound(H, a)
        P = projection_matrix(stochastic(rng, N, a), stochastic(rng, a, N))
        min_slack = min(min_slack, reconstruction_error(H, P) - lb)
        worst_tight = max(worst_tight, abs(reconstruction_error(H, top_a_projector(H, a)) - lb))
    ok = min_slack >= -1e-9 and worst_tight < 1e-9
    report(4, ok, f"min(eps - bound) {min_slack:.3e}, max |eps_opt - bound| {worst_tight:.1e}, 200 draws")
    assert ok


def test_c05_overfit_smoke(runs):
    t0 = time.perf_counter()
    out = trained(runs, "a8")
    secs = time.perf_counter() - t0
    hist = read_rows(out / "history.csv")[1:]
    losses = [float(r[1]) for r in hist]
    ratio = losses[-1] / losses[0]
    ds = load_series(runs["data"])
    model, norm, tc = load_trained(out / "checkpoint.npz")
    mae = evaluate(model, norm, ds, "test", tc).mae
    test_range = chronological_split(ds.T_total, tc.split)[2]
    Yp, Y = persistence_forecast(ds, test_range, model.cfg.T, model.cfg.P)
    base = float(np.mean(np.abs(Y - Yp)))
    gain = 1 - mae / base
    ok = len(losses) <= OVERFIT_EPOCHS and ratio < 0.10 and gain >= 0.20 and secs < 600
    report(5, ok, f"loss ratio {ratio:.4f} after {len(losses)} epochs, test MAE {mae:.3f} vs "
                  f"persistence {base:.3f} ({gain:.0%} better), {secs:.0f}s")
    assert ok


def test_c06_linear_scaling_bench():
    Ns = [256, 512, 1024, 2048, 4096]
    t0 = time.perf_counter()
    rows = run_bench(Ns=Ns, horizons=[96], agents=[32], threads=1, T=96, d=64, e=8, L=3, reps=5,
                     train_step=False)
    secs = time.perf_counter() - t0
    fwd = fit_exponent(Ns, [r.forward_ms for r in rows])
    elems = fit_exponent(Ns, [r.peak_intermediate_elements for r in rows])
    ok = 0.8 <= fwd <= 1.3 and elems < 1.2 and secs < 900
    times = ", ".join(f"{r.forward_ms:.1f}" for r in rows)
    report(6, ok, f"forward exponent {fwd:.3f} (ms: {times}), element exponent {elems:.3f}, {secs:.0f}s")
    assert ok


def test_c07_fidelity_table(runs):
    ckpts = [trained(runs, f"a{a}", f"a={a}") if a != 8 else trained(runs, "a8") for a in (4, 8, 16)]
    out = runs["root"] / "fidelity"
    assert cli(["fidelity", "--checkpoints", *[str(c / "checkpoint.npz") for c in ckpts],
                "--dataset", str(runs["data"]), "--out", str(out)]) == 0
    table = read_rows(out / "fidelity.csv")
    layout_ok = (table[0] == ["metric", "a=4", "a=8", "a=16"]
                 and [r[0] for r in table[1:]] == ["eps_1", "eps_2", "eps_avg", "MAE", "RMSE"])
    detail = read_rows(out / "fidelity_detail.csv")[1:]
    # every cell: the per-sample minimum of eps - bound
    min_slack = min(float(r[5]) for r in detail)
    ok = layout_ok and min_slack >= -1e-9 and len(detail) == 6
    eps_avg = ", ".join(f"{float(x):.3f}" for x in table[3][1:])
    report(7, ok, f"layout {'ok' if layout_ok else 'WRONG'}, eps_avg {eps_avg} for a=4,8,16, "
                  f"min per-sample eps - bound {min_slack:.3e}")
    assert ok


def test_c08_schedule_and_loss_points():
    checks = [
        abs(lr_schedule(0) - 0.002) < 1e-15,
        abs(lr_schedule(10) - 0.001) < 1e-15,
        abs(lr_schedule(25) - 0.0005) < 1e-15,
        abs(huber_loss(np.zeros((1, 1)), np.full((1, 1), 0.5)).item() - 0.125) < 1e-15,
        abs(huber_loss(np.zeros((1, 1)), np.full((1, 1), -3.0)).item() - 2.5) < 1e-15,
    ]
    report(8, all(checks), f"{sum(checks)}/5 point checks")
    assert all(checks)


def _mean_entropy(out, ds):
    model, norm, tc = load_trained(out / "checkpoint.npz")
    ents = []
    for layer in range(model.cfg.L + 1):
        G = np.concatenate(list(routing_weights(model, norm, ds, tc.split, "test", layer, tc.batch_size)))
        ents.append(usage_entropy(G))
    return float(np.mean(ents))


def test_c09_router_balance_ablation(runs):
    ds = load_series(runs["data"])
    wins, parts = 0, []
    for seed in (0, 1, 2):
        ha = trained(runs, "a8") if seed == 0 else trained(runs, f"ha_s{seed}", f"seed={seed}")
        nb = trained(runs, f"nobias_s{seed}", f"seed={seed}", "router=nobias")
        h, n = _mean_entropy(ha, ds), _mean_entropy(nb, ds)
        wins += h > n
        parts.append(f"seed {seed}: {h:.4f} vs {n:.4f}")
    ok = wins >= 2
    report(9, ok, f"HA entropy > no-bias in {wins}/3 seeds (max ln4={np.log(4):.4f}); " + "; ".join(parts))
    assert ok


def test_c10_determinism(runs):
    a = trained(runs, "a8")
    b = trained(runs, "a8_repeat")
    same_hist = (a / "history.csv").read_bytes() == (b / "history.csv").read_bytes()
    same_ckpt = (a / "checkpoint.npz").read_bytes() == (b / "checkpoint.npz").read_bytes()
    ok = same_hist and same_ckpt
    report(10, ok, f"history identical: {same_hist}, checkpoint identical: {same_ckpt}")
    assert ok


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q"]))

"""Wall-clock and allocation scaling of the forward pass over node count."""

from __future__ import annotations

import logging
import statistics
import time
from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from . import tensor as tn
from .model import FaST, ModelConfig
from .tensor import ElementCounter
from .training import Adam, huber_loss

logger = logging.getLogger(__name__)

BENCH_HEADER = (
    "N", "T", "P", "a", "forward_ms", "train_step_ms", "peak_intermediate_elements",
    "attention_ms", "moe_ms", "input_ms", "head_ms",
)


@dataclass
class BenchRow:
    N: int
    T: int
    P: int
    a: int
    forward_ms: float
    train_step_ms: float
    peak_intermediate_elements: int
    stage_ms: dict

    def as_tuple(self):
        s = self.stage_ms
        return (self.N, self.T, self.P, self.a, self.forward_ms, self.train_step_ms,
                self.peak_intermediate_elements, s.get("attention", 0.0), s.get("moe", 0.0),
                s.get("input", 0.0), s.get("head", 0.0))


def _median_ms(fn, reps: int, warmup: int) -> float:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return statistics.median(times)


def bench_point(
    N: int, T: int = 96, P: int = 96, d: int = 64, e: int = 8, a: int = 32, L: int = 3,
    batch: int = 1, reps: int = 5, warmup: int = 2, train_step: bool = True, seed: int = 0,
) -> BenchRow:
    """Time one configuration with untrained random weights."""
    cfg = ModelConfig(N=N, T=T, P=P, d=d, e=e, a=a, L=L)
    model = FaST(cfg, seed=seed)
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((batch, N, T))
    Y = rng.standard_normal((batch, N, P))
    tod = rng.integers(0, cfg.steps_per_day, size=batch)
    dow = rng.integers(0, 7, size=batch)

    def fwd():
        with tn.no_grad():
            model(X, tod, dow)

    forward_ms = _median_ms(fwd, reps, warmup)
    with ElementCounter() as counter, tn.no_grad():
        model(X, tod, dow)
    stages: dict[str, float] = {}
    for _ in range(reps):
        with tn.no_grad():
            model(X, tod, dow, timers=stages)
    stages = {k: v * 1e3 / reps for k, v in stages.items()}

    train_ms = float("nan")
    if train_step:
        opt = Adam(model.params)

        def step():
            model.zero_grad()
            Y_hat, _ = model(X, tod, dow)
            huber_loss(Y, Y_hat).backward()
            opt.step(1e-6)

        train_ms = _median_ms(step, max(1, reps // 2), 1)
    return BenchRow(N, T, P, a, forward_ms, train_ms, counter.peak // batch, stages)


def run_bench(
    Ns=(256, 512, 1024, 2048, 4096), horizons=(96,), agents=(32,), threads: int | None = 1, **kw
) -> list[BenchRow]:
    rows = []
    with threadpool_limits(limits=threads):
        for P in horizons:
            for a in agents:
                for N in Ns:
                    row = bench_point(N, P=P, a=a, **kw)
                    logger.info("bench N=%d P=%d a=%d forward %.2f ms", N, P, a, row.forward_ms)
                    rows.append(row)
    return rows


def fit_exponent(xs, ys) -> float:
    """Slope of ``log y`` against ``log x`` by least squares."""
    slope, _ = np.polyfit(np.log(np.asarray(xs, float)), np.log(np.asarray(ys, float)), 1)
    return float(slope)

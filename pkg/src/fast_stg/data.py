"""Series storage, chronological splits, normalization and sliding windows."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from ._io import atomic_path

MAGIC = b"FSTG1\n"
DAYS_PER_WEEK = 7
ANCHORS = ("last", "first", "target")


class ParseError(ValueError):
    """Malformed dataset file; ``offset`` is the byte position of the problem."""

    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (at byte offset {offset})")
        self.offset = offset


class ConfigError(ValueError):
    pass


@dataclass
class SeriesDataset:
    values: np.ndarray  # N x T_total, node-major
    granularity_minutes: int = 15
    tod0: int = 0
    dow0: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] < 1:
            raise ConfigError(f"values must be N x T with N >= 1, got shape {self.values.shape}")
        if self.granularity_minutes <= 0 or 1440 % self.granularity_minutes:
            raise ConfigError(f"granularity {self.granularity_minutes} min does not divide a day")
        if not 0 <= self.tod0 < self.steps_per_day or not 0 <= self.dow0 < DAYS_PER_WEEK:
            raise ConfigError(f"start offset (tod0={self.tod0}, dow0={self.dow0}) out of range")

    @property
    def N(self) -> int:
        return self.values.shape[0]

    @property
    def T_total(self) -> int:
        return self.values.shape[1]

    @property
    def steps_per_day(self) -> int:
        return 1440 // self.granularity_minutes

    def time_index(self, t) -> tuple[np.ndarray, np.ndarray]:
        """(time-of-day, day-of-week) of absolute step(s) ``t``."""
        t = np.asarray(t)
        spd = self.steps_per_day
        absolute = self.tod0 + t
        return absolute % spd, (self.dow0 + absolute // spd) % DAYS_PER_WEEK

    def with_values(self, values: np.ndarray) -> "SeriesDataset":
        return SeriesDataset(values, self.granularity_minutes, self.tod0, self.dow0)


# ---------------------------------------------------------------- file format


def save_series(ds: SeriesDataset, path) -> None:
    header = (
        f"N={ds.N} T={ds.T_total} granularity_min={ds.granularity_minutes} "
        f"tod0={ds.tod0} dow0={ds.dow0}\n"
    ).encode("ascii")
    with atomic_path(path) as tmp:
        with open(tmp, "wb") as fh:
            fh.write(MAGIC)
            fh.write(header)
            fh.write(np.ascontiguousarray(ds.values, dtype="<f8").tobytes())


def load_series(path) -> SeriesDataset:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise ParseError("missing FSTG1 magic", 0)
    pos = len(MAGIC)
    end = raw.find(b"\n", pos)
    if end < 0:
        raise ParseError("unterminated header line", pos)
    fields = {}
    try:
        for tok in raw[pos:end].decode("ascii").split():
            k, v = tok.split("=", 1)
            fields[k] = int(v)
    except (UnicodeDecodeError, ValueError):
        raise ParseError("malformed header", pos) from None
    need = ("N", "T", "granularity_min", "tod0", "dow0")
    missing = [k for k in need if k not in fields]
    if missing or set(fields) - set(need):
        raise ParseError(f"header keys {sorted(fields)} do not match {list(need)}", pos)
    N, T = fields["N"], fields["T"]
    if N < 1 or T < 1:
        raise ParseError(f"non-positive dimensions N={N} T={T}", pos)
    start = end + 1
    expected = N * T * 8
    got = len(raw) - start
    if got < expected:
        raise ParseError(f"expected {N * T} values, file holds {got // 8}", len(raw))
    if got > expected:
        raise ParseError(f"{got - expected} trailing bytes after {N * T} values", start + expected)
    values = np.frombuffer(raw, dtype="<f8", count=N * T, offset=start).astype(np.float64)
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        raise ParseError("non-finite value", start + 8 * int(bad[0]))
    try:
        return SeriesDataset(values.reshape(N, T), fields["granularity_min"], fields["tod0"], fields["dow0"])
    except ConfigError as exc:
        raise ParseError(str(exc), pos) from None


def load_csv(path, granularity_minutes: int = 15, tod0: int = 0, dow0: int = 0) -> SeriesDataset:
    """CSV with a header row of node ids and one row per time step."""
    arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2, dtype=np.float64)
    if not np.isfinite(arr).all():
        raise ConfigError(f"{path}: non-finite values")
    return SeriesDataset(arr.T.copy(), granularity_minutes, tod0, dow0)


# ---------------------------------------------------------------- splits & windows


def chronological_split(T_total: int, ratios=(0.6, 0.2, 0.2), window: int | None = None):
    """Three contiguous ``(start, stop)`` ranges in time order.

    Boundaries sit at ``floor(r0 * T)`` and ``floor((r0 + r1) * T)``. When
    ``window`` (T + P) is given, every range must fit at least one window.
    """
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ConfigError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    # tolerance keeps e.g. 0.6 * 10 from flooring to 5
    b1 = math.floor(ratios[0] * T_total + 1e-9)
    b2 = math.floor((ratios[0] + ratios[1]) * T_total + 1e-9)
    ranges = ((0, b1), (b1, b2), (b2, T_total))
    if window is not None:
        for name, (s, e) in zip(("train", "val", "test"), ranges):
            if e - s < window:
                raise ConfigError(f"{name} split has {e - s} steps, fewer than one window ({window})")
    return ranges


@dataclass
class WindowBatch:
    X: np.ndarray  # B x N x T
    Y: np.ndarray  # B x N x P
    tod: np.ndarray  # B
    dow: np.ndarray  # B
    anchors: np.ndarray = field(default=None)  # last input step of each sample


def window_anchors(rng_range, T: int, P: int) -> np.ndarray:
    start, stop = rng_range
    return np.arange(start + T - 1, stop - P)


def window_iter(
    ds: SeriesDataset,
    rng_range,
    T: int,
    P: int,
    B: int,
    shuffle_seed: int | None = None,
    time_anchor: str = "last",
) -> Iterator[WindowBatch]:
    """Every window fully inside ``rng_range``, in batches of ``B``.

    A window anchored at ``t`` has inputs ``t-T+1..t`` and targets
    ``t+1..t+P``. Time indices come from ``t`` (``time_anchor="last"``), the
    first input step, or the first target step.
    """
    if time_anchor not in ANCHORS:
        raise ConfigError(f"time_anchor must be one of {ANCHORS}")
    anchors = window_anchors(rng_range, T, P)
    if shuffle_seed is not None:
        anchors = np.random.default_rng(shuffle_seed).permutation(anchors)
    shift = {"last": 0, "first": -(T - 1), "target": 1}[time_anchor]
    v = ds.values
    offs_x = np.arange(-T + 1, 1)
    offs_y = np.arange(1, P + 1)
    for i in range(0, len(anchors), B):
        t = anchors[i : i + B]
        X = np.transpose(v[:, t[:, None] + offs_x], (1, 0, 2))
        Y = np.transpose(v[:, t[:, None] + offs_y], (1, 0, 2))
        tod, dow = ds.time_index(t + shift)
        yield WindowBatch(X, Y, tod, dow, t)


# ---------------------------------------------------------------- normalization


@dataclass
class Normalizer:
    mean: np.ndarray  # N x 1
    std: np.ndarray  # N x 1

    @classmethod
    def fit(cls, ds: SeriesDataset, train_range, mode: str = "node") -> "Normalizer":
        """Population statistics over the training steps only."""
        s, e = train_range
        x = ds.values[:, s:e]
        if mode == "node":
            mu = x.mean(axis=1, keepdims=True)
            sd = x.std(axis=1, keepdims=True)
        elif mode == "global":
            mu = np.full((ds.N, 1), x.mean())
            sd = np.full((ds.N, 1), x.std())
        else:
            raise ConfigError(f"normalization mode must be 'node' or 'global', got {mode!r}")
        sd = np.where(sd > 0, sd, 1.0)
        return cls(mu, sd)

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Normalize arrays whose node axis is second to last (``... x N x steps``)."""
        return (x - self.mean) / self.std

    def invert(self, x: np.ndarray) -> np.ndarray:
        return x * self.std + self.mean


# ---------------------------------------------------------------- synthetic data


def synth_groups(N: int) -> tuple[np.ndarray, np.ndarray]:
    """Node indices of the two phase-sharing groups used by :func:`synth_generate`."""
    q = max(N // 4, 2)
    return np.arange(0, q), np.arange(q, min(2 * q, N))


def synth_generate(
    N: int,
    days: int,
    granularity: int = 15,
    seed: int = 0,
    noise: float = 0.05,
    weekly: float = 0.3,
) -> SeriesDataset:
    """Daily cycles with node-specific phase and amplitude.

    Each node: ``base + amp * shape(t + phase) * weekly_factor + noise``, where
    ``shape`` is a fundamental plus second harmonic and weekend days are damped
    by ``weekly``. The two groups from :func:`synth_groups` share a phase
    (group B half a day from group A) so their series are affine copies.
    ``noise`` is relative to each node's amplitude.
    """
    rng = np.random.default_rng(seed)
    spd = 1440 // granularity
    steps = days * spd
    base = rng.uniform(80.0, 160.0, size=N)
    amp = rng.uniform(20.0, 60.0, size=N)
    phase = rng.uniform(0.0, 2 * np.pi, size=N)
    ga, gb = synth_groups(N)
    phase[ga] = phase[ga[0]]
    phase[gb] = phase[ga[0]] + np.pi
    t = np.arange(steps)
    # reduce t first so the daily cycle repeats bit-for-bit
    angle = 2 * np.pi * (t % spd)[None, :] / spd + phase[:, None]
    shape = np.sin(angle) + 0.3 * np.sin(2 * angle)
    dow = (t // spd) % DAYS_PER_WEEK
    week = np.where(dow >= 5, 1.0 - weekly, 1.0)
    values = base[:, None] + amp[:, None] * shape * week[None, :]
    values += noise * amp[:, None] * rng.standard_normal((N, steps))
    return SeriesDataset(values, granularity, 0, 0)

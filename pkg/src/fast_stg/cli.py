"""Command-line entry point: ``fast-stg {train,predict,eval,fidelity,bench,synth}``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import bench as bench_mod
from .analysis import fidelity_detail_rows, fidelity_table, metrics, pearson
from .config import load_run_config, render, split_configs
from .data import ConfigError, ParseError, SeriesDataset, load_csv, load_series, save_series, synth_generate
from .model import NonFiniteError
from .sweeps import fidelity_sweep, routing_profile
from .training import evaluate, load_trained, train
from ._io import write_csv, write_text

logger = logging.getLogger("fast_stg")

EXIT_USAGE = 2


class UsageError(Exception):
    pass


def _setup_logging() -> None:
    level = os.environ.get("FAST_STG_LOG", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.INFO), format="%(levelname)s %(name)s: %(message)s")


def _load_dataset(path: str | None, key: str = "dataset") -> SeriesDataset:
    if not path:
        raise UsageError(f"missing required key '{key}'")
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{key}: file not found: {path}")
    return load_csv(p) if p.suffix.lower() == ".csv" else load_series(p)


def _out_dir(args, default="out") -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------- commands


def cmd_train(args) -> int:
    overrides = dict(kv.split("=", 1) for kv in args.set or [])
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.dataset:
        overrides["dataset"] = args.dataset
    if args.out:
        overrides["out"] = args.out
    cfg = load_run_config(args.config, overrides)
    ds = _load_dataset(cfg.get("dataset"))
    model_cfg, train_cfg = split_configs(cfg, ds.N, ds.steps_per_day)
    out = Path(cfg.get("out", "out"))
    out.mkdir(parents=True, exist_ok=True)
    write_text(out / "config.txt", render(cfg))
    result = train(model_cfg, train_cfg, ds)
    ckpt, hist = result.save(out, record_seconds=bool(cfg.get("timing", 1)))
    logger.info("best epoch %d, val MAE %.6g -> %s", result.best_epoch, result.best_val_mae, ckpt)
    return 0


def cmd_predict(args) -> int:
    model, norm, tc = load_trained(args.checkpoint)
    ds = _load_dataset(args.dataset)
    cfg = model.cfg
    t = args.anchor
    if t < cfg.T - 1 or t >= ds.T_total:
        raise UsageError(f"anchor {t} needs a full {cfg.T}-step window inside [0, {ds.T_total})")
    X = norm.apply(ds.values[:, t - cfg.T + 1 : t + 1])
    shift = {"last": 0, "first": -(cfg.T - 1), "target": 1}[tc.time_anchor]
    tod, dow = ds.time_index(t + shift)
    Y_hat = norm.invert(model.predict(X, tod, dow))
    out = _out_dir(args)
    header = ["node"] + [f"step_{p + 1}" for p in range(cfg.P)]
    write_csv(out / "forecast.csv", header, [[n, *Y_hat[n]] for n in range(cfg.N)])
    if t + cfg.P < ds.T_total:
        rep = metrics(ds.values[:, t + 1 : t + 1 + cfg.P], Y_hat)
        logger.info("window MAE %.6g RMSE %.6g", rep.mae, rep.rmse)
    return 0


def cmd_eval(args) -> int:
    model, norm, tc = load_trained(args.checkpoint)
    ds = _load_dataset(args.dataset)
    rep = evaluate(model, norm, ds, args.split, tc)
    out = _out_dir(args)
    write_csv(out / "metrics.csv", ["step", "mae", "rmse", "mape", "r2"], rep.rows())
    if args.routing_layer is not None:
        profile, ent = routing_profile(args.checkpoint, ds, args.split, args.routing_layer)
        e = profile.shape[1]
        rows = [[n, *profile[n]] for n in range(profile.shape[0])]
        write_csv(out / "expert_profile.csv", ["node"] + [f"expert_{i}" for i in range(e)], rows)
        write_csv(out / "expert_entropy.csv", ["layer", "usage_entropy", "max_entropy"],
                  [[args.routing_layer, ent, float(np.log(e))]])
    print(f"MAE={rep.mae:.6g} RMSE={rep.rmse:.6g} MAPE={rep.mape:.6g}% R2={rep.r2:.6g}")
    return 0


def cmd_fidelity(args) -> int:
    ds = _load_dataset(args.dataset)
    reports = fidelity_sweep(args.checkpoints, ds, args.split)
    if not reports:
        raise UsageError("no readable checkpoints given")
    out = _out_dir(args)
    write_csv(out / "fidelity.csv", *fidelity_table(reports))
    write_csv(out / "fidelity_detail.csv", *fidelity_detail_rows(reports))
    if len(reports) >= 2:
        eps = [r.epsilon_avg for r in reports]
        rows = [["MAE", pearson(eps, [r.mae for r in reports])],
                ["RMSE", pearson(eps, [r.rmse for r in reports])]]
        write_csv(out / "fidelity_correlation.csv", ["metric", "pearson_r_vs_eps_avg"], rows)
    return 0


def _ints(s: str) -> list[int]:
    return [int(x) for x in s.split(",") if x]


def cmd_bench(args) -> int:
    rows = bench_mod.run_bench(
        Ns=_ints(args.Ns), horizons=_ints(args.horizons), agents=_ints(args.agents),
        threads=args.threads or 1, T=args.T, d=args.d, e=args.e, L=args.L,
        batch=args.batch, reps=args.reps, train_step=not args.no_train_step,
    )
    out = _out_dir(args)
    write_csv(out / "bench.csv", bench_mod.BENCH_HEADER, [r.as_tuple() for r in rows])
    for P in _ints(args.horizons):
        for a in _ints(args.agents):
            sel = [r for r in rows if r.P == P and r.a == a]
            if len(sel) >= 2:
                Ns = [r.N for r in sel]
                print(f"P={P} a={a}: forward exponent {bench_mod.fit_exponent(Ns, [r.forward_ms for r in sel]):.3f}, "
                      f"element exponent {bench_mod.fit_exponent(Ns, [r.peak_intermediate_elements for r in sel]):.3f}")
    return 0


def cmd_synth(args) -> int:
    ds = synth_generate(args.N, args.days, args.granularity, args.seed or 0, args.noise)
    path = Path(args.out or "synth.fstg")
    save_series(ds, path)
    logger.info("wrote %d x %d series to %s", ds.N, ds.T_total, path)
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value configuration file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory (file for synth)")
    common.add_argument("--threads", type=int, help="BLAS threads (default: library default; bench: 1)")

    p = argparse.ArgumentParser(prog="fast-stg", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[common], help="train a model")
    t.add_argument("--dataset")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", parents=[common], help="forecast from one window")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--dataset")
    pr.add_argument("--anchor", type=int, required=True, help="last input step of the window")
    pr.set_defaults(func=cmd_predict)

    ev = sub.add_parser("eval", parents=[common], help="metrics on a split")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--dataset")
    ev.add_argument("--split", default="test", choices=("train", "val", "test"))
    ev.add_argument("--routing-layer", type=int, help="also write per-node expert weights of this layer")
    ev.set_defaults(func=cmd_eval)

    fi = sub.add_parser("fidelity", parents=[common], help="reconstruction error table across checkpoints")
    fi.add_argument("--checkpoints", nargs="+", required=True)
    fi.add_argument("--dataset")
    fi.add_argument("--split", default="test", choices=("train", "val", "test"))
    fi.set_defaults(func=cmd_fidelity)

    b = sub.add_parser("bench", parents=[common], help="forward-time scaling sweep")
    b.add_argument("--Ns", default="256,512,1024,2048,4096")
    b.add_argument("--horizons", default="96")
    b.add_argument("--agents", default="32")
    b.add_argument("--T", type=int, default=96)
    b.add_argument("--d", type=int, default=64)
    b.add_argument("--e", type=int, default=8)
    b.add_argument("--L", type=int, default=3)
    b.add_argument("--batch", type=int, default=1)
    b.add_argument("--reps", type=int, default=5)
    b.add_argument("--no-train-step", action="store_true")
    b.set_defaults(func=cmd_bench)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic dataset")
    s.add_argument("--N", type=int, default=16)
    s.add_argument("--days", type=int, default=14)
    s.add_argument("--granularity", type=int, default=15)
    s.add_argument("--noise", type=float, default=0.05)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        if args.threads and args.command != "bench":
            with threadpool_limits(limits=args.threads):
                return args.func(args)
        return args.func(args)
    except (UsageError, ConfigError, ParseError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

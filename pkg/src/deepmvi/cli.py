"""Command line entry point: ``deepmvi {synth,contaminate,impute,score,bench}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 imputer
failure (``bench`` only reports it as an error with ``--strict``).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .data import (DatasetTensor, load_dense, load_long, read_mask, write_dense, write_long,
                   write_mask)
from .errors import (CapacityError, ConfigurationError, DataFormatError, DeepMviError,
                     IntegrityError, ScoringError, UnprocessableSeriesError)
from .evaluation import (IMPUTERS, SYNTHETIC, DeepMviOptions, run_benchmark, run_imputer,
                         score)
from .scenarios import KINDS, MissScenario, generate

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_IMPUTER = 0, 2, 3, 4
LAYOUTS = ("auto", "time-rows", "time-cols", "long")

log = logging.getLogger("deepmvi")


class _Failure(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------- io helpers


def _resolve_layout(path, layout: str) -> str:
    if layout != "auto":
        return layout
    with open(path, encoding="utf-8") as fh:
        first = fh.readline().strip().replace(" ", "")
    return "long" if first.endswith(",t,value") else "time-rows"


def load(path, layout: str = "auto", na_token=None) -> DatasetTensor:
    layout = _resolve_layout(path, layout)
    if layout == "long":
        return load_long(path, na_token)
    return load_dense(path, layout, na_token)


def save(ds: DatasetTensor, path, layout: str = "auto") -> None:
    if layout == "auto":
        layout = "long" if len(ds.dims) > 1 else "time-rows"
    if layout == "long":
        write_long(ds, path)
    elif len(ds.dims) > 1:
        raise ConfigurationError("dense layouts hold one dimension; use --layout long")
    else:
        write_dense(ds, path, layout)


def _completed(ds: DatasetTensor, values) -> DatasetTensor:
    return DatasetTensor(ds.dims, values, np.ones(ds.shape, dtype=bool))


# ---------------------------------------------------------------- arguments


def _scenario(args) -> MissScenario:
    return MissScenario(args.scenario, x_percent=args.x_percent, block_size=args.block_size,
                        miss_fraction=args.miss_frac, seed=args.seed,
                        shuffle_series=args.shuffle_series)


def _options(args) -> DeepMviOptions:
    return DeepMviOptions(w=args.w, p=args.p, heads=args.heads, gamma=args.gamma,
                          top_l=args.top_l, attn_mode=args.attn_mode, lr=args.lr,
                          batch=args.batch, patience=args.patience, loss=args.loss,
                          max_iters=args.max_iters, standardize=not args.no_normalize)


def _data_args(p):
    p.add_argument("--data", required=True, help="input dataset file")
    p.add_argument("--layout", choices=LAYOUTS, default="auto",
                   help="dense time-rows/time-cols or long dim1..dimn,t,value (default: detect)")
    p.add_argument("--na-token", default=None, help="extra token meaning a missing cell")


def _scenario_args(p):
    p.add_argument("--scenario", choices=KINDS, default="mcar")
    p.add_argument("--x-percent", type=float, default=10.0,
                   help="percent of series that receive MCAR blocks")
    p.add_argument("--block-size", type=int, default=10,
                   help="Blackout length or point-missing run length")
    p.add_argument("--miss-frac", type=float, default=0.1,
                   help="fraction of cells hidden by the point scenario")
    p.add_argument("--shuffle-series", action="store_true",
                   help="pick MCAR series at random instead of the first ones")


def _model_args(p):
    g = p.add_argument_group("deepmvi")
    g.add_argument("--w", type=int, default=10, help="window length")
    g.add_argument("--p", type=int, default=32, help="window filters")
    g.add_argument("--heads", type=int, default=4)
    g.add_argument("--gamma", type=float, default=1.0, help="RBF kernel width")
    g.add_argument("--top-l", type=int, default=32, help="siblings kept per dimension")
    g.add_argument("--attn-mode", choices=("softmax", "paper-literal"), default="softmax")
    g.add_argument("--lr", type=float, default=1e-3)
    g.add_argument("--batch", type=int, default=256)
    g.add_argument("--patience", type=int, default=3)
    g.add_argument("--loss", choices=("mae", "mse"), default="mae")
    g.add_argument("--max-iters", type=int, default=None,
                   help="update budget (default: 50 passes over the training cells)")
    g.add_argument("--no-normalize", action="store_true",
                   help="train on raw values instead of standardized series")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deepmvi", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write one of the synthetic datasets")
    p.add_argument("--kind", choices=sorted(SYNTHETIC), default="seasonal")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--layout", choices=LAYOUTS, default="auto")
    p.add_argument("--out", required=True)

    p = sub.add_parser("contaminate", help="hide cells according to a scenario")
    _data_args(p)
    _scenario_args(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="contaminated dataset")
    p.add_argument("--mask", default=None, help="where to write the hidden-cell mask")

    p = sub.add_parser("impute", help="fill the missing cells of a dataset")
    _data_args(p)
    _model_args(p)
    p.add_argument("--imputers", default="deepmvi", choices=IMPUTERS)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--checkpoint", default=None, help="save the trained model here")
    p.add_argument("--out", required=True)

    p = sub.add_parser("score", help="MAE and RMSE of an imputation over a mask")
    p.add_argument("--truth", required=True)
    p.add_argument("--imputed", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--layout", choices=LAYOUTS, default="auto")
    p.add_argument("--na-token", default=None)
    p.add_argument("--out", default=None)

    p = sub.add_parser("bench", help="contaminate, impute with every imputer, score")
    _data_args(p)
    _scenario_args(p)
    _model_args(p)
    p.add_argument("--imputers", default=",".join(IMPUTERS),
                   help=f"comma-separated subset of {','.join(IMPUTERS)}")
    p.add_argument("--svd-k", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--parallel", action="store_true",
                   help="run imputers in worker processes (capped by MVI_THREADS)")
    p.add_argument("--strict", action="store_true", help="exit 4 when any imputer fails")
    p.add_argument("--out", required=True, help="output directory")
    return parser


# ---------------------------------------------------------------- commands


def cmd_synth(args):
    ds = SYNTHETIC[args.kind](args.seed)
    save(ds, args.out, args.layout)
    print(f"wrote {args.kind} dataset {ds.shape} to {args.out}")


def cmd_contaminate(args):
    ds = load(args.data, args.layout, args.na_token)
    M = generate(ds.shape, _scenario(args)) & ds.available
    layout = _resolve_layout(args.data, args.layout)
    save(ds.with_missing(M), args.out, layout)
    if args.mask:
        write_mask(M, args.mask)
    print(f"hid {int(M.sum())} cells; wrote {args.out}")


def cmd_impute(args):
    ds = load(args.data, args.layout, args.na_token)
    if args.checkpoint and args.imputers != "deepmvi":
        raise ConfigurationError("--checkpoint needs the deepmvi imputer")
    try:
        if args.imputers == "deepmvi":
            from .model import fit_impute, save_checkpoint
            opts = _options(args)
            tt, kr, trainer = opts.build(args.seed)
            values, model, _ = fit_impute(ds, trainer, standardize=opts.standardize, tt=tt,
                                          kr=kr, loss_kind=opts.loss)
            if args.checkpoint:
                save_checkpoint(model, args.checkpoint)
        else:
            values, _ = run_imputer(args.imputers, ds, args.seed)
    except (ConfigurationError, UnprocessableSeriesError):
        raise
    except (DeepMviError, FloatingPointError) as exc:
        raise _Failure(EXIT_IMPUTER, f"imputer {args.imputers} failed: {exc}") from exc
    layout = _resolve_layout(args.data, args.layout)
    save(_completed(ds, values), args.out, layout)
    print(f"imputed {int(ds.missing.sum())} cells; wrote {args.out}")


def cmd_score(args):
    truth = load(args.truth, args.layout, args.na_token)
    imputed = load(args.imputed, args.layout, args.na_token)
    M = read_mask(args.mask, truth.shape)
    mae, rmse = score(np.where(M, truth.values, 0.0), np.where(M, imputed.values, 0.0), M)
    text = json.dumps({"mae": mae, "rmse": rmse, "cells": int(M.sum())}, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)


def cmd_bench(args):
    ds = load(args.data, args.layout, args.na_token)
    names = [n.strip() for n in args.imputers.split(",") if n.strip()]
    report = run_benchmark(ds, _scenario(args), names, seed=args.seed, out=args.out,
                           options=_options(args), svd_k=args.svd_k, parallel=args.parallel,
                           source=Path(args.data).name)
    for name, r in sorted(report.results.items()):
        if r["status"] == "ok":
            print(f"{name:8s} MAE {r['mae']:.6f}  RMSE {r['rmse']:.6f}")
        else:
            print(f"{name:8s} FAILED {r['error']}")
    if report.failures and args.strict:
        raise _Failure(EXIT_IMPUTER, f"imputers failed: {', '.join(report.failures)}")


COMMANDS = {"synth": cmd_synth, "contaminate": cmd_contaminate, "impute": cmd_impute,
            "score": cmd_score, "bench": cmd_bench}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except _Failure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigurationError, CapacityError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataFormatError, IntegrityError, UnprocessableSeriesError, ScoringError,
            OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

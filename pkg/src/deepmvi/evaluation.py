"""Scoring, downstream aggregates, synthetic datasets and the benchmark runner."""

from __future__ import annotations

import csv
import json
import logging
import os
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .baselines import impute_linear, impute_mean, impute_svd
from .data import DatasetTensor, DimensionCatalog, from_matrix
from .errors import ConfigurationError, DeepMviError, ScoringError
from .kernel import KRConfig
from .model import TrainerConfig, fit_impute
from .scenarios import MissScenario, generate, make_rng
from .transformer import TTConfig

log = logging.getLogger(__name__)

IMPUTERS = ("deepmvi", "mean", "linear", "svd")


# ---------------------------------------------------------------- scoring


def score(truth, imputed, M) -> tuple:
    """``(MAE, RMSE)`` over the cells of ``M``."""
    truth = np.asarray(truth, dtype=np.float64)
    imputed = np.asarray(imputed, dtype=np.float64)
    M = np.asarray(M, dtype=bool)
    if truth.shape != imputed.shape or truth.shape != M.shape:
        raise ScoringError(f"shape mismatch: {truth.shape}, {imputed.shape}, {M.shape}")
    if not M.any():
        raise ScoringError("no missing cells to score")
    err = imputed[M] - truth[M]
    if not np.all(np.isfinite(err)):
        raise ScoringError("non-finite imputed value at a scored cell")
    return float(np.mean(np.abs(err))), float(np.sqrt(np.mean(err * err)))


def _aggregate(values, M, mode):
    if mode == "imputed":
        return values.mean(axis=0), np.ones(values.shape[1:], dtype=bool)
    keep = ~M
    cnt = keep.sum(axis=0)
    total = np.where(keep, values, 0.0).sum(axis=0)
    return total / np.maximum(cnt, 1), cnt > 0


def downstream_aggregate(truth, candidate, M, mode: str = "imputed", counts=None) -> float:
    """MAE between the mean over the first dimension of ``candidate`` and of
    ``truth``.

    ``mode="discard"`` drops the cells of ``M`` from each mean instead; slots
    left with no cell are skipped and tallied in ``counts["omitted_slots"]``
    when a dict is supplied.
    """
    if mode not in ("imputed", "discard"):
        raise ConfigurationError(f"unknown aggregate mode {mode!r}")
    truth = np.asarray(truth, dtype=np.float64)
    candidate = np.asarray(candidate, dtype=np.float64)
    M = np.asarray(M, dtype=bool)
    if truth.ndim < 2 or truth.shape[0] < 2:
        raise ConfigurationError("the first dimension needs at least two members")
    ref = truth.mean(axis=0)
    agg, ok = _aggregate(candidate, M, mode)
    if counts is not None:
        counts["omitted_slots"] = counts.get("omitted_slots", 0) + int((~ok).sum())
    if not ok.any():
        raise ScoringError("every aggregate slot is empty")
    return float(np.mean(np.abs(agg[ok] - ref[ok])))


# ---------------------------------------------------------------- synthetic data


def seasonal_dataset(seed: int = 0, n_series: int = 5, T: int = 2000, period: int = 50,
                     noise: float = 0.05) -> DatasetTensor:
    """Sum of the first two harmonics of ``period`` with random amplitudes and
    phases per series, plus Gaussian noise."""
    rng = make_rng([seed, 101])
    t = np.arange(T)
    rows = []
    for _ in range(n_series):
        a1, a2 = rng.uniform(0.5, 1.5), rng.uniform(0.2, 0.8)
        p1, p2 = rng.uniform(0, 2 * np.pi, 2)
        rows.append(a1 * np.sin(2 * np.pi * t / period + p1)
                    + a2 * np.sin(4 * np.pi * t / period + p2))
    X = np.array(rows) + rng.normal(0.0, noise, (n_series, T))
    return from_matrix(X)


def duplicated_dataset(seed: int = 0, n_base: int = 10, T: int = 1000, period: int = 50,
                       noise: float = 0.05) -> DatasetTensor:
    """``n_base`` seasonal series, each stored twice, as a two-dimensional
    tensor: ``base`` (which signal) by ``copy`` (0 or 1).

    Bases share the period but get independent amplitudes and phases for
    three harmonics plus independent noise; the two copies of a base are
    identical.
    """
    rng = make_rng([seed, 202])
    t = np.arange(T)
    base = []
    for _ in range(n_base):
        amps = rng.uniform(0.2, 1.2, 3)
        phases = rng.uniform(0, 2 * np.pi, 3)
        base.append(sum(a * np.sin(2 * np.pi * (h + 1) * t / period + ph)
                        for h, (a, ph) in enumerate(zip(amps, phases))))
    X = np.array(base) + rng.normal(0.0, noise, (n_base, T))
    X = np.repeat(X[:, None, :], 2, axis=1)
    dims = [DimensionCatalog("base", tuple(f"b{i}" for i in range(n_base))),
            DimensionCatalog("copy", ("c0", "c1"))]
    return DatasetTensor(dims, X)


def rank2_dataset(seed: int = 0, n_series: int = 20, T: int = 200) -> DatasetTensor:
    """Exactly rank-two matrix built from Gaussian factors."""
    rng = make_rng([seed, 303])
    return from_matrix(rng.normal(size=(n_series, 2)) @ rng.normal(size=(2, T)))


SYNTHETIC = {"seasonal": seasonal_dataset, "duplicated": duplicated_dataset,
             "rank2": rank2_dataset}


# ---------------------------------------------------------------- imputers


@dataclass(frozen=True)
class DeepMviOptions:
    w: int = 10
    p: int = 32
    heads: int = 4
    gamma: float = 1.0
    top_l: int = 32
    attn_mode: str = "softmax"
    lr: float = 1e-3
    batch: int = 256
    patience: int = 3
    loss: str = "mae"
    max_iters: int | None = None
    standardize: bool = True
    use_fg: bool = True

    def build(self, seed: int):
        tt = TTConfig(w=self.w, p=self.p, n_head=self.heads, attn_mode=self.attn_mode)
        kr = KRConfig(gamma=self.gamma, top_l=self.top_l)
        trainer = TrainerConfig(lr=self.lr, batch_size=self.batch, patience=self.patience,
                                max_iters=self.max_iters, seed=seed)
        return tt, kr, trainer

    def resolved(self, seed: int) -> dict:
        tt, kr, trainer = self.build(seed)
        return {"transformer": asdict(tt), "kernel": asdict(kr), "trainer": asdict(trainer),
                "loss": self.loss, "standardize": self.standardize, "use_fg": self.use_fg}


def run_imputer(name: str, ds: DatasetTensor, seed: int = 0,
                options: DeepMviOptions | None = None, svd_k: int = 4):
    """Complete ``ds`` with one imputer; returns ``(values, flags)``."""
    if name == "mean":
        return impute_mean(ds), {}
    if name == "linear":
        return impute_linear(ds), {}
    if name == "svd":
        k = min(svd_k, ds.n_series, ds.horizon)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", RuntimeWarning)
            out, history = impute_svd(ds, k=k)
        return out, {"svd_k": k, "svd_sweeps": len(history), "svd_converged": not caught}
    if name == "deepmvi":
        options = options or DeepMviOptions()
        tt, kr, trainer = options.build(seed)
        out, model, history = fit_impute(ds, trainer, standardize=options.standardize, tt=tt,
                                         kr=kr, loss_kind=options.loss, use_fg=options.use_fg)
        flags = dict(sorted(model.events.items()))
        flags.update(iterations=history.iterations, best_iter=history.best_iter,
                     stopped_early=history.stopped_early)
        return out, flags
    raise ConfigurationError(f"unknown imputer {name!r}; expected one of {IMPUTERS}")


def _timed(args):
    name, ds, seed, options, svd_k = args
    start = time.perf_counter()
    try:
        values, flags = run_imputer(name, ds, seed, options, svd_k)
        return name, values, flags, None, time.perf_counter() - start
    except (DeepMviError, FloatingPointError, np.linalg.LinAlgError) as exc:
        return name, None, {}, f"{type(exc).__name__}: {exc}", time.perf_counter() - start


def worker_cap() -> int:
    raw = os.environ.get("MVI_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        value = int(raw)
    except ValueError:
        raise ConfigurationError(f"MVI_THREADS must be an integer, got {raw!r}") from None
    if value < 1:
        raise ConfigurationError("MVI_THREADS must be at least 1")
    return value


# ---------------------------------------------------------------- benchmark


@dataclass
class EvalReport:
    scenario: dict
    seed: int
    dataset: dict
    config: dict
    results: dict = field(default_factory=dict)
    downstream: dict = field(default_factory=dict)
    wall_time: dict = field(default_factory=dict)

    def to_dict(self, with_time: bool = True) -> dict:
        d = {"meta": {"scenario": self.scenario, "seed": self.seed, "dataset": self.dataset,
                      "config": self.config},
             "results": self.results, "downstream": self.downstream}
        if with_time:
            d["meta"]["wall_time"] = self.wall_time
        return d

    def to_json(self, with_time: bool = True) -> str:
        return json.dumps(self.to_dict(with_time), indent=2, sort_keys=True) + "\n"

    @property
    def failures(self) -> list:
        return sorted(k for k, v in self.results.items() if v["status"] != "ok")


def _x_value(scenario: MissScenario) -> float:
    return scenario.x_percent if scenario.kind == "mcar" else scenario.block_size


def run_benchmark(truth: DatasetTensor, scenario: MissScenario, imputers=IMPUTERS,
                  seed: int = 0, out=None, options: DeepMviOptions | None = None,
                  svd_k: int = 4, parallel: bool = False, source: str = "") -> EvalReport:
    """Hide the scenario's cells, run each imputer and score it.

    Only cells available in ``truth`` are hidden and scored.  Imputers see the
    contaminated copy; the truth stays with the scorer.  With ``out`` set, the
    report, a flat score CSV, plot data, the mask and every imputed tensor
    are written to that directory.
    """
    imputers = list(imputers)
    for name in imputers:
        if name not in IMPUTERS:
            raise ConfigurationError(f"unknown imputer {name!r}; expected one of {IMPUTERS}")
    options = options or DeepMviOptions()
    M = generate(truth.shape, scenario) & truth.available
    if not M.any():
        raise ConfigurationError("the scenario hides no available cell")
    contaminated = truth.with_missing(M)
    report = EvalReport(
        scenario=asdict(scenario), seed=seed,
        dataset={"source": source, "shape": list(truth.shape),
                 "dims": [d.name for d in truth.dims], "hidden_cells": int(M.sum())},
        config={"imputers": imputers, "svd": {"k": svd_k, "tol": 1e-5, "max_sweeps": 100},
                "deepmvi": options.resolved(seed), "parallel": parallel})

    jobs = [(name, contaminated, seed, options, svd_k) for name in imputers]
    if parallel and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(len(jobs), worker_cap())) as pool:
            finished = list(pool.map(_timed, jobs))
    else:
        finished = [_timed(job) for job in jobs]

    tv = np.where(truth.available, truth.values, np.nan)
    agg_ok = truth.values.ndim >= 2 and truth.shape[0] >= 2 and truth.available.all()
    discard = None
    if agg_ok:
        counts: dict = {}
        discard = downstream_aggregate(tv, contaminated.values, M, "discard", counts)
        report.downstream = {"discard_mae": discard, "omitted_slots": counts["omitted_slots"],
                             "imputers": {}}
    imputed = {}
    for name, values, flags, error, seconds in finished:
        report.wall_time[name] = seconds
        if error is not None:
            log.error("imputer %s failed: %s", name, error)
            report.results[name] = {"status": "failed", "error": error, "flags": flags}
            continue
        mae, rmse = score(np.where(M, tv, 0.0), np.where(M, values, 0.0), M)
        report.results[name] = {"status": "ok", "mae": mae, "rmse": rmse, "flags": flags}
        imputed[name] = values
        if agg_ok:
            agg = downstream_aggregate(tv, values, M, "imputed")
            report.downstream["imputers"][name] = {"mae": agg, "discard_minus_imputer":
                                                   discard - agg}
    if out is not None:
        _write_outputs(Path(out), report, scenario, M, imputed)
    return report


def _write_outputs(out: Path, report: EvalReport, scenario, M, imputed):
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    label = scenario.kind
    with open(out / "scores.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["imputer", "scenario", "metric", "value"])
        for name in sorted(report.results):
            r = report.results[name]
            if r["status"] == "ok":
                w.writerow([name, label, "mae", repr(r["mae"])])
                w.writerow([name, label, "rmse", repr(r["rmse"])])
        for name, d in sorted(report.downstream.get("imputers", {}).items()):
            w.writerow([name, label, "downstream_mae", repr(d["mae"])])
        if "discard_mae" in report.downstream:
            w.writerow(["discard", label, "downstream_mae", repr(report.downstream["discard_mae"])])
    with open(out / "plot.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["series", "x_name", "x", "y"])
        x_name = "percent_missing_series" if scenario.kind == "mcar" else "block_size"
        for name in sorted(report.results):
            if report.results[name]["status"] == "ok":
                w.writerow([name, x_name, repr(float(_x_value(scenario))),
                            repr(report.results[name]["mae"])])
    flatM = M.reshape(-1, M.shape[-1])
    np.savetxt(out / "mask.csv", flatM.astype(int), fmt="%d", delimiter=",")
    dump = out / "imputed"
    dump.mkdir(exist_ok=True)
    for name, values in imputed.items():
        np.savetxt(dump / f"{name}.csv", values.reshape(flatM.shape), fmt="%.17g",
                   delimiter=",")

"""DeepMVI: model assembly, synthetic-block training and imputation.

The predicted mean for a target ``(k, t)`` is a linear read-out of three
signals: the temporal transformer output ``h_tt``, the fine-grained local mean
``h_fg`` and the kernel-regression statistics ``h_kr``.  Training samples
available cells, hides a block shaped like the real missing blocks around
each one, and fits the read-out and every upstream parameter with Adam.

Typical use::

    completed, model, log = fit_impute(ds)
"""

from __future__ import annotations

import base64
import json
import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, Tape
from .data import DatasetTensor, DimensionCatalog, SeriesStats, normalize, series_stats
from .errors import (ConfigurationError, DegenerateInputError, NumericalDomainError,
                     TrainingDivergedError)
from .kernel import KRConfig, MemberEmbedding, all_candidates, kr_batch
from .optim import Adam
from .scenarios import BlockShapeDist, block_shapes, make_rng
from .transformer import (TTConfig, chunk_bounds, fine_grained_batch, glorot, init_params,
                          temporal_signals)

log = logging.getLogger(__name__)

LOSS_KINDS = ("mae", "mse")
CHECKPOINT_FORMAT = "deepmvi-checkpoint"
IMPUTE_BATCH = 512


@dataclass(frozen=True)
class TrainerConfig:
    lr: float = 1e-3
    batch_size: int = 256
    max_iters: int | None = None  # None: max_epochs passes over the training cells
    max_epochs: int = 50
    eval_interval: int = 100
    patience: int = 3
    val_fraction: float = 0.10
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.eval_interval < 1 or self.patience < 1:
            raise ConfigurationError("trainer values must be positive")
        if self.max_iters is not None and self.max_iters < 1:
            raise ConfigurationError("max_iters must be positive")
        if not 0 < self.val_fraction < 0.5:
            raise ConfigurationError("val_fraction must lie in (0, 0.5)")


@dataclass
class TrainInstance:
    """A training target and the synthetic block hidden around it.

    ``block`` is ``(s0, s1, t0, t1)``: half-open ranges over flat series and
    time; it always contains ``(series, t)``.
    """

    series: int
    t: int
    block: tuple

    def hides(self, s, t) -> bool:
        s0, s1, t0, t1 = self.block
        return s0 <= s < s1 and t0 <= t < t1


class DeepMviModel:
    def __init__(self, dims, tt: TTConfig | None = None, kr: KRConfig | None = None,
                 loss_kind: str = "mae", use_tt: bool = True, use_fg: bool = True,
                 use_kr: bool = True, seed: int = 0):
        if loss_kind not in LOSS_KINDS:
            raise ConfigurationError(f"loss_kind must be one of {LOSS_KINDS}")
        self.dims = list(dims)
        self.tt_cfg = tt or TTConfig()
        self.kr_cfg = kr or KRConfig()
        self.loss_kind = loss_kind
        self.use_tt, self.use_fg, self.use_kr = use_tt, use_fg, use_kr
        self.seed = seed
        self.stats: SeriesStats | None = None
        self.events: Counter = Counter()
        rng = make_rng(seed)
        self.params = {f"tt.{k}": v for k, v in init_params(self.tt_cfg, rng).items()}
        self.embeddings = MemberEmbedding(self.dims, self.kr_cfg, rng)
        self.params.update(self.embeddings.params)
        width = self.out_width
        self.params["out.w"] = Tensor(np.zeros(width), True)
        self.params["out.b"] = Tensor(np.zeros(1), True)
        self._candidates = None

    @property
    def out_width(self) -> int:
        return self.tt_cfg.p + 1 + 3 * len(self.dims)

    @property
    def tt_params(self) -> dict:
        return {k[3:]: v for k, v in self.params.items() if k.startswith("tt.")}

    @property
    def shape(self):
        return tuple(len(d) for d in self.dims)

    def refresh_candidates(self):
        self._candidates = all_candidates(self.shape, self.embeddings, self.kr_cfg)

    @property
    def candidates(self):
        if self._candidates is None:
            self.refresh_candidates()
        return self._candidates

    def snapshot(self) -> dict:
        return {k: v.data.copy() for k, v in self.params.items()}

    def restore(self, snap: dict):
        for k, v in snap.items():
            self.params[k].data = v.copy()
        self._candidates = None


# ---------------------------------------------------------------- forward


class _Context:
    """Zero-filled normalized values and availability of a dataset, padded by
    one chunk on both sides so every chunk can be sliced without bounds
    checks."""

    def __init__(self, model: DeepMviModel, values, avail):
        values = np.asarray(values, dtype=np.float64)
        avail = np.asarray(avail, dtype=bool)
        N = int(np.prod(values.shape[:-1]))
        self.T = values.shape[-1]
        self.avail = avail.reshape(N, self.T)
        self.x = np.where(self.avail, values.reshape(N, self.T), 0.0)
        _, C = chunk_bounds(np.zeros(1, dtype=int), self.T, model.tt_cfg)
        self.C = C
        self.pad = C
        self.xpad = np.pad(self.x, ((0, 0), (C, C)))
        self.apad = np.pad(self.avail, ((0, 0), (C, C)))
        self.member_idx = np.stack(np.unravel_index(np.arange(N), values.shape[:-1]), axis=1)
        self.N = N


def _forward(model: DeepMviModel, ctx: _Context, series, t, blocks, events=None):
    series = np.asarray(series, dtype=np.intp)
    t = np.asarray(t, dtype=np.intp)
    blocks = np.asarray(blocks, dtype=np.intp).reshape(-1, 4)
    B = series.size
    cfg = model.tt_cfg
    w, p = cfg.w, cfg.p
    start, C = chunk_bounds(t, ctx.T, cfg)
    cols = start[:, None] + np.arange(C)[None, :]
    xs = ctx.xpad[series[:, None], cols + ctx.pad]
    in_block = (cols >= blocks[:, 2:3]) & (cols < blocks[:, 3:4])
    av = ctx.apad[series[:, None], cols + ctx.pad] & ~in_block
    jt = (t - start) // w
    pos = t % w
    nw = C // w

    if model.use_tt:
        full = av.reshape(B, nw, w).all(axis=2)
        near = np.abs(np.arange(nw)[None, :] - jt[:, None]) <= 1
        h_tt, empty = temporal_signals(xs, av, jt, pos, full & ~near, cfg, model.tt_params)
    else:
        h_tt, empty = Tensor(np.zeros((B, p))), np.zeros(B, dtype=bool)
    if model.use_fg:
        fg, fg_empty = fine_grained_batch(xs, av, jt, w)
    else:
        fg, fg_empty = np.zeros(B), np.zeros(B, dtype=bool)
    n = len(model.dims)
    if model.use_kr:
        h_kr, kr_none = kr_batch(ctx.x, ctx.avail, series, t, blocks[:, :2], ctx.member_idx,
                                 model.candidates, model.embeddings, model.kr_cfg)
    else:
        h_kr, kr_none = Tensor(np.zeros((B, 3 * n))), np.ones((B, n), dtype=bool)

    H = ad.concat([h_tt, Tensor(fg[:, None]), h_kr], axis=1)
    mu = ad.matmul(H, ad.reshape(model.params["out.w"], (-1, 1)))
    mu = ad.add(ad.reshape(mu, (B,)), ad.broadcast_to(model.params["out.b"], (B,)))
    if events is not None:
        events["empty_attention"] += int(empty.sum()) if model.use_tt else 0
        events["empty_window"] += int(fg_empty.sum()) if model.use_fg else 0
        events["kr_unavailable"] += int(kr_none.all(axis=1).sum()) if model.use_kr else 0
    info = {"empty_attention": empty, "empty_window": fg_empty, "kr_unavailable": kr_none,
            "series_empty": ~av.any(axis=1), "signals": H.data}
    return mu, info


def forward(ds: DatasetTensor, avail_eff, k, t: int, model: DeepMviModel) -> float:
    """Predicted mean (normalized units) at member tuple ``k`` and time ``t``
    given an effective availability that already hides ``(k, t)``."""
    avail_eff = np.asarray(avail_eff, dtype=bool)
    k = tuple(int(v) for v in k)
    if avail_eff[k + (t,)]:
        raise ConfigurationError("the target cell must be unavailable in avail_eff")
    s = int(np.ravel_multi_index(k, ds.shape[:-1]))
    ctx = _Context(model, ds.values, avail_eff)
    mu, info = _forward(model, ctx, [s], [t], [(s, s + 1, t, t + 1)], model.events)
    if info["series_empty"][0] and info["kr_unavailable"][0].all():
        raise DegenerateInputError(f"no information available for series {k} at t={t}")
    return float(mu.data[0])


# ---------------------------------------------------------------- training data


@dataclass
class ValidationSet:
    series: np.ndarray
    t: np.ndarray
    blocks: np.ndarray
    cells: np.ndarray = field(repr=False)  # [N, T] bool mask of validation cells

    def __len__(self):
        return self.series.size


class TrainStream:
    """Draws batches of training targets with freshly carved blocks."""

    def __init__(self, avail_train: np.ndarray, dist: BlockShapeDist, seed: int):
        self.avail = avail_train
        self.N, self.T = avail_train.shape
        self.cells = np.flatnonzero(avail_train)
        if self.cells.size == 0:
            raise ConfigurationError("no available cells left for training")
        shapes = dist.shapes or [(1, 1)]
        if not dist.shapes:
            log.warning("no missing blocks to imitate; training with single-cell blocks")
        self.shapes = np.array([(min(h, self.N), min(L, self.T)) for h, L in shapes])
        self.rng = make_rng(seed)

    def next_batch(self, size: int):
        rng = self.rng
        flat = self.cells[rng.integers(0, self.cells.size, size)]
        s, t = np.divmod(flat, self.T)
        shp = self.shapes[rng.integers(0, len(self.shapes), size)]
        blocks = carve(s, t, shp, self.N, self.T, rng)
        return s, t, blocks

    def instances(self, size: int) -> list:
        s, t, b = self.next_batch(size)
        return [TrainInstance(int(a), int(c), tuple(int(v) for v in row))
                for a, c, row in zip(s, t, b)]


def carve(s, t, shapes, N: int, T: int, rng) -> np.ndarray:
    """Blocks of the given ``(h, L)`` shapes placed uniformly among the offsets
    that cover each ``(s, t)``, clipped to the tensor."""
    h, L = shapes[:, 0], shapes[:, 1]
    s0 = s - (rng.random(s.size) * h).astype(np.intp)
    t0 = t - (rng.random(t.size) * L).astype(np.intp)
    return np.stack([np.maximum(s0, 0), np.minimum(s0 + h, N),
                     np.maximum(t0, 0), np.minimum(t0 + L, T)], axis=1)


def make_training_set(ds: DatasetTensor, dist: BlockShapeDist, trainer: TrainerConfig):
    """Split off validation blocks and return ``(TrainStream, ValidationSet)``.

    Validation blocks are drawn from ``dist`` and placed on fully available,
    mutually disjoint regions until ``val_fraction`` of the available cells
    are covered.
    """
    avail = ds.flat_available()
    N, T = avail.shape
    rng = make_rng([trainer.seed, 1])
    goal = trainer.val_fraction * avail.sum()
    taken = np.zeros_like(avail)
    shapes = dist.shapes or [(1, 1)]
    blocks, used, attempts = [], 0, 0
    while used < goal and attempts < 20_000:
        attempts += 1
        h, L = shapes[int(rng.integers(len(shapes)))]
        h, L = min(h, N), min(L, T)
        s0 = int(rng.integers(0, N - h + 1))
        t0 = int(rng.integers(0, T - L + 1))
        region = (slice(s0, s0 + h), slice(t0, t0 + L))
        if not avail[region].all() or taken[region].any():
            continue
        taken[region] = True
        blocks.append((s0, s0 + h, t0, t0 + L))
        used += h * L
    if not blocks:
        raise ConfigurationError("dataset too small to hold any validation block")
    vs, vt, vb = [], [], []
    for b in blocks:
        for s in range(b[0], b[1]):
            for t in range(b[2], b[3]):
                vs.append(s)
                vt.append(t)
                vb.append(b)
    val = ValidationSet(np.array(vs), np.array(vt), np.array(vb), taken)
    stream = TrainStream(avail & ~taken, dist, trainer.seed)
    return stream, val


# ---------------------------------------------------------------- training


class EarlyStopping:
    """Tracks validation losses; stops after ``patience`` evaluations in a row
    without a strict improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_index = None
        self.bad = 0
        self.history: list = []

    def update(self, loss: float) -> bool:
        self.history.append(loss)
        if loss < self.best:
            self.best, self.best_index, self.bad = loss, len(self.history), 0
            return True
        self.bad += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad >= self.patience


def _loss(model, mu: Tensor, y: np.ndarray, scale: np.ndarray) -> Tensor:
    diff = ad.mul(ad.sub(mu, Tensor(y)), Tensor(scale))
    err = ad.absolute(diff) if model.loss_kind == "mae" else ad.square(diff)
    return ad.mean(err)


def _evaluate(model, ctx, val: ValidationSet, truth, scale_by_series) -> float:
    total = 0.0
    for lo in range(0, len(val), IMPUTE_BATCH):
        sl = slice(lo, lo + IMPUTE_BATCH)
        mu, _ = _forward(model, ctx, val.series[sl], val.t[sl], val.blocks[sl])
        y = truth[val.series[sl], val.t[sl]]
        d = (mu.data - y) * scale_by_series[val.series[sl]]
        total += (np.abs(d) if model.loss_kind == "mae" else d * d).sum()
    return total / len(val)


@dataclass
class TrainingLog:
    records: list = field(default_factory=list)
    best_val: float = math.inf
    best_iter: int | None = None
    iterations: int = 0
    stopped_early: bool = False

    @property
    def val_losses(self):
        return [r["val_loss"] for r in self.records]

    @property
    def train_losses(self):
        return [r["train_loss"] for r in self.records]


def train(ds: DatasetTensor, M=None, trainer: TrainerConfig | None = None,
          model: DeepMviModel | None = None, stats: SeriesStats | None = None, **model_kw):
    """Fit a model on the normalized dataset ``ds``.

    ``M`` (defaults to ``ds.missing``) supplies the block shapes to imitate.
    Losses are reported in original units when ``stats`` is given.  Returns
    the model restored to its best validation snapshot and a
    :class:`TrainingLog`.
    """
    trainer = trainer or TrainerConfig()
    M = ds.missing if M is None else np.asarray(M, dtype=bool)
    model = model or DeepMviModel(ds.dims, seed=trainer.seed, **model_kw)
    if stats is not None:
        model.stats = stats
    scale = stats.std if stats is not None else np.ones(ds.n_series)
    dist = block_shapes(M)
    stream, val = make_training_set(ds, dist, trainer)
    train_ctx = _Context(model, ds.values, stream.avail)
    truth = ds.flat_values()
    epoch = max(1, math.ceil(stream.cells.size / trainer.batch_size))
    max_iters = trainer.max_iters or trainer.max_epochs * epoch
    params = list(model.params.values())
    opt = Adam(params, lr=trainer.lr)
    stopper = EarlyStopping(trainer.patience)
    history = TrainingLog()
    best = model.snapshot()
    running, count = 0.0, 0
    it = 0
    for it in range(1, max_iters + 1):
        if (it - 1) % epoch == 0:
            model.refresh_candidates()
        s, t, blocks = stream.next_batch(trainer.batch_size)
        y = train_ctx.x[s, t]
        try:
            with Tape() as tape:
                mu, _ = _forward(model, train_ctx, s, t, blocks, model.events)
                loss = _loss(model, mu, y, scale[s])
        except NumericalDomainError as exc:
            raise TrainingDivergedError(f"non-finite loss at iteration {it}: {exc}",
                                        batch={"series": s, "t": t, "blocks": blocks}) from exc
        tape.backward(loss)
        opt.step()
        opt.zero_grad()
        tape.clear()
        running += float(loss.data)
        count += 1
        if it % trainer.eval_interval == 0 or it == max_iters:
            val_loss = _evaluate(model, train_ctx, val, truth, scale)
            history.records.append({"iter": it, "train_loss": running / count,
                                    "val_loss": val_loss})
            running, count = 0.0, 0
            if stopper.update(val_loss):
                best = model.snapshot()
                history.best_val, history.best_iter = val_loss, it
            log.debug("iter %d train %.4f val %.4f", it, history.records[-1]["train_loss"],
                      val_loss)
            if stopper.should_stop:
                history.stopped_early = True
                break
    history.iterations = it
    model.restore(best)
    return model, history


# ---------------------------------------------------------------- imputation


def impute(ds: DatasetTensor, M=None, model: DeepMviModel | None = None,
           stats: SeriesStats | None = None) -> np.ndarray:
    """Fill every cell of ``M`` (default ``ds.missing``) in original units.

    Cells outside ``M`` keep their values.  When neither the target series
    nor any sibling has an available cell, the global mean is used and the
    event is counted in ``model.events["degenerate"]``.
    """
    if model is None:
        raise ConfigurationError("impute needs a trained model")
    M = ds.missing if M is None else np.asarray(M, dtype=bool).reshape(ds.shape)
    avail = ds.available & ~M
    stats = stats or model.stats or series_stats(DatasetTensor(ds.dims, ds.values, avail))
    values = np.where(avail, ds.values, np.nan)
    norm = stats.normalize(values)
    ctx = _Context(model, norm, avail)
    out = np.where(avail, ds.values, np.nan).reshape(ctx.N, ctx.T)
    targets = np.argwhere(M.reshape(ctx.N, ctx.T))
    if targets.size == 0:
        return ds.values.copy()
    gmean = float(np.mean(ds.values[avail])) if avail.any() else 0.0
    for lo in range(0, len(targets), IMPUTE_BATCH):
        s, t = targets[lo:lo + IMPUTE_BATCH].T
        blocks = np.stack([s, s + 1, t, t + 1], axis=1)
        mu, info = _forward(model, ctx, s, t, blocks, model.events)
        pred = mu.data * stats.std[s] + stats.mean[s]
        degenerate = info["series_empty"] & info["kr_unavailable"].all(axis=1)
        if degenerate.any():
            model.events["degenerate"] += int(degenerate.sum())
            pred = np.where(degenerate, gmean, pred)
        out[s, t] = pred
    return out.reshape(ds.shape)


def fit_impute(ds: DatasetTensor, trainer: TrainerConfig | None = None,
               standardize: bool = True, **model_kw):
    """Normalize, train on the dataset's own missing pattern, and impute it.

    Returns ``(completed_values, model, training_log)``.
    """
    if standardize:
        norm, stats = normalize(ds)
    else:
        norm = ds
        stats = SeriesStats(np.zeros(ds.n_series), np.ones(ds.n_series))
    model, history = train(norm, ds.missing, trainer, stats=stats, **model_kw)
    return impute(ds, ds.missing, model, stats), model, history


# ---------------------------------------------------------------- checkpoints


def _pack(arr: np.ndarray) -> dict:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    return {"shape": list(arr.shape), "data": base64.b64encode(arr.tobytes()).decode("ascii")}


def _unpack(obj: dict) -> np.ndarray:
    raw = base64.b64decode(obj["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(obj["shape"]).astype(np.float64)


def _member_json(m):
    return list(m) if isinstance(m, tuple) else m


def save_checkpoint(model: DeepMviModel, path) -> None:
    """Write every parameter, the configs and the normalization statistics as
    one JSON document; float64 payloads are base64 so loading is bit-exact."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "tt_config": asdict(model.tt_cfg),
        "kr_config": asdict(model.kr_cfg),
        "model": {"loss_kind": model.loss_kind, "use_tt": model.use_tt,
                  "use_fg": model.use_fg, "use_kr": model.use_kr, "seed": model.seed},
        "dims": [{"name": d.name, "members": [_member_json(m) for m in d.members]}
                 for d in model.dims],
        "params": {k: _pack(v.data) for k, v in model.params.items()},
        "stats": None if model.stats is None else
        {"mean": _pack(model.stats.mean), "std": _pack(model.stats.std)},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)


def load_checkpoint(path) -> DeepMviModel:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ConfigurationError(f"{path} is not a DeepMVI checkpoint")
    dims = [DimensionCatalog(d["name"], tuple(tuple(m) if isinstance(m, list) else m
                                              for m in d["members"]))
            for d in doc["dims"]]
    m = doc["model"]
    model = DeepMviModel(dims, TTConfig(**doc["tt_config"]), KRConfig(**doc["kr_config"]),
                         loss_kind=m["loss_kind"], use_tt=m["use_tt"], use_fg=m["use_fg"],
                         use_kr=m["use_kr"], seed=m["seed"])
    for k, v in doc["params"].items():
        model.params[k].data = _unpack(v)
    if doc["stats"] is not None:
        model.stats = SeriesStats(_unpack(doc["stats"]["mean"]), _unpack(doc["stats"]["std"]))
    return model

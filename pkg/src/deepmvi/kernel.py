"""Kernel regression over sibling series.

For a target series ``k`` and dimension ``i`` the siblings are the series
that differ from ``k`` only in dimension ``i``.  Their values at time ``t``
are combined with RBF weights over learned member embeddings into three
statistics: the weighted mean ``U``, the total weight ``W`` and the variance
``V`` of the available sibling values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError

REAL_HIDDEN = 16


@dataclass(frozen=True)
class KRConfig:
    gamma: float = 1.0
    top_l: int = 32
    d_emb: int = 10
    init_std: float = 0.1

    def __post_init__(self):
        if self.gamma <= 0 or self.top_l < 1 or self.d_emb < 1:
            raise ConfigurationError("need gamma > 0, top_l >= 1, d_emb >= 1")


def siblings(k, i: int, dims) -> list:
    """All member tuples equal to ``k`` except in dimension ``i``."""
    k = tuple(k)
    out = []
    for m in range(len(dims[i])):
        if m != k[i]:
            out.append(k[:i] + (m,) + k[i + 1:])
    return out


def rbf(a, b, gamma: float) -> float:
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return float(np.exp(-gamma * np.dot(d, d)))


class MemberEmbedding:
    """Per-dimension embedding tables.

    Categorical dimensions get a free ``[|K_i|, d]`` table.  Real-valued
    dimensions map each raw member vector through a one-hidden-layer ReLU
    network, one network per dimension.
    """

    def __init__(self, dims, cfg: KRConfig, rng):
        self.raw = []
        self.params = {}
        for i, dim in enumerate(dims):
            if dim.is_real:
                raw = dim.raw_vectors()
                r = raw.shape[1]
                self.raw.append(raw)
                self.params[f"emb.{i}.W1"] = Tensor(rng.normal(0, 1 / np.sqrt(r), (r, REAL_HIDDEN)), True)
                self.params[f"emb.{i}.b1"] = Tensor(np.zeros(REAL_HIDDEN), True)
                self.params[f"emb.{i}.W2"] = Tensor(
                    rng.normal(0, cfg.init_std, (REAL_HIDDEN, cfg.d_emb)), True)
                self.params[f"emb.{i}.b2"] = Tensor(np.zeros(cfg.d_emb), True)
            else:
                self.raw.append(None)
                self.params[f"emb.{i}"] = Tensor(
                    rng.normal(0.0, cfg.init_std, (len(dim), cfg.d_emb)), True)

    @property
    def n_dims(self) -> int:
        return len(self.raw)

    def table(self, i: int) -> Tensor:
        if self.raw[i] is None:
            return self.params[f"emb.{i}"]
        P = self.params
        raw = Tensor(self.raw[i])
        h = ad.matmul(raw, P[f"emb.{i}.W1"])
        h = ad.relu(ad.add(h, ad.broadcast_to(P[f"emb.{i}.b1"], h.shape)))
        e = ad.matmul(h, P[f"emb.{i}.W2"])
        return ad.add(e, ad.broadcast_to(P[f"emb.{i}.b2"], e.shape))

    def vectors(self, i: int) -> np.ndarray:
        return self.table(i).data


def candidate_table(shape, i: int, emb: np.ndarray, top_l: int) -> np.ndarray:
    """``[n_series, L]`` flat indices of the kept siblings along dimension ``i``
    (``-1`` pads).  When a dimension has more than ``top_l`` other members the
    most similar ones are kept; ties go to the lower member index."""
    shape = tuple(shape)
    n_series = int(np.prod(shape))
    size = shape[i]
    grid = np.stack(np.unravel_index(np.arange(n_series), shape), axis=1)
    L = min(size - 1, top_l)
    if L <= 0:
        return np.full((n_series, 0), -1, dtype=np.intp)
    d2 = ((emb[:, None, :] - emb[None, :, :]) ** 2).sum(axis=2)
    np.fill_diagonal(d2, np.inf)
    order = np.argsort(d2, axis=1, kind="stable")[:, :L]                     # [size, L]
    strides = np.array([int(np.prod(shape[j + 1:])) for j in range(len(shape))])
    own = grid[:, i]
    base = np.arange(n_series) - own * strides[i]
    return base[:, None] + order[own] * strides[i]


def kr_stats(values, avail, k, t: int, i: int, embeddings: MemberEmbedding, cfg: KRConfig):
    """Reference ``(U, W, V, unavailable)`` for one target.

    ``values``/``avail`` have the dataset's full ``(|K_1|, ..., |K_n|, T)``
    shape.  ``U`` and ``W`` are tensors so gradients reach the embeddings.
    """
    values = np.asarray(values, dtype=np.float64)
    avail = np.asarray(avail, dtype=bool)
    shape = values.shape[:-1]
    k = tuple(int(v) for v in k)
    emb = embeddings.table(i)
    sib = [k[:i] + (m,) + k[i + 1:] for m in range(shape[i]) if m != k[i]]
    if len(sib) > cfg.top_l:
        flat = candidate_table(shape, i, emb.data, cfg.top_l)
        own = int(np.ravel_multi_index(k, shape))
        sib = [tuple(int(v) for v in np.unravel_index(c, shape)) for c in flat[own]]
    if not sib:
        return Tensor(0.0), Tensor(0.0), 0.0, True
    members = [s[i] for s in sib]
    a = np.array([avail[s + (t,)] for s in sib], dtype=np.float64)
    x = np.array([values[s + (t,)] if avail[s + (t,)] else 0.0 for s in sib])
    diff = ad.sub(ad.take(emb, members), ad.broadcast_to(ad.take(emb, [k[i]]), (len(sib), emb.shape[1])))
    kern = ad.exp(ad.scale(ad.sum(ad.square(diff), axis=1), -cfg.gamma))
    ka = ad.mul(kern, Tensor(a))
    W = ad.sum(ka)
    if a.sum() == 0:
        return Tensor(0.0), W, 0.0, True
    U = ad.div(ad.sum(ad.mul(ka, Tensor(x))), W)
    return U, W, float(np.var(x[a > 0])), False


def h_kr(values, avail, k, t: int, embeddings: MemberEmbedding, cfg: KRConfig) -> Tensor:
    """Concatenation ``(U_1, V_1, W_1, ..., U_n, V_n, W_n)``."""
    parts = []
    for i in range(embeddings.n_dims):
        U, W, V, _ = kr_stats(values, avail, k, t, i, embeddings, cfg)
        parts += [ad.reshape(U, (1,)), Tensor([V]), ad.reshape(W, (1,))]
    return ad.concat(parts)


def all_candidates(shape, embeddings: MemberEmbedding, cfg: KRConfig) -> list:
    return [candidate_table(shape, i, embeddings.vectors(i), cfg.top_l)
            for i in range(embeddings.n_dims)]


def kr_batch(x, avail, series, t, block_rows, member_idx, candidates,
             embeddings: MemberEmbedding, cfg: KRConfig):
    """Batched ``h^kr`` of shape ``[B, 3n]``.

    ``x``/``avail`` are flat ``[n_series, T]``; ``block_rows`` is ``[B, 2]``
    giving the half-open flat-series range hidden by each instance's synthetic
    block at its target time.  Returns the tensor and a ``[B, n]`` flag array
    marking dimensions with no available sibling.
    """
    B = len(series)
    parts, flags = [], []
    for i, cand in enumerate(candidates):
        C = cand[series]                                                     # [B, L]
        L = C.shape[1]
        if L == 0:
            parts.append(Tensor(np.zeros((B, 3))))
            flags.append(np.ones(B, dtype=bool))
            continue
        valid = C >= 0
        Cs = np.where(valid, C, 0)
        tt = np.broadcast_to(np.asarray(t)[:, None], C.shape)
        hidden = (Cs >= block_rows[:, :1]) & (Cs < block_rows[:, 1:])
        a = valid & avail[Cs, tt] & ~hidden
        xv = np.where(a, x[Cs, tt], 0.0)
        emb = embeddings.table(i)
        d = emb.shape[1]
        own = ad.take(emb, member_idx[series, i])                            # [B, d]
        other = ad.reshape(ad.take(emb, member_idx[Cs, i].reshape(-1)), (B, L, d))
        diff = ad.sub(other, ad.broadcast_to(ad.reshape(own, (B, 1, d)), (B, L, d)))
        kern = ad.exp(ad.scale(ad.sum(ad.square(diff), axis=2), -cfg.gamma))
        ka = ad.mul(kern, Tensor(a.astype(np.float64)))
        W = ad.sum(ka, axis=1)
        none = ~a.any(axis=1)
        U = ad.div(ad.sum(ad.mul(ka, Tensor(xv)), axis=1), ad.add(W, Tensor(none.astype(float))))
        cnt = np.maximum(a.sum(axis=1), 1)
        mu = xv.sum(axis=1) / cnt
        V = np.where(a, (xv - mu[:, None]) ** 2, 0.0).sum(axis=1) / cnt
        parts += [ad.reshape(U, (B, 1)), Tensor(V[:, None]), ad.reshape(W, (B, 1))]
        flags.append(none)
    return ad.concat(parts, axis=1), np.stack(flags, axis=1)


"""Temporal transformer and the fine-grained local signal.

Two code paths compute the same quantities:

* per-instance functions (:func:`window_features`, :func:`qkv`, :func:`attend`,
  :func:`decode`, :func:`fine_grained`) compute the model one window at a
  time and serve as the readable reference;
* :func:`temporal_signals` evaluates a whole batch at once.  It never
  materializes per-window keys or values: scores use
  ``<Q, ctx W_k + b_k> = <Q W_k^T, ctx> + <Q, b_k>`` and, because attention
  weights sum to one, the weighted value is ``(sum_j a_j Y_j) W_v + b_v``.

Weight layout is row-vector: ``Q = ctx @ W_q``, ``Y = x @ W_f.T``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, DimensionError, EmptyAttentionError

ATTN_MODES = ("softmax", "paper-literal")
LITERAL_EPS = 1e-8


@dataclass(frozen=True)
class TTConfig:
    w: int = 10
    p: int = 32
    n_head: int = 4
    d_hidden: int = 64
    chunk_len: int | None = None  # defaults to 50 * w
    attn_mode: str = "softmax"

    def __post_init__(self):
        if self.chunk_len is None:
            object.__setattr__(self, "chunk_len", 50 * self.w)
        if self.w < 2 or self.p < 1 or self.n_head < 1 or self.d_hidden < 1:
            raise ConfigurationError("need w >= 2 and positive p, n_head, d_hidden")
        if self.chunk_len % self.w:
            raise ConfigurationError("chunk_len must be a multiple of w")
        if self.attn_mode not in ATTN_MODES:
            raise ConfigurationError(f"attn_mode must be one of {ATTN_MODES}")


def glorot(rng, fan_in, fan_out, shape):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def init_params(cfg: TTConfig, rng) -> dict:
    p, w, H, dh = cfg.p, cfg.w, cfg.n_head, cfg.d_hidden
    shapes = {
        "W_f": glorot(rng, w, p, (p, w)),
        "b_f": np.zeros(p),
        "W_q": glorot(rng, 2 * p, 2 * p, (H, 2 * p, 2 * p)),
        "b_q": np.zeros((H, 2 * p)),
        "W_k": glorot(rng, 2 * p, 2 * p, (H, 2 * p, 2 * p)),
        "b_k": np.zeros((H, 2 * p)),
        "W_v": glorot(rng, p, p, (H, p, p)),
        "b_v": np.zeros((H, p)),
        "W_d1": glorot(rng, H * p, dh, (H * p, dh)),
        "W_d2": glorot(rng, dh, p, (dh, p)),
        "W_d": glorot(rng, p, p, (w, p, p)),
        "b_d": np.zeros((w, p)),
    }
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in shapes.items()}


def positional_encoding(j: int, dim: int) -> np.ndarray:
    r = np.arange(dim)
    even = r - (r % 2)
    angle = j / np.power(10000.0, even / dim)
    return np.where(r % 2 == 0, np.sin(angle), np.cos(angle))


_PE_CACHE: dict = {}


def positional_table(n: int, dim: int) -> np.ndarray:
    key = (n, dim)
    if key not in _PE_CACHE:
        _PE_CACHE[key] = np.stack([positional_encoding(j, dim) for j in range(n)])
    return _PE_CACHE[key]


# ---------------------------------------------------------------- reference path


def window_features(values, avail, cfg: TTConfig, params) -> Tensor:
    """``Y_j = W_f x[jw:(j+1)w] + b_f`` for every window; returns ``[len/w, p]``."""
    values = np.asarray(values, dtype=np.float64)
    avail = np.asarray(avail, dtype=bool)
    if values.shape[-1] % cfg.w:
        raise DimensionError(f"length {values.shape[-1]} is not a multiple of w={cfg.w}")
    x = np.where(avail, values, 0.0).reshape(-1, cfg.w)
    Y = ad.matmul(Tensor(x), ad.transpose(params["W_f"]))
    return ad.add(Y, ad.broadcast_to(params["b_f"], Y.shape))


def _context_row(Y: Tensor, j: int) -> Tensor:
    nw, p = Y.shape
    zero = Tensor(np.zeros(p))
    left = ad.getitem(Y, j - 1) if j > 0 else zero
    right = ad.getitem(Y, j + 1) if j + 1 < nw else zero
    ctx = ad.concat([left, right])
    return ad.add(ctx, Tensor(positional_encoding(j, 2 * p)))


def qkv(Y: Tensor, avail, j: int, cfg: TTConfig, params, head: int):
    """Query, key and value of window ``j`` for one head.

    The key is multiplied by the product of availabilities in window ``j`` so
    any window holding a missing cell has an all-zero key.
    """
    avail = np.asarray(avail, dtype=bool)
    ctx = ad.reshape(_context_row(Y, j), (1, -1))
    q = ad.add(ad.matmul(ctx, params["W_q"][head]), ad.reshape(params["b_q"][head], (1, -1)))
    k = ad.add(ad.matmul(ctx, params["W_k"][head]), ad.reshape(params["b_k"][head], (1, -1)))
    whole = float(np.all(avail[j * cfg.w:(j + 1) * cfg.w]))
    k = ad.scale(k, whole)
    yj = ad.reshape(ad.getitem(Y, j), (1, -1))
    v = ad.add(ad.matmul(yj, params["W_v"][head]), ad.reshape(params["b_v"][head], (1, -1)))
    return ad.reshape(q, (-1,)), ad.reshape(k, (-1,)), ad.reshape(v, (-1,))


def attend(Q: Tensor, K: Tensor, V: Tensor, key_mask, mode: str = "softmax") -> Tensor:
    """Attention-weighted sum of the rows of ``V`` for a single query."""
    mask = np.asarray(key_mask, dtype=bool)
    if not mask.any():
        raise EmptyAttentionError("no unmasked window to attend to")
    dots = ad.reshape(ad.matmul(K, ad.reshape(Q, (-1, 1))), (-1,))
    if mode == "softmax":
        weights = ad.softmax_masked(ad.scale(dots, 1.0 / math.sqrt(Q.shape[0])), mask)
    elif mode == "paper-literal":
        weights = _literal_weights(dots, mask)
    else:
        raise ConfigurationError(f"unknown attention mode {mode!r}")
    return ad.reshape(ad.matmul(ad.reshape(weights, (1, -1)), V), (-1,))


def _literal_weights(dots: Tensor, mask: np.ndarray) -> Tensor:
    """Raw inner products normalized by their sum over unmasked entries,
    falling back to uniform weights when the sum is within 1e-8 of zero."""
    mask = mask.astype(np.float64)
    masked = ad.mul(dots, Tensor(mask))
    den = ad.sum(masked, axis=-1, keepdims=True)
    bad = (np.abs(den.data) < LITERAL_EPS).astype(np.float64)
    uniform = mask / mask.sum(axis=-1, keepdims=True)
    safe = ad.add(den, Tensor(bad))
    ratio = ad.div(masked, ad.broadcast_to(safe, masked.shape))
    keep = np.broadcast_to(1.0 - bad, mask.shape)
    return ad.add(ad.mul(ratio, Tensor(keep)), Tensor(uniform * (1.0 - keep)))


def decode(h: Tensor, cfg: TTConfig, params, t: int) -> Tensor:
    """Feed-forward decode of the concatenated heads and selection of row
    ``t % w`` from the per-position outputs."""
    hff = _decode_mlp(ad.reshape(h, (1, -1)), params)
    rows = _deconv(hff, cfg, params)
    return ad.reshape(ad.getitem(rows, (0, t % cfg.w)), (-1,))


def _decode_mlp(h: Tensor, params) -> Tensor:
    z = ad.relu(ad.matmul(ad.relu(h), params["W_d1"]))
    return ad.relu(ad.matmul(z, params["W_d2"]))


def _deconv(hff: Tensor, cfg: TTConfig, params) -> Tensor:
    B, p, w = hff.shape[0], cfg.p, cfg.w
    # W_d[r] maps p -> p for output row r; flatten to one [p, w*p] matrix
    Wd = ad.reshape(ad.transpose(params["W_d"], (2, 0, 1)), (p, w * p))
    out = ad.matmul(hff, Wd)
    out = ad.add(out, ad.broadcast_to(ad.reshape(params["b_d"], (1, w * p)), out.shape))
    return ad.reshape(ad.relu(out), (B, w, p))


def fine_grained(values, avail, t: int, w: int, exclusion=()):
    """Mean of the available, non-excluded values in the window holding ``t``.

    Returns ``(value, empty)``; ``empty`` is True (and value 0) when no such
    value exists.
    """
    values = np.asarray(values, dtype=np.float64)
    ok = np.asarray(avail, dtype=bool).copy()
    for e in set(exclusion) | {t}:
        if 0 <= e < ok.size:
            ok[e] = False
    start = (t // w) * w
    sl = slice(start, min(start + w, values.size))
    sel = ok[sl]
    if not sel.any():
        return 0.0, True
    return float(values[sl][sel].mean()), False


def reference_signal(values, avail, t: int, cfg: TTConfig, params, key_mask=None) -> Tensor:
    """``h^tt`` for position ``t`` of one chunk through the per-instance path.

    ``key_mask`` defaults to: window fully available and not within one
    window of ``t``'s window.
    """
    values = np.asarray(values, dtype=np.float64)
    avail = np.asarray(avail, dtype=bool)
    Y = window_features(values, avail, cfg, params)
    nw = Y.shape[0]
    j = t // cfg.w
    if key_mask is None:
        key_mask = default_key_mask(avail, j, cfg.w)
    heads = []
    for head in range(cfg.n_head):
        triples = [qkv(Y, avail, jj, cfg, params, head) for jj in range(nw)]
        Q = triples[j][0]
        K = ad.concat([ad.reshape(k, (1, -1)) for _, k, _ in triples])
        V = ad.concat([ad.reshape(v, (1, -1)) for _, _, v in triples])
        heads.append(attend(Q, K, V, key_mask, cfg.attn_mode))
    return decode(ad.concat(heads), cfg, params, t)


def default_key_mask(avail, j: int, w: int) -> np.ndarray:
    avail = np.asarray(avail, dtype=bool)
    full = avail.reshape(-1, w).all(axis=1)
    nw = full.size
    near = np.abs(np.arange(nw) - j) <= 1
    return full & ~near


# ---------------------------------------------------------------- batched path


def temporal_signals(x, avail, jt, pos, key_mask, cfg: TTConfig, params):
    """Batched ``h^tt``.

    ``x`` and ``avail`` are ``[B, L]`` chunk values and availability (``L`` a
    multiple of ``w``), ``jt``/``pos`` the target's window and offset inside
    it, ``key_mask`` a ``[B, L/w]`` candidate mask.  Rows whose mask is empty
    get a zero attention context and a zero ``h^tt``; the second return value
    flags them.
    """
    x = np.where(np.asarray(avail, dtype=bool), x, 0.0)
    B, L = x.shape
    w, p, H = cfg.w, cfg.p, cfg.n_head
    nw = L // w
    key_mask = np.asarray(key_mask, dtype=bool)
    empty = ~key_mask.any(axis=1)
    if empty.any():
        key_mask = key_mask.copy()
        key_mask[empty] = True

    Y = ad.matmul(Tensor(x.reshape(B * nw, w)), ad.transpose(params["W_f"]))
    Y = ad.add(Y, ad.broadcast_to(params["b_f"], Y.shape))
    Y = ad.reshape(Y, (B, nw, p))

    # query context [Y_{j-1}, Y_{j+1}] + e_j of each target window only
    flat = ad.reshape(Y, (B * nw, p))
    jt = np.asarray(jt)
    base = np.arange(B) * nw
    has_l = (jt > 0).astype(np.float64)[:, None]
    has_r = (jt + 1 < nw).astype(np.float64)[:, None]
    left = ad.mul(ad.take(flat, base + np.maximum(jt - 1, 0)), Tensor(np.broadcast_to(has_l, (B, p))))
    right = ad.mul(ad.take(flat, base + np.minimum(jt + 1, nw - 1)),
                   Tensor(np.broadcast_to(has_r, (B, p))))
    pe = positional_table(nw, 2 * p)
    ctx_t = ad.add(ad.concat([left, right], axis=1), Tensor(pe[jt]))          # [B, 2p]
    Wq = ad.reshape(ad.transpose(params["W_q"], (1, 0, 2)), (2 * p, H * 2 * p))
    Q = ad.add(ad.matmul(ctx_t, Wq),
               ad.broadcast_to(ad.reshape(params["b_q"], (1, H * 2 * p)), (B, H * 2 * p)))
    Q = ad.reshape(Q, (B, H, 2 * p))

    # <Q, ctx_j' W_k + b_k> split into the left, right and positional parts of
    # ctx_j' so the [B, nw, 2p] key context is never built
    Qh = ad.transpose(Q, (1, 0, 2))                                           # [H, B, 2p]
    qk = ad.transpose(ad.bmm(Qh, ad.transpose(params["W_k"], (0, 2, 1))), (1, 0, 2))
    Yt = ad.transpose(Y, (0, 2, 1))                                           # [B, p, nw]
    s_left = ad.bmm(ad.getitem(qk, (slice(None), slice(None), slice(0, p))), Yt)
    s_right = ad.bmm(ad.getitem(qk, (slice(None), slice(None), slice(p, 2 * p))), Yt)
    pad = Tensor(np.zeros((B, H, 1)))
    dots = ad.add(ad.concat([pad, ad.getitem(s_left, (slice(None), slice(None), slice(0, nw - 1)))],
                            axis=2),
                  ad.concat([ad.getitem(s_right, (slice(None), slice(None), slice(1, nw))), pad],
                            axis=2))
    s_pos = ad.matmul(ad.reshape(qk, (B * H, 2 * p)), Tensor(pe.T.copy()))
    dots = ad.add(dots, ad.reshape(s_pos, (B, H, nw)))
    qb = ad.sum(ad.mul(Q, ad.broadcast_to(params["b_k"], (B, H, 2 * p))), axis=2,
                keepdims=True)
    dots = ad.add(dots, ad.broadcast_to(qb, dots.shape))
    mask3 = np.broadcast_to(key_mask[:, None, :], dots.shape)
    if cfg.attn_mode == "softmax":
        weights = ad.softmax_masked(ad.scale(dots, 1.0 / math.sqrt(2 * p)), mask3)
    else:
        weights = _literal_weights(dots, mask3)

    pooled = ad.bmm(weights, Y)                                               # [B, H, p]
    out = ad.bmm(ad.transpose(pooled, (1, 0, 2)), params["W_v"])             # [H, B, p]
    out = ad.add(out, ad.broadcast_to(ad.reshape(params["b_v"], (H, 1, p)), out.shape))
    h = ad.reshape(ad.transpose(out, (1, 0, 2)), (B, H * p))
    if empty.any():
        h = ad.mul(h, Tensor(np.broadcast_to((~empty)[:, None], h.shape).astype(float)))

    hff = _decode_mlp(h, params)
    all_rows = _deconv(hff, cfg, params)                                      # [B, w, p]
    sel = np.arange(B) * w + np.asarray(pos)
    h_tt = ad.take(ad.reshape(all_rows, (B * w, p)), sel)
    if empty.any():
        h_tt = ad.mul(h_tt, Tensor(np.broadcast_to((~empty)[:, None], h_tt.shape).astype(float)))
    return h_tt, empty


def chunk_bounds(t, horizon: int, cfg: TTConfig):
    """Start index of the chunk around each target and its length.

    Chunks follow the global window grid with the target's window in the
    middle; near the series ends the start is negative or the chunk runs past
    the end, and those cells count as padding.  A series shorter than the
    chunk is used whole, starting at 0.
    """
    t = np.asarray(t)
    w = cfg.w
    total_windows = -(-horizon // w)
    nwc = cfg.chunk_len // w
    if total_windows <= nwc:
        return np.zeros_like(t), total_windows * w
    return (t // w - nwc // 2) * w, nwc * w


def fine_grained_batch(x, avail, jt, w: int):
    """Vectorized :func:`fine_grained` over chunk rows; ``avail`` already
    excludes the target and any synthetic block."""
    B = x.shape[0]
    cols = jt[:, None] * w + np.arange(w)[None, :]
    vals = x[np.arange(B)[:, None], cols]
    ok = avail[np.arange(B)[:, None], cols]
    cnt = ok.sum(axis=1)
    total = np.where(ok, vals, 0.0).sum(axis=1)
    return np.where(cnt > 0, total / np.maximum(cnt, 1), 0.0), cnt == 0

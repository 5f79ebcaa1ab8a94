"""Reference imputers: per-series mean, linear interpolation and iterative
rank-k SVD completion.

All baselines work on the flattened ``[n_series, T]`` view and return a
completed array of the dataset's shape.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .data import DatasetTensor
from .errors import ConfigurationError


@dataclass(frozen=True)
class BaselineSpec:
    name: str
    params: dict = field(default_factory=dict)


def _flat(ds: DatasetTensor, M):
    M = ds.missing if M is None else np.asarray(M, dtype=bool).reshape(ds.shape)
    avail = (ds.available & ~M).reshape(ds.n_series, ds.horizon)
    x = np.where(avail, ds.values.reshape(ds.n_series, ds.horizon), np.nan)
    return x, avail, M.reshape(avail.shape)


def _global_mean(x, avail) -> float:
    return float(x[avail].mean()) if avail.any() else 0.0


def impute_mean(ds: DatasetTensor, M=None) -> np.ndarray:
    """Each missing cell gets its series' mean; empty series get the global mean."""
    x, avail, miss = _flat(ds, M)
    g = _global_mean(x, avail)
    out = x.copy()
    for i in range(x.shape[0]):
        fill = x[i, avail[i]].mean() if avail[i].any() else g
        out[i, miss[i]] = fill
    return out.reshape(ds.shape)


def impute_linear(ds: DatasetTensor, M=None) -> np.ndarray:
    """Straight lines between the nearest available neighbours in time;
    constant extension past the first and last observation."""
    x, avail, miss = _flat(ds, M)
    g = _global_mean(x, avail)
    out = x.copy()
    t = np.arange(x.shape[1])
    for i in range(x.shape[0]):
        if not miss[i].any():
            continue
        if avail[i].any():
            out[i, miss[i]] = np.interp(t[miss[i]], t[avail[i]], x[i, avail[i]])
        else:
            out[i, miss[i]] = g
    return out.reshape(ds.shape)


def jacobi_svd(A, tol: float = 1e-15, max_sweeps: int = 60):
    """Thin SVD ``A = U diag(s) Vt`` by one-sided Jacobi rotations.

    Orthogonalizes the columns of the narrower orientation; singular values
    come back in descending order.
    """
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2:
        raise ConfigurationError("jacobi_svd needs a 2-D matrix")
    m, n = A.shape
    if n > m:
        U, s, Vt = jacobi_svd(A.T, tol, max_sweeps)
        return Vt.T, s, U.T
    W = A.copy()
    V = np.eye(n)
    for _ in range(max_sweeps):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                wp, wq = W[:, p], W[:, q]
                alpha = wp @ wp
                beta = wq @ wq
                gamma = wp @ wq
                if abs(gamma) <= tol * np.sqrt(alpha) * np.sqrt(beta) or gamma == 0.0:
                    continue
                with np.errstate(over="ignore"):
                    zeta = (beta - alpha) / (2.0 * gamma)
                if not np.isfinite(zeta):
                    continue  # angle below double precision
                rotated = True
                if abs(zeta) > 1e150:
                    t = 0.5 / zeta
                else:
                    t = np.copysign(1.0, zeta) / (abs(zeta) + np.hypot(1.0, zeta))
                c = 1.0 / np.hypot(1.0, t)
                sn = c * t
                W[:, [p, q]] = np.column_stack([c * wp - sn * wq, sn * wp + c * wq])
                vp, vq = V[:, p].copy(), V[:, q].copy()
                V[:, p], V[:, q] = c * vp - sn * vq, sn * vp + c * vq
        if not rotated:
            break
    s = np.linalg.norm(W, axis=0)
    order = np.argsort(-s, kind="stable")
    s = s[order]
    W, V = W[:, order], V[:, order]
    U = np.divide(W, s, out=np.zeros_like(W), where=s > 0)
    return U, s, V.T


def rank_k(A, k: int) -> np.ndarray:
    U, s, Vt = jacobi_svd(A)
    k = min(k, s.size)
    return (U[:, :k] * s[:k]) @ Vt[:k]


def impute_svd(ds: DatasetTensor, M=None, k: int = 4, tol: float = 1e-5,
               max_sweeps: int = 100):
    """Iterative rank-``k`` completion.

    Missing cells start from linear interpolation; each sweep replaces them by
    the rank-``k`` reconstruction until ``||X_new - X_old||_F / ||X_old||_F``
    drops below ``tol``.  Returns ``(completed, log)`` where ``log`` lists
    that ratio for every sweep.
    """
    x, avail, miss = _flat(ds, M)
    if not 1 <= k <= min(x.shape):
        raise ConfigurationError(f"k must lie in [1, {min(x.shape)}], got {k}")
    if tol <= 0 or max_sweeps < 1:
        raise ConfigurationError("tol and max_sweeps must be positive")
    out = impute_linear(ds, M).reshape(x.shape)
    history = []
    for _ in range(max_sweeps):
        recon = rank_k(out, k)
        base = max(float(np.linalg.norm(out)), 1e-300)
        prev = out[miss]
        out[miss] = recon[miss]
        change = float(np.linalg.norm(out[miss] - prev)) / base
        history.append(change)
        if change < tol:
            break
    else:
        warnings.warn(f"SVD imputation stopped after {max_sweeps} sweeps at delta "
                      f"{history[-1]:.3g} > tol {tol:g}", RuntimeWarning, stacklevel=2)
    return out.reshape(ds.shape), history


BASELINES = {
    "mean": lambda ds, M, **kw: impute_mean(ds, M),
    "linear": lambda ds, M, **kw: impute_linear(ds, M),
    "svd": lambda ds, M, **kw: impute_svd(ds, M, **kw)[0],
}


def run_baseline(spec: BaselineSpec, ds: DatasetTensor, M=None) -> np.ndarray:
    if spec.name not in BASELINES:
        raise ConfigurationError(f"unknown baseline {spec.name!r}; have {sorted(BASELINES)}")
    return BASELINES[spec.name](ds, M, **spec.params)

import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from deepmvi.baselines import (BaselineSpec, impute_linear, impute_mean, impute_svd, jacobi_svd,
                               rank_k, run_baseline)
from deepmvi.data import from_matrix
from deepmvi.errors import ConfigurationError

nan = np.nan


def test_mean_examples():
    assert impute_mean(from_matrix([[1, nan, 3]])).tolist() == [[1, 2, 3]]
    assert impute_mean(from_matrix([[5, nan]])).tolist() == [[5, 5]]
    assert impute_mean(from_matrix([[4, 7, 1]])).tolist() == [[4, 7, 1]]


def test_mean_of_empty_series_uses_global_mean():
    out = impute_mean(from_matrix([[1, 3], [nan, nan]]))
    assert out[1].tolist() == [2, 2]


def test_linear_examples():
    assert impute_linear(from_matrix([[0, nan, nan, 3]])).tolist() == [[0, 1, 2, 3]]
    assert impute_linear(from_matrix([[nan, 2, 4]])).tolist() == [[2, 2, 4]]
    assert impute_linear(from_matrix([[1, nan, 1]])).tolist() == [[1, 1, 1]]
    assert impute_linear(from_matrix([[1, 5, nan]])).tolist() == [[1, 5, 5]]


def test_linear_of_empty_series_uses_global_mean():
    out = impute_linear(from_matrix([[2, 4, 6], [nan, nan, nan]]))
    assert out[1].tolist() == [4, 4, 4]


def test_explicit_mask_overrides_dataset_mask():
    ds = from_matrix([[1.0, 9.0, 3.0]])
    M = np.array([[False, True, False]])
    assert impute_linear(ds, M).tolist() == [[1, 2, 3]]
    assert impute_mean(ds, M).tolist() == [[1, 2, 3]]


# ---------------------------------------------------------------- svd


def test_rank_one_completion():
    X = np.outer([1.0, 2.0], [1.0, 1.0, 1.0])
    X[1, 2] = nan
    out, _ = impute_svd(from_matrix(X), k=1)
    assert abs(out[1, 2] - 2.0) < 1e-6


def test_fully_observed_takes_one_sweep():
    X = np.arange(12.0).reshape(3, 4)
    out, history = impute_svd(from_matrix(X), k=1)
    assert history == [0.0]
    assert out.tobytes() == X.tobytes()


def test_rank_two_recovery():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(8, 2)) @ rng.normal(size=(2, 30))
    M = rng.random(X.shape) < 0.1
    out, history = impute_svd(from_matrix(np.where(M, nan, X)), k=2, tol=1e-8, max_sweeps=1000)
    assert np.abs(out - X)[M].max() < 1e-4
    assert history[-1] < 1e-8


def test_svd_rank_bounds():
    ds = from_matrix(np.ones((3, 5)))
    with pytest.raises(ConfigurationError):
        impute_svd(ds, k=0)
    with pytest.raises(ConfigurationError):
        impute_svd(ds, k=4)
    with pytest.raises(ConfigurationError):
        impute_svd(ds, k=1, tol=0)


def test_svd_warns_when_sweeps_run_out():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(6, 20))
    X[rng.random(X.shape) < 0.3] = nan
    with pytest.warns(RuntimeWarning, match="sweeps"):
        _, history = impute_svd(from_matrix(X), k=2, tol=1e-14, max_sweeps=3)
    assert len(history) == 3


@given(hnp.arrays(np.float64, st.tuples(st.integers(2, 6), st.integers(2, 10)),
                  elements=st.floats(-10, 10)), st.integers(0, 1000))
def test_svd_keeps_available_cells(X, seed):
    M = np.random.default_rng(seed).random(X.shape) < 0.3
    M[:, 0] = False
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        out, history = impute_svd(from_matrix(np.where(M, nan, X)), k=1, max_sweeps=20)
    np.testing.assert_array_equal(out[~M], X[~M])
    assert 1 <= len(history) <= 20
    assert np.all(np.isfinite(out))


@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 8)),
                  elements=st.floats(-100, 100)))
def test_baselines_are_idempotent_when_observed(X):
    ds = from_matrix(X)
    assert impute_mean(ds).tobytes() == X.tobytes()
    assert impute_linear(ds).tobytes() == X.tobytes()
    assert impute_svd(ds, k=1)[0].tobytes() == X.tobytes()


# ---------------------------------------------------------------- jacobi


def gram_oracle(A):
    """Singular values and right vectors from the eigen-decomposition of AᵀA."""
    evals, evecs = np.linalg.eigh(A.T @ A)
    order = np.argsort(-evals)
    return np.sqrt(np.clip(evals[order], 0, None)), evecs[:, order]


@pytest.mark.parametrize("shape", [(12, 12), (12, 5), (4, 9), (1, 6), (7, 1)])
def test_jacobi_matches_gram_eigendecomposition(shape, rng):
    A = rng.normal(size=shape)
    U, s, Vt = jacobi_svd(A)
    ref_s, ref_v = gram_oracle(A)
    r = min(shape)
    np.testing.assert_allclose(s, ref_s[:r], rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(U * s @ Vt, A, atol=1e-12)
    # right vectors agree up to sign
    for j in range(r):
        assert abs(abs(Vt[j] @ ref_v[:, j]) - 1.0) < 1e-8
    np.testing.assert_allclose(U.T @ U, np.eye(r), atol=1e-12)


def test_jacobi_on_rank_deficient_matrix(rng):
    A = rng.normal(size=(6, 2)) @ rng.normal(size=(2, 5))
    U, s, Vt = jacobi_svd(A)
    assert np.all(np.diff(s) <= 0)
    assert s[2:].max() < 1e-12
    np.testing.assert_allclose(rank_k(A, 2), A, atol=1e-12)


def test_jacobi_rejects_vectors():
    with pytest.raises(ConfigurationError):
        jacobi_svd(np.ones(4))


def test_run_baseline_dispatch():
    ds = from_matrix([[1, nan, 3]])
    assert run_baseline(BaselineSpec("linear"), ds).tolist() == [[1, 2, 3]]
    with pytest.raises(ConfigurationError):
        run_baseline(BaselineSpec("cdrec"), ds)

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from obsprune.hessian import (
    GradientAccumulator,
    HessianMode,
    accumulate_gradient,
    hessian_from_activations,
    hessian_from_gradient_cols,
    hessian_from_gradient_rows,
    relative_damping,
)
from obsprune.matcore import DimensionError, SingularityError


def test_gradient_cols_examples():
    h = hessian_from_gradient_cols(np.array([[1.0, 0], [0, 2]]), 0.0)
    np.testing.assert_array_equal(h.matrix, np.diag([1.0, 4.0]))
    assert h.mode is HessianMode.GRADIENT_COLUMN and h.lam == 0.0
    h = hessian_from_gradient_cols(np.array([[1.0, 1.0]]), 0.5)
    np.testing.assert_array_equal(h.matrix, [[1.5, 1], [1, 1.5]])


def test_gradient_cols_random_inverse():
    G = np.random.default_rng(0).normal(size=(3, 5))
    h = hessian_from_gradient_cols(G, 1e-3)
    # independent check: build G^T G + lam I by explicit sums
    H = np.array([[sum(G[r, i] * G[r, j] for r in range(3)) for j in range(5)] for i in range(5)])
    H += 1e-3 * np.eye(5)
    np.testing.assert_allclose(h.matrix, H, atol=1e-12)
    np.testing.assert_allclose(H @ h.inverse, np.eye(5), atol=1e-8)


def test_gradient_rows_examples():
    np.testing.assert_array_equal(hessian_from_gradient_rows(np.array([[1.0, 0], [0, 2]]), 0.0).matrix,
                                  np.diag([1.0, 4.0]))
    h = hessian_from_gradient_rows(np.array([[1.0], [1.0]]), 0.5)
    np.testing.assert_array_equal(h.matrix, [[1.5, 1], [1, 1.5]])
    assert h.mode is HessianMode.GRADIENT_ROW


def test_singular_without_damping():
    with pytest.raises(SingularityError):
        hessian_from_gradient_cols(np.array([[1.0, 1.0]]), 0.0)


def test_relative_damping_default():
    G = np.random.default_rng(1).normal(size=(2, 4))
    h = hessian_from_gradient_cols(G)
    assert h.lam == pytest.approx(1e-2 * np.mean(np.sum(G * G, axis=0)))
    assert relative_damping(np.diag([2.0, 4.0]), 0.5) == 1.5


def test_activation_examples():
    np.testing.assert_array_equal(hessian_from_activations(np.eye(2)).matrix, np.eye(2))
    np.testing.assert_array_equal(hessian_from_activations(np.array([[1.0, 1], [0, 0]]), 1.0).matrix,
                                  [[3, 0], [0, 1]])
    lam = 0.1
    h = hessian_from_activations(np.random.default_rng(2).normal(size=(4, 64)), lam)
    assert h.mode is HessianMode.ACTIVATION
    x = np.random.default_rng(3).normal(size=(200, 4))
    rq = np.einsum("ti,ij,tj->t", x, h.matrix, x) / np.sum(x * x, axis=1)
    assert np.all(rq >= lam)


def test_accumulator_examples():
    rng = np.random.default_rng(4)
    G = rng.normal(size=(2, 3))
    np.testing.assert_array_equal(accumulate_gradient(None, G).mean(), G)
    acc = GradientAccumulator().add(G).add(-G)
    np.testing.assert_allclose(acc.mean(), 0.0)
    batches = [rng.normal(size=(2, 3)) for _ in range(3)]
    acc = GradientAccumulator()
    for b in batches:
        acc = accumulate_gradient(acc, b)
    np.testing.assert_allclose(acc.mean(), (batches[0] + batches[1] + batches[2]) / 3, atol=1e-15)
    assert acc.count == 3
    acc.reset()
    with pytest.raises(ValueError):
        acc.mean()


def test_accumulator_window_and_shape_drift():
    acc = GradientAccumulator(window=2)
    for v in (1.0, 2.0, 3.0):
        acc.add(np.full((1, 1), v))
    assert acc.mean()[0, 0] == 2.5
    with pytest.raises(DimensionError):
        acc.add(np.zeros((2, 1)))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), m=st.integers(1, 6), n=st.integers(1, 6), lam=st.floats(1e-3, 5.0))
def test_estimate_invariants(seed, m, n, lam):
    rng = np.random.default_rng(seed)
    G = rng.normal(size=(m, n))
    h = hessian_from_gradient_cols(G, lam)
    np.testing.assert_array_equal(h.matrix, hessian_from_gradient_rows(G.T, lam).matrix)
    np.testing.assert_allclose(h.inverse, h.inverse.T, atol=1e-8)
    np.testing.assert_allclose(h.matrix @ h.inverse, np.eye(n), atol=1e-8)
    x = rng.normal(size=(1000, n))
    quad = np.einsum("ti,ij,tj->t", x, h.matrix, x)
    assert np.all(quad >= lam * np.sum(x * x, axis=1) * (1 - 1e-12))

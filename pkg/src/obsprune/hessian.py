"""Damped Hessian estimates built from gradients or calibration activations."""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .matcore import DimensionError, SingularityError, as_matrix, psd_inverse

DEFAULT_RELATIVE_DAMPING = 1e-2


class HessianMode(enum.Enum):
    GRADIENT_COLUMN = "gradient_column"
    GRADIENT_ROW = "gradient_row"
    ACTIVATION = "activation"


@dataclass(frozen=True)
class HessianEstimate:
    matrix: np.ndarray
    inverse: np.ndarray
    lam: float
    mode: HessianMode

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]


def relative_damping(gram: np.ndarray, rel: float = DEFAULT_RELATIVE_DAMPING) -> float:
    """``rel * mean(diag(gram))``."""
    if gram.shape[0] == 0:
        return 0.0
    return float(rel * np.mean(np.diag(gram)))


def _estimate(gram: np.ndarray, lam: float | None, mode: HessianMode) -> HessianEstimate:
    gram = 0.5 * (gram + gram.T)
    if lam is None:
        lam = relative_damping(gram)
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    try:
        inv = psd_inverse(gram, lam)
    except SingularityError as exc:
        raise SingularityError(
            f"{mode.value} Hessian singular after damping lambda={lam:g}: {exc}", exc.pivot
        ) from exc
    matrix = gram + lam * np.eye(gram.shape[0])
    return HessianEstimate(matrix=matrix, inverse=inv, lam=float(lam), mode=mode)


def hessian_from_gradient_cols(G, lam: float | None = None) -> HessianEstimate:
    """``G^T G + lam*I`` (n x n) for an m x n gradient.

    ``lam=None`` selects relative damping.
    """
    G = as_matrix(G, "gradient")
    return _estimate(G.T @ G, lam, HessianMode.GRADIENT_COLUMN)


def hessian_from_gradient_rows(G, lam: float | None = None) -> HessianEstimate:
    """``G G^T + lam*I`` (r x r) for an r x n gradient, capturing row correlations."""
    G = as_matrix(G, "gradient")
    return _estimate(G @ G.T, lam, HessianMode.GRADIENT_ROW)


def hessian_from_activations(X, lam: float | None = 0.0) -> HessianEstimate:
    """``X X^T + lam*I`` for features x samples calibration data.

    This is the Hessian of ``||W_hat X - W X||^2`` for each row of ``W``, up
    to the factor 2 that the reconstruction objective carries; we use the
    unscaled form so that the quadratic objective equals half the
    reconstruction error.
    """
    X = as_matrix(X, "activations")
    return _estimate(X @ X.T, lam, HessianMode.ACTIVATION)


class GradientAccumulator:
    """Running mean of same-shaped gradient batches.

    ``window`` bounds how many of the most recent batches are kept; ``None``
    keeps all since the last :meth:`reset`.
    """

    def __init__(self, window: int | None = None):
        if window is not None and window < 1:
            raise ValueError("window must be >= 1")
        self.window = window
        self._batches: list[np.ndarray] = []

    @property
    def count(self) -> int:
        return len(self._batches)

    def add(self, G) -> "GradientAccumulator":
        G = as_matrix(G, "gradient batch")
        if self._batches and G.shape != self._batches[0].shape:
            raise DimensionError(f"gradient shape drift: {G.shape} vs {self._batches[0].shape}")
        self._batches.append(G.copy())
        if self.window is not None and len(self._batches) > self.window:
            self._batches.pop(0)
        return self

    def mean(self) -> np.ndarray:
        if not self._batches:
            raise ValueError("no gradients accumulated")
        total = np.zeros_like(self._batches[0])
        for g in self._batches:
            total += g
        return total / len(self._batches)

    def reset(self) -> None:
        self._batches.clear()


def accumulate_gradient(state: GradientAccumulator | None, G_batch) -> GradientAccumulator:
    if state is None:
        state = GradientAccumulator()
    return state.add(G_batch)

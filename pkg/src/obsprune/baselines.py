"""Reference pruning criteria: activation OBS, loss-difference importance,
magnitude, Wanda, the one-shot gradient metric, SVD truncation, and
sparsity-pattern application (unstructured, N:M, whole columns)."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .hessian import hessian_from_activations
from .matcore import DimensionError, PruneMask, as_matrix, psd_inverse
from .obs_full import obs_update_full, select_mask_full
from .obs_lora import LoraAdapter, prune_adapter


class ScoreCriterion(enum.Enum):
    MAGNITUDE = "magnitude"
    WANDA = "wanda"
    ONESHOT_GRADIENT = "oneshot_gradient"
    IMPORTANCE_SCORE = "importance_score"


@dataclass(frozen=True)
class ScoreMatrix:
    scores: np.ndarray
    criterion: ScoreCriterion

    def __post_init__(self):
        if not (np.all(np.isfinite(self.scores)) and np.all(self.scores >= 0)):
            raise ValueError("scores must be finite and non-negative")


class PatternKind(enum.Enum):
    COLUMN_STRUCTURED = "column"
    UNSTRUCTURED = "unstructured"
    NM = "nm"


@dataclass(frozen=True)
class SparsityPattern:
    """How many entries to drop.

    ``target`` is the pruned fraction when it is a float in ``[0, 1)`` and an
    absolute count (entries or columns) when it is an int. For ``NM`` the
    pattern keeps ``n`` of every ``m_group`` consecutive entries per row.
    """
    kind: PatternKind
    n: int = 0
    m_group: int = 0
    target: float | int = 0.5

    @classmethod
    def nm(cls, n: int, m_group: int) -> "SparsityPattern":
        return cls(PatternKind.NM, n=n, m_group=m_group)


# ---------------------------------------------------------------- scores

def magnitude_scores(W) -> ScoreMatrix:
    return ScoreMatrix(np.abs(as_matrix(W, "W")), ScoreCriterion.MAGNITUDE)


def wanda_scores(W, X) -> ScoreMatrix:
    """``|W_ij| * ||X_j||`` with ``X`` laid out features x samples."""
    W = as_matrix(W, "W")
    X = as_matrix(X, "X")
    if X.shape[0] != W.shape[1]:
        raise DimensionError(f"X has {X.shape[0]} features, W has {W.shape[1]} columns")
    return ScoreMatrix(np.abs(W) * np.linalg.norm(X, axis=1)[None, :], ScoreCriterion.WANDA)


def oneshot_gradient_scores(W, G, lam: float) -> ScoreMatrix:
    """``|W_ij / [(G^T G + lam I)^-1]_jj|``."""
    W = as_matrix(W, "W")
    G = as_matrix(G, "G")
    if W.shape != G.shape:
        raise DimensionError(f"W {W.shape} and G {G.shape} differ")
    Hinv = psd_inverse(G.T @ G, lam)
    return ScoreMatrix(np.abs(W / np.diag(Hinv)[None, :]), ScoreCriterion.ONESHOT_GRADIENT)


def column_aggregate(scores) -> np.ndarray:
    """Per-column sum of squared scores (the squared column norm of the scores)."""
    S = scores.scores if isinstance(scores, ScoreMatrix) else np.asarray(scores, float)
    return np.sum(S * S, axis=0)


def smallest_k(values, k: int) -> tuple[int, ...]:
    """Indices of the ``k`` smallest values, ties to the smaller index."""
    order = np.argsort(np.asarray(values), kind="stable")
    return tuple(sorted(int(i) for i in order[:k]))


def magnitude_column_prune(W, k: int) -> PruneMask:
    W = as_matrix(W, "W")
    return PruneMask.columns(smallest_k(column_aggregate(magnitude_scores(W)), k), W.shape[1])


# ---------------------------------------------------------------- patterns

def _count(target, total: int) -> int:
    if isinstance(target, (int, np.integer)) and not isinstance(target, bool):
        count = int(target)
    else:
        count = int(round(float(target) * total))
    if not 0 <= count <= total:
        raise ValueError(f"target {target} out of range for {total} items")
    return count


def apply_pattern(scores, pattern: SparsityPattern) -> np.ndarray:
    """Boolean keep-matrix honoring ``pattern``; ties keep the lower index."""
    S = scores.scores if isinstance(scores, ScoreMatrix) else as_matrix(scores, "scores")
    rows, cols = S.shape
    keep = np.zeros(S.shape, dtype=bool)
    if pattern.kind is PatternKind.NM:
        g, n = pattern.m_group, pattern.n
        if g <= 0 or cols % g != 0 or not 0 < n < g:
            raise ValueError(f"invalid {n}:{g} grouping for {cols} columns")
        groups = S.reshape(rows, cols // g, g)
        # stable descending order: sort on -score keeps lower index first on ties
        order = np.argsort(-groups, axis=2, kind="stable")[:, :, :n]
        kg = np.zeros(groups.shape, dtype=bool)
        np.put_along_axis(kg, order, True, axis=2)
        return kg.reshape(rows, cols)
    if pattern.kind is PatternKind.UNSTRUCTURED:
        drop = _count(pattern.target, S.size)
        order = np.argsort(S.reshape(-1), kind="stable")
        flat = np.ones(S.size, dtype=bool)
        flat[order[:drop]] = False
        return flat.reshape(S.shape)
    if pattern.kind is PatternKind.COLUMN_STRUCTURED:
        drop = _count(pattern.target, cols)
        keep[:] = True
        keep[:, list(smallest_k(column_aggregate(S), drop))] = False
        return keep
    raise ValueError(f"unknown pattern {pattern.kind}")


# ---------------------------------------------------------------- pruners

def activation_obs_prune(W, X, k: int, lam: float = 0.0, strategy=None):
    """Zero ``k`` columns of ``W`` minimizing ``||W_hat X - W X||^2`` and compensate.

    ``X`` is features x samples. Returns ``(mask, W_hat)``.
    """
    W = as_matrix(W, "W")
    H = hessian_from_activations(X, lam)
    G = np.zeros_like(W)
    cand = select_mask_full(W, G, H, k, strategy)
    sol = obs_update_full(W, G, H, cand.mask)
    return cand.mask, W + sol.delta


def reconstruction_error(W_hat, W, X) -> float:
    R = (np.asarray(W_hat) - np.asarray(W)) @ np.asarray(X)
    return float(np.sum(R * R))


def importance_scores(loss_evaluator, W) -> np.ndarray:
    """``|L(W) - L(W with column i zeroed)|`` for every column."""
    W = as_matrix(W, "W")
    base = float(loss_evaluator(W))
    if not math.isfinite(base):
        raise ArithmeticError("non-finite loss")
    out = np.zeros(W.shape[1])
    for i in range(W.shape[1]):
        Wz = W.copy()
        Wz[:, i] = 0.0
        val = float(loss_evaluator(Wz))
        if not math.isfinite(val):
            raise ArithmeticError(f"non-finite loss with column {i} zeroed")
        out[i] = abs(base - val)
    return out


def importance_score_prune(loss_evaluator, W, k: int) -> PruneMask:
    """Mask of the ``k`` columns whose removal changes the loss least. No update."""
    W = as_matrix(W, "W")
    if not 0 < k < W.shape[1]:
        raise ValueError(f"k must satisfy 0 < k < {W.shape[1]}")
    return PruneMask.columns(smallest_k(importance_scores(loss_evaluator, W), k), W.shape[1])


def svd_truncate(DeltaW, r: int):
    """Best rank-``r`` factors ``(U_r S_r, V_r^T)`` of ``DeltaW``."""
    D = as_matrix(DeltaW, "DeltaW")
    if not 0 < r <= min(D.shape):
        raise ValueError(f"r must be in [1, {min(D.shape)}]")
    U, s, Vt = np.linalg.svd(D, full_matrices=False)
    return U[:, :r] * s[:r], Vt[:r, :].copy()


def oneshot_lora_prune(adapter: LoraAdapter, grads, hessians, k: int, strategy=None,
                       alpha: float | None = None, report: list | None = None) -> LoraAdapter:
    """Single select/update/compact pass removing ``k`` rank indices."""
    new, entry = prune_adapter(adapter, grads, hessians, k, strategy, alpha=alpha)
    if report is not None:
        report.append(entry)
    return new

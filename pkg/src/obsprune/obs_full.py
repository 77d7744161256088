"""Column pruning of a full weight matrix with a second-order weight update.

For a weight ``W`` (m x n), gradient ``G`` and column Hessian ``H`` (n x n) the
local model of the loss change is

    q(delta) = <G, delta> + 1/2 tr(delta H delta^T)

and pruning the columns in mask ``M`` means ``delta[:, M] = -W[:, M]``. With
``Wt = W - G H^-1`` (the Newton-shifted weights) the minimizer is

    delta = -G H^-1 - Wt[:, M] ((H^-1)[M, M])^-1 (H^-1)[M, :]

and its objective exceeds the unconstrained Newton optimum by half of

    saliency(M) = tr(Wt[:, M] ((H^-1)[M, M])^-1 Wt[:, M]^T).
"""
from __future__ import annotations

import enum
import itertools
import math
from dataclasses import dataclass

import numpy as np

from .hessian import HessianEstimate
from .matcore import (
    Axis,
    DimensionError,
    PruneMask,
    SingularityError,
    as_matrix,
    spd_solve_right,
)
from .report import PruneReportEntry

EXHAUSTIVE_LIMIT = 2_000_000
GREEDY_THRESHOLD = 12


class SearchStrategy(enum.Enum):
    EXHAUSTIVE = "exhaustive"
    GREEDY = "greedy"

    @classmethod
    def parse(cls, value) -> "SearchStrategy":
        if isinstance(value, cls):
            return value
        return cls(str(value).lower())


def default_strategy(n: int) -> SearchStrategy:
    return SearchStrategy.GREEDY if n > GREEDY_THRESHOLD else SearchStrategy.EXHAUSTIVE


@dataclass(frozen=True)
class PruneCandidate:
    mask: PruneMask
    saliency: float


@dataclass(frozen=True)
class ObsSolution:
    mask: PruneMask
    delta: np.ndarray
    quad_objective: float


def quad_objective(G: np.ndarray, H: np.ndarray, delta: np.ndarray) -> float:
    """``<G, delta> + 1/2 tr(delta H delta^T)``."""
    return float(np.sum(G * delta) + 0.5 * np.sum((delta @ H) * delta))


def _check_shapes(W: np.ndarray, G: np.ndarray, H: HessianEstimate) -> None:
    if W.shape != G.shape:
        raise DimensionError(f"W {W.shape} and G {G.shape} differ")
    if H.matrix.shape != (W.shape[1], W.shape[1]):
        raise DimensionError(f"Hessian {H.matrix.shape} does not match {W.shape[1]} columns")


def newton_shift(W, G, H: HessianEstimate) -> np.ndarray:
    """Newton-shifted weights ``W - G H^-1``."""
    W = as_matrix(W, "W")
    G = as_matrix(G, "G")
    _check_shapes(W, G, H)
    return W - G @ H.inverse


def saliency_full(Wt: np.ndarray, Hinv: np.ndarray, mask: PruneMask) -> float:
    if len(mask) == 0:
        raise ValueError("saliency needs a non-empty mask")
    if mask.host_dim != Wt.shape[1] or Hinv.shape != (mask.host_dim, mask.host_dim):
        raise DimensionError("mask does not match Wt / Hinv")
    idx = mask.array()
    V = Wt[:, idx]
    block = Hinv[np.ix_(idx, idx)]
    try:
        X = spd_solve_right(V, block)
    except SingularityError as exc:
        raise SingularityError(f"principal block of H^-1 singular for mask {{{mask}}}", exc.pivot) from exc
    return float(np.sum(X * V))


def batch_saliency(Wt: np.ndarray, Hinv: np.ndarray, masks: np.ndarray) -> np.ndarray:
    """Saliency for each row of ``masks`` (an ``(count, k)`` index array)."""
    masks = np.asarray(masks, dtype=np.intp)
    if masks.ndim != 2 or masks.shape[1] == 0:
        raise ValueError("masks must be a non-empty (count, k) array")
    blocks = Hinv[masks[:, :, None], masks[:, None, :]]
    V = np.transpose(Wt[:, masks], (1, 0, 2))  # (count, m, k)
    try:
        L = np.linalg.cholesky(blocks)
    except np.linalg.LinAlgError:
        # locate the offending mask and report it properly
        n = Wt.shape[1]
        for row in masks:
            saliency_full(Wt, Hinv, PruneMask.columns(row, n))
        raise
    # tr(V B^-1 V^T) = ||L^-1 V^T||_F^2
    Y = np.linalg.solve(L, np.transpose(V, (0, 2, 1)))
    return np.einsum("cij,cij->c", Y, Y)


def _check_k(k: int, n: int) -> None:
    if not 0 < k < n:
        raise ValueError(f"k must satisfy 0 < k < {n}, got {k}")


def exhaustive_search(score_fn, n: int, k: int) -> tuple[tuple[int, ...], float]:
    """Minimize ``score_fn`` over all size-k subsets of ``range(n)``.

    ``score_fn`` maps a ``(count, k)`` index array to scores. Ties resolve to
    the lexicographically smallest subset.
    """
    if math.comb(n, k) > EXHAUSTIVE_LIMIT:
        raise ValueError(f"C({n},{k}) exceeds the exhaustive search limit {EXHAUSTIVE_LIMIT}")
    best_idx, best_val = None, math.inf
    combos = itertools.combinations(range(n), k)
    while True:
        chunk = np.array(list(itertools.islice(combos, 65536)), dtype=np.intp)
        if chunk.size == 0:
            break
        vals = score_fn(chunk)
        i = int(np.argmin(vals))
        if vals[i] < best_val:
            best_val, best_idx = float(vals[i]), tuple(int(x) for x in chunk[i])
    return best_idx, best_val


def greedy_search(score_fn, n: int, k: int) -> tuple[tuple[int, ...], float]:
    """Grow a subset one index at a time, each step minimizing the joint score."""
    chosen: list[int] = []
    best_val = math.inf
    for _ in range(k):
        rest = [j for j in range(n) if j not in chosen]
        cand = np.array([sorted(chosen + [j]) for j in rest], dtype=np.intp)
        vals = score_fn(cand)
        i = int(np.argmin(vals))  # candidates are in increasing j, so ties go to smallest index
        chosen.append(rest[i])
        best_val = float(vals[i])
    return tuple(sorted(chosen)), best_val


def run_search(score_fn, n: int, k: int, strategy) -> tuple[tuple[int, ...], float]:
    _check_k(k, n)
    strategy = default_strategy(n) if strategy is None else SearchStrategy.parse(strategy)
    if strategy is SearchStrategy.EXHAUSTIVE:
        return exhaustive_search(score_fn, n, k)
    return greedy_search(score_fn, n, k)


def select_mask_full(W, G, H: HessianEstimate, k: int, strategy=None) -> PruneCandidate:
    """Pick ``k`` columns minimizing the saliency.

    ``strategy=None`` uses exhaustive search up to 12 columns and greedy growth
    above that.
    """
    Wt = newton_shift(W, G, H)
    n = Wt.shape[1]
    idx, val = run_search(lambda masks: batch_saliency(Wt, H.inverse, masks), n, k, strategy)
    return PruneCandidate(PruneMask.columns(idx, n), val)


def constrained_delta(Wt: np.ndarray, G: np.ndarray, Hinv: np.ndarray, W: np.ndarray,
                      mask: PruneMask) -> np.ndarray:
    idx = mask.array()
    delta = -G @ Hinv
    if len(idx):
        block = Hinv[np.ix_(idx, idx)]
        try:
            lam = spd_solve_right(Wt[:, idx], block)
        except SingularityError as exc:
            raise SingularityError(f"principal block of H^-1 singular for mask {{{mask}}}", exc.pivot) from exc
        delta -= lam @ Hinv[idx, :]
        # the formula pins these columns analytically; remove rounding residue
        delta[:, idx] = -W[:, idx]
    return delta


def obs_update_full(W, G, H: HessianEstimate, mask: PruneMask) -> ObsSolution:
    W = as_matrix(W, "W")
    G = as_matrix(G, "G")
    _check_shapes(W, G, H)
    if mask.axis is not Axis.COLUMN or mask.host_dim != W.shape[1]:
        raise DimensionError("obs_update_full needs a column mask over W's columns")
    Wt = W - G @ H.inverse
    delta = constrained_delta(Wt, G, H.inverse, W, mask)
    return ObsSolution(mask, delta, quad_objective(G, H.matrix, delta))


def prune_full_matrix(W, G, H: HessianEstimate, k: int, strategy=None, step: int = 0):
    """Select ``k`` columns, apply the optimal update and return ``(W + delta, entry)``."""
    cand = select_mask_full(W, G, H, k, strategy)
    sol = obs_update_full(W, G, H, cand.mask)
    W_new = as_matrix(W) + sol.delta
    entry = PruneReportEntry(step=step, indices=cand.mask.indices, saliency=cand.saliency,
                             quad_objective=sol.quad_objective, axis="column",
                             host_dim=cand.mask.host_dim)
    return W_new, entry

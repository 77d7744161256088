"""Brute-force verifiers.

Nothing here calls into the pruners: the constrained quadratic is solved by
pinning the pruned columns and solving the stationarity system on the free
columns directly, and masks are enumerated exhaustively.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .matcore import PruneMask, SingularityError, as_matrix

ENUMERATION_LIMIT = 100_000


@dataclass(frozen=True)
class OracleResult:
    best_mask: PruneMask
    best_objective: float
    per_mask: list


def _hmatrix(H) -> np.ndarray:
    return np.asarray(getattr(H, "matrix", H), dtype=np.float64)


def _objective(G, H, delta) -> float:
    return float(np.sum(G * delta) + 0.5 * np.trace(delta @ H @ delta.T))


def solve_constrained_quadratic(W, G, H, mask) -> tuple[np.ndarray, float]:
    """Minimize ``<G,d> + 1/2 tr(d H d^T)`` subject to ``d[:, mask] = -W[:, mask]``."""
    W = as_matrix(W, "W")
    G = as_matrix(G, "G")
    H = _hmatrix(H)
    n = W.shape[1]
    pinned = sorted(getattr(mask, "indices", mask))
    pinned_set = set(pinned)
    free = [j for j in range(n) if j not in pinned_set]
    delta = np.zeros_like(W)
    delta[:, pinned] = -W[:, pinned]
    if free:
        # d/d(delta_F): G_F + delta_F H_FF + delta_P H_PF = 0
        rhs = -(G[:, free] + delta[:, pinned] @ H[np.ix_(pinned, free)])
        H_ff = H[np.ix_(free, free)]
        try:
            delta[:, free] = np.linalg.solve(H_ff, rhs.T).T
        except np.linalg.LinAlgError as exc:
            raise SingularityError(f"free block singular for pinned set {pinned}") from exc
    return delta, _objective(G, H, delta)


def enumerate_masks(W, G, H, k: int) -> OracleResult:
    W = as_matrix(W, "W")
    n = W.shape[1]
    if not 0 <= k <= n:
        raise ValueError(f"k={k} out of range for n={n}")
    if math.comb(n, k) > ENUMERATION_LIMIT:
        raise ValueError(f"C({n},{k}) exceeds the oracle limit {ENUMERATION_LIMIT}")
    per_mask = []
    best = None
    for combo in itertools.combinations(range(n), k):
        _, obj = solve_constrained_quadratic(W, G, H, combo)
        mask = PruneMask.columns(combo, n)
        per_mask.append((mask, obj))
        if best is None or obj < best[1]:
            best = (mask, obj)
    return OracleResult(best_mask=best[0], best_objective=best[1], per_mask=per_mask)


def enumerate_lora_masks(B, G_B, H_B, A, G_A, H_A, k: int) -> OracleResult:
    """Joint enumeration for an adapter pair: B columns and A rows share the mask."""
    B = as_matrix(B, "B")
    A = as_matrix(A, "A")
    r = B.shape[1]
    per_mask = []
    best = None
    for combo in itertools.combinations(range(r), k):
        _, ob = solve_constrained_quadratic(B, G_B, H_B, combo)
        _, oa = solve_constrained_quadratic(A.T, np.asarray(G_A).T, H_A, combo)
        mask = PruneMask.columns(combo, r)
        per_mask.append((mask, ob + oa))
        if best is None or ob + oa < best[1]:
            best = (mask, ob + oa)
    return OracleResult(best_mask=best[0], best_objective=best[1], per_mask=per_mask)


def finite_diff_gradient(loss_fn, params, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of ``loss_fn`` at ``params`` (any shape)."""
    if h <= 0:
        raise ValueError("h must be positive")
    p = np.array(params, dtype=np.float64)
    grad = np.zeros_like(p)
    flat, gflat = p.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(loss_fn(p))
        flat[i] = orig - h
        down = float(loss_fn(p))
        flat[i] = orig
        if not (math.isfinite(up) and math.isfinite(down)):
            raise ArithmeticError(f"non-finite loss near coordinate {i}")
        gflat[i] = (up - down) / (2 * h)
    return grad


def relative_error(a, b) -> float:
    """``||a - b|| / max(||a||, ||b||)``; 0 when both vanish."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)

"""Pruner-versus-oracle cross checks shared by ``oracle-check`` and the test suite."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .hessian import hessian_from_gradient_cols, hessian_from_gradient_rows
from .obs_full import SearchStrategy, newton_shift, obs_update_full, quad_objective, saliency_full, select_mask_full
from .obs_lora import (
    LoraAdapter,
    apply_solution,
    compact_rank,
    lora_obs_update,
    saliency_lora,
    select_mask_lora,
)
from .oracle import enumerate_lora_masks, enumerate_masks, solve_constrained_quadratic

TIE_TOL = 1e-12
DELTA_TOL = 1e-9
IDENTITY_RTOL = 1e-9


@dataclass(frozen=True)
class CheckRecord:
    instance: int
    m: int
    n: int
    k: int
    check: str
    value: float
    ok: bool

    def record(self) -> list:
        return [self.instance, self.m, self.n, self.k, self.check, self.value, self.ok]


def random_instance(rng: np.random.Generator, m: int, n: int):
    """``(W, G, H)`` with ``H`` from ``G`` under the default relative damping."""
    W = rng.normal(size=(m, n))
    G = rng.normal(size=(m, n))
    return W, G, hessian_from_gradient_cols(G)


def _tie_ok(chosen_obj: float, best_obj: float) -> bool:
    return chosen_obj - best_obj <= TIE_TOL * max(1.0, abs(best_obj))


def full_checks(instance: int, W, G, H, k: int) -> list[CheckRecord]:
    """Mask, update and saliency-identity agreement for one full-matrix instance."""
    m, n = W.shape
    out = []
    oracle = enumerate_masks(W, G, H, k)
    cand = select_mask_full(W, G, H, k, SearchStrategy.EXHAUSTIVE)
    table = {mk.indices: obj for mk, obj in oracle.per_mask}
    gap = table[cand.mask.indices] - oracle.best_objective
    out.append(CheckRecord(instance, m, n, k, "mask", gap,
                           cand.mask == oracle.best_mask or _tie_ok(table[cand.mask.indices], oracle.best_objective)))

    sol = obs_update_full(W, G, H, cand.mask)
    ref, _ = solve_constrained_quadratic(W, G, H, cand.mask)
    err = float(np.max(np.abs(sol.delta - ref)))
    out.append(CheckRecord(instance, m, n, k, "delta", err, err <= DELTA_TOL))

    newton = quad_objective(G, H.matrix, -G @ H.inverse)
    Wt = newton_shift(W, G, H)
    worst = 0.0
    for mk, obj in oracle.per_mask:
        half = 0.5 * saliency_full(Wt, H.inverse, mk)
        worst = max(worst, abs((obj - newton) - half) / max(abs(half), 1e-300))
    out.append(CheckRecord(instance, m, n, k, "saliency_identity", worst, worst <= IDENTITY_RTOL))
    return out


def perturbation_check(rng: np.random.Generator, W, G, H, mask, trials: int = 1000,
                       tol: float = 1e-12) -> tuple[float, bool]:
    """Random feasible perturbations of the optimal update never do better.

    Returns the smallest ``q(delta') - q(delta*)`` seen and whether it stayed
    above ``-tol`` (scaled by the objective magnitude).
    """
    sol = obs_update_full(W, G, H, mask)
    E = rng.normal(size=(trials,) + W.shape)
    E[:, :, mask.array()] = 0.0
    scales = rng.choice([1e-6, 1e-3, 1.0], size=trials)
    D = sol.delta[None] + scales[:, None, None] * E
    q = (np.einsum("ij,tij->t", G, D) + 0.5 * np.einsum("tij,jk,tik->t", D, H.matrix, D))
    margin = float(np.min(q - sol.quad_objective))
    return margin, margin >= -tol * max(1.0, abs(sol.quad_objective))


def lora_checks(instance: int, rng: np.random.Generator, r: int, k: int, m: int = 4, n: int = 5
                ) -> list[CheckRecord]:
    """Joint mask against enumeration, separability, per-factor updates and compaction."""
    A = rng.normal(size=(r, n))
    B = rng.normal(size=(m, r))
    G_A = rng.normal(size=(r, n))
    G_B = rng.normal(size=(m, r))
    H_A = hessian_from_gradient_rows(G_A)
    H_B = hessian_from_gradient_cols(G_B)
    ad = LoraAdapter(A, B, alpha=float(r))
    out = []
    oracle = enumerate_lora_masks(B, G_B, H_B, A, G_A, H_A, k)
    cand = select_mask_lora(ad, (G_A, G_B), (H_A, H_B), k, SearchStrategy.EXHAUSTIVE)
    table = {mk.indices: obj for mk, obj in oracle.per_mask}
    gap = table[cand.mask.indices] - oracle.best_objective
    out.append(CheckRecord(instance, m, r, k, "lora_mask", gap,
                           cand.mask == oracle.best_mask or _tie_ok(table[cand.mask.indices], oracle.best_objective)))

    At = A - H_A.inverse @ G_A
    Bt = B - G_B @ H_B.inverse
    worst = 0.0
    for mk, _ in oracle.per_mask:
        joint = saliency_lora(At, Bt, H_A.inverse, H_B.inverse, mk)
        parts = saliency_full(Bt, H_B.inverse, mk) + saliency_full(At.T, H_A.inverse, mk)
        worst = max(worst, abs(joint - parts) / max(abs(parts), 1e-300))
    out.append(CheckRecord(instance, m, r, k, "separability", worst, worst <= IDENTITY_RTOL))

    sol = lora_obs_update(ad, (G_A, G_B), (H_A, H_B), cand.mask)
    ref_B, _ = solve_constrained_quadratic(B, G_B, H_B, cand.mask)
    ref_At, _ = solve_constrained_quadratic(A.T, G_A.T, H_A, cand.mask)
    err = max(float(np.max(np.abs(sol.delta_B - ref_B))), float(np.max(np.abs(sol.delta_A - ref_At.T))))
    out.append(CheckRecord(instance, m, r, k, "lora_delta", err, err <= DELTA_TOL))

    updated = apply_solution(ad, sol)
    compacted = compact_rank(updated, cand.mask)
    diff = float(np.max(np.abs(compacted.B @ compacted.A - updated.B @ updated.A)))
    out.append(CheckRecord(instance, m, r, k, "compaction", diff, diff < 1e-12))
    return out


def oracle_suite(trials: int, max_n: int, rng: np.random.Generator, ms=(2, 3, 4), max_k: int = 3,
                 lora_ranks=(3, 4, 5, 6)) -> list[CheckRecord]:
    """Every (m, n, k) with ``3 <= n <= max_n`` and ``k < n``, ``trials`` instances each."""
    out = []
    inst = 0
    for m in ms:
        for n in range(3, max_n + 1):
            for k in range(1, min(max_k, n - 1) + 1):
                for _ in range(trials):
                    W, G, H = random_instance(rng, m, n)
                    out.extend(full_checks(inst, W, G, H, k))
                    inst += 1
    for r in lora_ranks:
        for k in range(1, min(max_k, r - 1) + 1):
            for _ in range(max(1, trials // 10)):
                out.extend(lora_checks(inst, rng, r, k))
                inst += 1
    return out

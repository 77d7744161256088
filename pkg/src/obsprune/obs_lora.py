"""Joint structured pruning of a LoRA pair ``(A: r x n, B: m x r)``.

One mask over the rank dimension removes columns of ``B`` and the matching
rows of ``A``. Given the mask the objective separates into a ``B`` problem
(column pruning with ``H_B``) and an ``A`` problem, which is the same column
problem on ``A^T`` with ``H_A``. Both factors therefore reuse the full-matrix
machinery.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .hessian import HessianEstimate, hessian_from_gradient_cols, hessian_from_gradient_rows
from .matcore import DimensionError, PruneMask, as_matrix, format_matrix, parse_matrix
from .obs_full import (
    PruneCandidate,
    batch_saliency,
    constrained_delta,
    run_search,
    saliency_full,
)
from .report import PruneReportEntry

COMPACTION_TOL = 1e-10


class ContractViolation(RuntimeError):
    pass


@dataclass(frozen=True)
class LoraAdapter:
    A: np.ndarray
    B: np.ndarray
    alpha: float

    def __post_init__(self):
        A = as_matrix(self.A, "A")
        B = as_matrix(self.B, "B")
        if A.shape[0] != B.shape[1]:
            raise DimensionError(f"A has {A.shape[0]} rows but B has {B.shape[1]} columns")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "alpha", float(self.alpha))

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def delta_weight(self) -> np.ndarray:
        """Effective update ``(alpha / r) B A``."""
        return self.scaling * (self.B @ self.A)


@dataclass(frozen=True)
class LoraObsSolution:
    mask: PruneMask
    delta_A: np.ndarray
    delta_B: np.ndarray
    saliency: float


def lora_hessians(G_A, G_B, lam: float | None = None, lam_B: float | None = None):
    """``(H_A, H_B)``: row correlations of ``A`` from ``G_A`` and column correlations of ``B``.

    ``lam`` damps both unless ``lam_B`` is given separately; ``None`` means
    relative damping.
    """
    H_A = hessian_from_gradient_rows(G_A, lam)
    H_B = hessian_from_gradient_cols(G_B, lam if lam_B is None else lam_B)
    return H_A, H_B


def _check(adapter: LoraAdapter, G_A, G_B, H_A: HessianEstimate, H_B: HessianEstimate):
    G_A = as_matrix(G_A, "G_A")
    G_B = as_matrix(G_B, "G_B")
    r = adapter.rank
    if G_A.shape != adapter.A.shape or G_B.shape != adapter.B.shape:
        raise DimensionError("gradient shapes do not match the adapter")
    if H_A.matrix.shape != (r, r) or H_B.matrix.shape != (r, r):
        raise DimensionError(f"Hessians must be {r}x{r}")
    return G_A, G_B


def lora_shifts(adapter: LoraAdapter, G_A, G_B, H_A: HessianEstimate, H_B: HessianEstimate):
    """Newton-shifted factors ``(A - H_A^-1 G_A, B - G_B H_B^-1)``."""
    G_A, G_B = _check(adapter, G_A, G_B, H_A, H_B)
    return adapter.A - H_A.inverse @ G_A, adapter.B - G_B @ H_B.inverse


def saliency_lora(Atilde, Btilde, HinvA, HinvB, mask: PruneMask) -> float:
    return saliency_full(Btilde, HinvB, mask) + saliency_full(Atilde.T, HinvA, mask)


def select_mask_lora(adapter: LoraAdapter, grads, hessians, k: int, strategy=None) -> PruneCandidate:
    """Shared rank mask minimizing the summed B/A saliency."""
    G_A, G_B = grads
    H_A, H_B = hessians
    At, Bt = lora_shifts(adapter, G_A, G_B, H_A, H_B)
    AtT = At.T

    def score(masks):
        return batch_saliency(Bt, H_B.inverse, masks) + batch_saliency(AtT, H_A.inverse, masks)

    r = adapter.rank
    idx, val = run_search(score, r, k, strategy)
    return PruneCandidate(PruneMask.columns(idx, r), val)


def lora_obs_update(adapter: LoraAdapter, grads, hessians, mask: PruneMask) -> LoraObsSolution:
    G_A, G_B = grads
    H_A, H_B = hessians
    G_A, G_B = _check(adapter, G_A, G_B, H_A, H_B)
    if mask.host_dim != adapter.rank:
        raise DimensionError("mask must range over the adapter rank")
    At = adapter.A - H_A.inverse @ G_A
    Bt = adapter.B - G_B @ H_B.inverse
    delta_B = constrained_delta(Bt, G_B, H_B.inverse, adapter.B, mask)
    # A-problem is the column problem on A^T
    delta_A = constrained_delta(At.T, G_A.T, H_A.inverse, adapter.A.T, mask).T
    sal = saliency_lora(At, Bt, H_A.inverse, H_B.inverse, mask) if len(mask) else 0.0
    return LoraObsSolution(mask, delta_A, delta_B, sal)


def apply_solution(adapter: LoraAdapter, sol: LoraObsSolution) -> LoraAdapter:
    return replace(adapter, A=adapter.A + sol.delta_A, B=adapter.B + sol.delta_B)


def compact_rank(adapter: LoraAdapter, mask: PruneMask, alpha: float | None = None) -> LoraAdapter:
    """Physically drop the (already zeroed) rank indices in ``mask``.

    ``alpha`` is the scaling numerator for the compacted adapter; by default
    it is kept unchanged.
    """
    if mask.host_dim != adapter.rank:
        raise DimensionError("mask must range over the adapter rank")
    idx = mask.array()
    if len(idx):
        worst = max(np.max(np.abs(adapter.B[:, idx]), initial=0.0),
                    np.max(np.abs(adapter.A[idx, :]), initial=0.0))
        if worst > COMPACTION_TOL:
            raise ContractViolation(f"masked slices not zero (max |x| = {worst:.3e}); apply the update first")
    keep = mask.complement()
    if len(keep) == 0:
        raise ValueError("cannot remove every rank index")
    return LoraAdapter(A=adapter.A[keep, :].copy(), B=adapter.B[:, keep].copy(),
                       alpha=adapter.alpha if alpha is None else alpha)


def prune_adapter(adapter: LoraAdapter, grads, hessians, k: int, strategy=None,
                  alpha: float | None = None, step: int = 0):
    """Select, update and compact in one go; returns ``(adapter, entry)``."""
    cand = select_mask_lora(adapter, grads, hessians, k, strategy)
    sol = lora_obs_update(adapter, grads, hessians, cand.mask)
    updated = apply_solution(adapter, sol)
    G_A, G_B = grads
    H_A, H_B = hessians
    quad = (float(np.sum(G_B * sol.delta_B) + 0.5 * np.sum((sol.delta_B @ H_B.matrix) * sol.delta_B))
            + float(np.sum(G_A * sol.delta_A) + 0.5 * np.sum((H_A.matrix @ sol.delta_A) * sol.delta_A)))
    entry = PruneReportEntry(step=step, indices=cand.mask.indices, saliency=cand.saliency,
                             quad_objective=quad, axis="rank", host_dim=adapter.rank)
    return compact_rank(updated, cand.mask, alpha), entry


# ---------------------------------------------------------------- serialization

def format_adapter(adapter: LoraAdapter) -> str:
    return f"{adapter.rank} {adapter.alpha:.17g}\n" + format_matrix(adapter.A) + format_matrix(adapter.B)


def parse_adapter(text: str) -> LoraAdapter:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    header = lines[0].split()
    rank, alpha = int(header[0]), float(header[1])
    it = iter(lines[1:])
    A = parse_matrix(it)
    B = parse_matrix(it)
    if A.shape[0] != rank:
        raise ValueError(f"header rank {rank} != A rows {A.shape[0]}")
    return LoraAdapter(A=A, B=B, alpha=alpha)


def read_adapter(path) -> LoraAdapter:
    return parse_adapter(Path(path).read_text())


def write_adapter(path, adapter: LoraAdapter) -> None:
    Path(path).write_text(format_adapter(adapter))

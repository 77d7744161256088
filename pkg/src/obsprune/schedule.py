"""Training loop that shrinks an over-parameterized adapter while it trains.

Every ``k1`` optimizer steps the adapter loses ``k2`` rank indices (fewer on
the last event) until ``target_rank`` is reached; training then continues at
the final rank. A prune event runs, in order: gradient window mean ->
Hessians -> mask -> weight update -> compaction -> alpha rescale ->
optimizer-state slicing.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .baselines import (
    activation_obs_prune,
    column_aggregate,
    importance_scores,
    magnitude_scores,
    smallest_k,
    wanda_scores,
)
from .hessian import GradientAccumulator, relative_damping
from .matcore import PruneMask
from .obs_lora import LoraAdapter, compact_rank, lora_hessians, prune_adapter
from .report import PruneReportEntry
from .toymodels import LoraModel, lora_backward, lora_forward

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# rank axis of each adapter factor
RANK_AXIS = {"A": 0, "B": 1}


class AlphaPolicy(enum.Enum):
    FIXED = "fixed"
    PROPORTIONAL_HALF = "half"
    PROPORTIONAL = "proportional"
    PROPORTIONAL_DOUBLE = "double"


class OptimizerKind(enum.Enum):
    PLAIN_SGD = "sgd"
    ADAPTIVE_MOMENTS = "adam"


class DampingMode(enum.Enum):
    RELATIVE = "relative"
    ABSOLUTE = "absolute"


@dataclass(frozen=True)
class ScheduleConfig:
    k1: int = 10
    k2: int = 2
    target_rank: int = 64
    total_steps: int = 400
    alpha_policy: AlphaPolicy = AlphaPolicy.PROPORTIONAL
    fixed_alpha: float = 16.0
    learning_rate: float = 1e-2
    optimizer_kind: OptimizerKind = OptimizerKind.ADAPTIVE_MOMENTS
    warmup_ratio: float = 0.03
    damping: float = 1e-2
    damping_mode: DampingMode = DampingMode.RELATIVE
    strategy: str | None = None
    window: int | None = None

    def __post_init__(self):
        if self.k1 < 1 or self.k2 < 1 or self.target_rank < 1 or self.total_steps < 1:
            raise ValueError("k1, k2, target_rank and total_steps must be >= 1")
        if not 0 <= self.warmup_ratio < 1:
            raise ValueError("warmup_ratio must be in [0, 1)")


def apply_alpha_policy(config: ScheduleConfig, new_rank: int) -> float:
    if new_rank < 1:
        raise ValueError("rank must be >= 1")
    return {
        AlphaPolicy.FIXED: config.fixed_alpha,
        AlphaPolicy.PROPORTIONAL_HALF: new_rank / 2,
        AlphaPolicy.PROPORTIONAL: float(new_rank),
        AlphaPolicy.PROPORTIONAL_DOUBLE: 2.0 * new_rank,
    }[config.alpha_policy]


def cosine_lr(step: int, total: int, base: float, warmup_ratio: float) -> float:
    """Learning rate for 1-based ``step`` with linear warmup then cosine decay to 0."""
    warm = math.ceil(warmup_ratio * total)
    if warm and step <= warm:
        return base * step / warm
    span = max(total - warm, 1)
    return 0.5 * base * (1.0 + math.cos(math.pi * (step - warm - 1) / span))


# ---------------------------------------------------------------- optimizer

@dataclass
class OptimizerState:
    kind: OptimizerKind
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def optimizer_step(state: OptimizerState, params: dict, grads: dict, lr: float):
    """One update of every parameter in ``grads``; returns ``(params, state)``."""
    new = dict(params)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise ArithmeticError(f"non-finite gradient for {name}")
    if state.kind is OptimizerKind.PLAIN_SGD:
        for name, g in grads.items():
            new[name] = params[name] - lr * g
        return new, state
    state.t += 1
    b1t = 1.0 - ADAM_BETA1 ** state.t
    b2t = 1.0 - ADAM_BETA2 ** state.t
    for name, g in grads.items():
        m = state.m.get(name, np.zeros_like(g))
        v = state.v.get(name, np.zeros_like(g))
        m = ADAM_BETA1 * m + (1 - ADAM_BETA1) * g
        v = ADAM_BETA2 * v + (1 - ADAM_BETA2) * g * g
        state.m[name], state.v[name] = m, v
        new[name] = params[name] - lr * (m / b1t) / (np.sqrt(v / b2t) + ADAM_EPS)
    return new, state


def slice_optimizer_state(state: OptimizerState, mask: PruneMask) -> OptimizerState:
    """Drop the moments of pruned rank indices; surviving entries are copied unchanged."""
    if not len(mask):
        return state
    keep = mask.complement()
    for moments in (state.m, state.v):
        for name, axis in RANK_AXIS.items():
            if name in moments:
                arr = moments[name]
                if arr.shape[axis] != mask.host_dim:
                    raise ValueError(f"{name} moments have {arr.shape[axis]} rank slots, mask expects {mask.host_dim}")
                moments[name] = np.take(arr, keep, axis=axis)
    return state


# ---------------------------------------------------------------- rank pruners

@dataclass
class PruneContext:
    model: LoraModel
    X: np.ndarray
    Y: np.ndarray
    G_A: np.ndarray
    G_B: np.ndarray
    config: ScheduleConfig
    step: int


def _damping(G: np.ndarray, cfg: ScheduleConfig, rows: bool) -> float:
    if cfg.damping_mode is DampingMode.ABSOLUTE:
        return cfg.damping
    gram = G @ G.T if rows else G.T @ G
    lam = relative_damping(gram, cfg.damping)
    return lam if lam > 0 else 1e-12


def _zero_and_compact(adapter: LoraAdapter, idx, alpha: float, B=None):
    B = adapter.B.copy() if B is None else B.copy()
    A = adapter.A.copy()
    B[:, list(idx)] = 0.0
    A[list(idx), :] = 0.0
    mask = PruneMask.columns(idx, adapter.rank)
    return compact_rank(LoraAdapter(A, B, adapter.alpha), mask, alpha), mask


def prune_rank_obs(ctx: PruneContext, k: int, alpha: float):
    """Gradient-based joint OBS on the adapter pair."""
    cfg = ctx.config
    hess = lora_hessians(ctx.G_A, ctx.G_B, _damping(ctx.G_A, cfg, rows=True),
                         _damping(ctx.G_B, cfg, rows=False))
    new, entry = prune_adapter(ctx.model.adapter, (ctx.G_A, ctx.G_B), hess, k, cfg.strategy,
                               alpha=alpha, step=ctx.step)
    return new, entry


def _rank_activations(ctx: PruneContext) -> np.ndarray:
    # rank-space features of the adapted layer, laid out rank x samples
    return ctx.model.adapter.A @ ctx.X.T


def prune_rank_activation_obs(ctx: PruneContext, k: int, alpha: float):
    ad = ctx.model.adapter
    U = _rank_activations(ctx)
    lam = relative_damping(U @ U.T, ctx.config.damping) or 1e-12
    mask, B_hat = activation_obs_prune(ad.B, U, k, lam=lam, strategy=ctx.config.strategy)
    new, _ = _zero_and_compact(ad, mask.indices, alpha, B=B_hat)
    return new, _entry(ctx, mask.indices)


def prune_rank_importance(ctx: PruneContext, k: int, alpha: float):
    model = ctx.model

    def loss_with_B(Bz):
        ad = LoraAdapter(model.adapter.A, Bz, model.adapter.alpha)
        return lora_forward(model.with_adapter(ad), ctx.X, ctx.Y)

    scores = importance_scores(loss_with_B, model.adapter.B)
    idx = smallest_k(scores, k)
    new, _ = _zero_and_compact(model.adapter, idx, alpha)
    return new, _entry(ctx, idx, float(np.sum(scores[list(idx)])))


def prune_rank_magnitude(ctx: PruneContext, k: int, alpha: float):
    ad = ctx.model.adapter
    score = column_aggregate(magnitude_scores(ad.B)) + column_aggregate(magnitude_scores(ad.A.T))
    idx = smallest_k(score, k)
    new, _ = _zero_and_compact(ad, idx, alpha)
    return new, _entry(ctx, idx, float(np.sum(score[list(idx)])))


def prune_rank_wanda(ctx: PruneContext, k: int, alpha: float):
    ad = ctx.model.adapter
    U = _rank_activations(ctx)
    # the rank activations already carry A, so scoring B's columns covers the pair
    score = column_aggregate(wanda_scores(ad.B, U))
    idx = smallest_k(score, k)
    new, _ = _zero_and_compact(ad, idx, alpha)
    return new, _entry(ctx, idx, float(np.sum(score[list(idx)])))


def _entry(ctx: PruneContext, idx, saliency: float = float("nan")) -> PruneReportEntry:
    return PruneReportEntry(step=ctx.step, indices=tuple(idx), saliency=saliency,
                            quad_objective=float("nan"), axis="rank", host_dim=ctx.model.rank)


RANK_PRUNERS = {
    "obs": prune_rank_obs,
    "activation_obs": prune_rank_activation_obs,
    "importance": prune_rank_importance,
    "magnitude": prune_rank_magnitude,
    "wanda": prune_rank_wanda,
}


# ---------------------------------------------------------------- loop

@dataclass(frozen=True)
class TrainRecord:
    step: int
    loss: float
    current_rank: int
    alpha: float
    event: PruneReportEntry | None = None


class ScheduleError(ValueError):
    pass


def _params(model: LoraModel) -> dict:
    p = {"A": model.adapter.A, "B": model.adapter.B}
    if model.train_head:
        p["W2"] = model.W2
    return p


def _with_params(model: LoraModel, params: dict) -> LoraModel:
    ad = LoraAdapter(params["A"], params["B"], model.adapter.alpha)
    out = model.with_adapter(ad)
    if "W2" in params:
        out = replace(out, W2=params["W2"])
    return out


def check_schedule(init_rank: int, config: ScheduleConfig) -> int:
    """Number of prune events; raises if the schedule cannot reach the target."""
    if init_rank < config.target_rank:
        raise ScheduleError(f"init rank {init_rank} below target {config.target_rank}")
    events = math.ceil((init_rank - config.target_rank) / config.k2)
    if events * config.k1 > config.total_steps:
        raise ScheduleError(
            f"{events} prune events every {config.k1} steps need {events * config.k1} steps, "
            f"only {config.total_steps} available")
    return events


def train(model: LoraModel, X, Y, config: ScheduleConfig, pruner: str | None = "obs",
          record_every: int = 1):
    """Run the schedule; ``pruner=None`` trains at fixed rank.

    Returns ``(model, records)``. Records are emitted every ``record_every``
    steps and always at prune events.
    """
    X = np.asarray(X, dtype=np.float64)
    prune_fn = RANK_PRUNERS[pruner] if pruner is not None else None
    if prune_fn is not None:
        check_schedule(model.rank, config)
    state = OptimizerState(config.optimizer_kind)
    acc_A = GradientAccumulator(config.window)
    acc_B = GradientAccumulator(config.window)
    records: list[TrainRecord] = []
    for step in range(1, config.total_steps + 1):
        loss, grads = lora_backward(model, X, Y)
        acc_A.add(grads["A"])
        acc_B.add(grads["B"])
        event = None
        if prune_fn is not None and step % config.k1 == 0 and model.rank > config.target_rank:
            k = min(config.k2, model.rank - config.target_rank)
            new_rank = model.rank - k
            ctx = PruneContext(model, X, Y, acc_A.mean(), acc_B.mean(), config, step)
            new_adapter, event = prune_fn(ctx, k, apply_alpha_policy(config, new_rank))
            mask = PruneMask.columns(event.indices, model.rank)
            model = model.with_adapter(new_adapter)
            slice_optimizer_state(state, mask)
            acc_A.reset()
            acc_B.reset()
            loss, grads = lora_backward(model, X, Y)
        lr = cosine_lr(step, config.total_steps, config.learning_rate, config.warmup_ratio)
        params, state = optimizer_step(state, _params(model), grads, lr)
        model = _with_params(model, params)
        if event is not None or step % record_every == 0 or step == config.total_steps:
            records.append(TrainRecord(step, loss, model.rank, model.adapter.alpha, event))
    return model, records


def run_dynamic_schedule(model: LoraModel, data, config: ScheduleConfig, pruner: str = "obs",
                         record_every: int = 1):
    """Train while pruning ``model`` down to ``config.target_rank``."""
    X, Y = data
    model, records = train(model, X, Y, config, pruner, record_every)
    if model.rank != config.target_rank:
        raise ScheduleError(f"schedule ended at rank {model.rank}, expected {config.target_rank}")
    return model, records


def scaling_delta(before: LoraAdapter, after: LoraAdapter, kept) -> np.ndarray:
    """Predicted change of the effective update from the alpha rescale alone.

    With the pruned slices already zero, ``B'A'`` equals ``BA``, so the only
    change comes from ``alpha/r``.
    """
    BA = before.B[:, kept] @ before.A[kept, :]
    return (after.scaling - before.scaling) * BA

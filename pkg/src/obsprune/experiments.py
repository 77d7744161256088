"""Seeded toy-task runs shared by the CLI and the acceptance suite."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .baselines import svd_truncate
from .obs_lora import LoraAdapter
from .schedule import (
    DampingMode,
    PruneContext,
    ScheduleConfig,
    apply_alpha_policy,
    prune_rank_obs,
    train,
)
from .toymodels import init_lora_model, lora_backward, lora_forward, make_teacher_task

DYNAMIC_PRUNERS = {
    "obs_dynamic": "obs",
    "activation_obs": "activation_obs",
    "importance_score": "importance",
    "magnitude": "magnitude",
    "wanda": "wanda",
}
STRATEGIES = tuple(DYNAMIC_PRUNERS) + ("obs_oneshot", "svd_truncate", "lora_fixed")

# toy-task defaults: 16 -> 4 with the gradient pruner's damping held absolute
TOY_CONFIG = ScheduleConfig(k1=5, k2=2, target_rank=4, total_steps=300, learning_rate=1e-2,
                            damping=1.0, damping_mode=DampingMode.ABSOLUTE)
TOY_INIT_RANK = 16
# teacher update of exactly the target rank, large enough to saturate tanh
TOY_TASK = dict(teacher_rank=4, update_scale=4.0, decay=0.8)


@dataclass(frozen=True)
class RunResult:
    strategy: str
    seed: int
    final_loss: float
    final_rank: int
    records: tuple = ()


def _init(task, rank: int, cfg: ScheduleConfig, seed: int):
    rng = np.random.default_rng(seed + 1_000_003)
    return init_lora_model(task, rank, apply_alpha_policy(cfg, rank), rng)


def run_strategy(strategy: str, seed: int, cfg: ScheduleConfig = TOY_CONFIG,
                 init_rank: int = TOY_INIT_RANK, task_kwargs: dict | None = None) -> RunResult:
    """Train one strategy on the seeded teacher task and report its final training loss."""
    task = make_teacher_task(seed, **(TOY_TASK if task_kwargs is None else task_kwargs))
    data = (task.X, task.Y)
    if strategy in DYNAMIC_PRUNERS:
        model, records = train(_init(task, init_rank, cfg, seed), *data, cfg, DYNAMIC_PRUNERS[strategy])
    elif strategy == "lora_fixed":
        model, records = train(_init(task, cfg.target_rank, cfg, seed), *data, cfg, None)
    elif strategy in ("obs_oneshot", "svd_truncate"):
        model, records = train(_init(task, init_rank, cfg, seed), *data, cfg, None)
        k = model.rank - cfg.target_rank
        new_alpha = apply_alpha_policy(cfg, cfg.target_rank)
        if strategy == "obs_oneshot":
            _, grads = lora_backward(model, *data)
            ctx = PruneContext(model, task.X, task.Y, grads["A"], grads["B"], cfg, cfg.total_steps)
            adapter, event = prune_rank_obs(ctx, k, new_alpha)
            records = tuple(records) + (replace(records[-1], current_rank=adapter.rank,
                                                alpha=adapter.alpha, event=event),)
        else:
            P, Q = svd_truncate(model.adapter.delta_weight(), cfg.target_rank)
            scale = new_alpha / cfg.target_rank
            adapter = LoraAdapter(A=Q, B=P / scale, alpha=new_alpha)
        model = model.with_adapter(adapter)
    else:
        raise KeyError(f"unknown strategy {strategy!r}")
    return RunResult(strategy, seed, lora_forward(model, *data), model.rank, tuple(records))


def compare(seeds, strategies=STRATEGIES, cfg: ScheduleConfig = TOY_CONFIG,
            init_rank: int = TOY_INIT_RANK, task_kwargs: dict | None = None) -> dict[str, list[RunResult]]:
    return {s: [run_strategy(s, seed, cfg, init_rank, task_kwargs) for seed in seeds] for s in strategies}

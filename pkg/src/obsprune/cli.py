"""``obsprune`` command line.

Every subcommand resolves its settings as flags > environment
(``OBSPRUNE_SEED``, ``OBSPRUNE_OUT_DIR``) > JSON config file > defaults,
echoes the resolved settings into the report header and writes the report
to ``<out_dir>/<command>.report`` unless ``--report`` names a path.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure,
4 oracle or bound check disagreement.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .checks import full_checks, oracle_suite
from .experiments import STRATEGIES, TOY_CONFIG, TOY_INIT_RANK, TOY_TASK, compare
from .hessian import hessian_from_gradient_cols
from .matcore import DimensionError, SingularityError, read_matrix, write_matrix
from .obs_full import SearchStrategy, prune_full_matrix
from .obs_lora import ContractViolation, format_adapter, lora_hessians, prune_adapter, read_adapter
from .report import Report
from .schedule import (
    AlphaPolicy,
    DampingMode,
    OptimizerKind,
    ScheduleConfig,
    ScheduleError,
    apply_alpha_policy,
    train,
)
from .toymodels import (
    attention_loss,
    init_lora_model,
    make_teacher_task,
    proposition_experiment,
    random_attention,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_DISAGREE = 4

ENV_VARS = {"seed": "OBSPRUNE_SEED", "out_dir": "OBSPRUNE_OUT_DIR"}

COMMON_DEFAULTS = {"seed": 0, "out_dir": ".", "report": None}

DEFAULTS = {
    "prune-matrix": {"w": None, "g": None, "k": None, "lambda": None, "strategy": None,
                     "oracle": False, "out": None},
    "prune-lora": {"adapter": None, "ga": None, "gb": None, "k": None, "lambda": None,
                   "strategy": None, "alpha": None, "out": None},
    "train": {"init_rank": TOY_INIT_RANK, "target_rank": TOY_CONFIG.target_rank, "k1": TOY_CONFIG.k1,
              "k2": TOY_CONFIG.k2, "alpha_policy": TOY_CONFIG.alpha_policy.value,
              "fixed_alpha": TOY_CONFIG.fixed_alpha, "total_steps": TOY_CONFIG.total_steps,
              "lr": TOY_CONFIG.learning_rate, "optimizer": TOY_CONFIG.optimizer_kind.value,
              "damping": TOY_CONFIG.damping, "damping_mode": TOY_CONFIG.damping_mode.value,
              "pruner": "obs", "seeds": None, "record_every": 1},
    "compare": {"seeds": 5, "strategies": ",".join(STRATEGIES)},
    "attention-bound": {"trials": 100, "d": 4, "d_model": 4, "tokens": 8, "epsilon": 1e-2},
    "oracle-check": {"trials": 100, "max_n": 7},
}


class ConfigError(ValueError):
    pass


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with default settings")
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--report", help="report path (default <out_dir>/<command>.report)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="obsprune", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prune-matrix", help="structured column pruning of one matrix")
    _add_common(p)
    p.add_argument("--w", help="weight matrix file")
    p.add_argument("--g", help="gradient matrix file")
    p.add_argument("--k", type=int, help="columns to remove")
    p.add_argument("--lambda", dest="lambda", type=float, help="absolute damping (default: relative)")
    p.add_argument("--strategy", choices=[s.value for s in SearchStrategy])
    p.add_argument("--oracle", action="store_true", default=None, help="cross-check against enumeration")
    p.add_argument("--out", help="pruned matrix path")

    p = sub.add_parser("prune-lora", help="one-shot rank pruning of an adapter")
    _add_common(p)
    p.add_argument("--adapter")
    p.add_argument("--ga", help="gradient of A")
    p.add_argument("--gb", help="gradient of B")
    p.add_argument("--k", type=int)
    p.add_argument("--lambda", dest="lambda", type=float)
    p.add_argument("--strategy", choices=[s.value for s in SearchStrategy])
    p.add_argument("--alpha", type=float, help="alpha of the compacted adapter (default: unchanged)")
    p.add_argument("--out", help="pruned adapter path")

    p = sub.add_parser("train", help="dynamic pruning schedule on the toy task")
    _add_common(p)
    p.add_argument("--init-rank", dest="init_rank", type=int)
    p.add_argument("--target-rank", dest="target_rank", type=int)
    p.add_argument("--k1", type=int)
    p.add_argument("--k2", type=int)
    p.add_argument("--alpha-policy", dest="alpha_policy", choices=[a.value for a in AlphaPolicy])
    p.add_argument("--fixed-alpha", dest="fixed_alpha", type=float)
    p.add_argument("--total-steps", dest="total_steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--optimizer", choices=[o.value for o in OptimizerKind])
    p.add_argument("--damping", type=float)
    p.add_argument("--damping-mode", dest="damping_mode", choices=["relative", "absolute"])
    p.add_argument("--pruner", help="obs, activation_obs, importance, magnitude, wanda or none")
    p.add_argument("--seeds", help="comma-separated seeds (default: --seed)")
    p.add_argument("--record-every", dest="record_every", type=int)

    p = sub.add_parser("compare", help="strategy comparison table on the toy task")
    _add_common(p)
    p.add_argument("--seeds", type=int, help="number of consecutive seeds starting at --seed")
    p.add_argument("--strategies", help="comma-separated subset of " + ",".join(STRATEGIES))

    p = sub.add_parser("attention-bound", help="perturbation-budget bounds on toy attention")
    _add_common(p)
    p.add_argument("--trials", type=int)
    p.add_argument("--d", type=int)
    p.add_argument("--d-model", dest="d_model", type=int)
    p.add_argument("--tokens", type=int)
    p.add_argument("--epsilon", type=float)

    p = sub.add_parser("oracle-check", help="pruners against brute-force enumeration")
    _add_common(p)
    p.add_argument("--trials", type=int)
    p.add_argument("--max-n", dest="max_n", type=int)
    return parser


def resolve_config(command: str, args: argparse.Namespace, environ=None) -> dict:
    environ = os.environ if environ is None else environ
    cfg = dict(COMMON_DEFAULTS)
    cfg.update(DEFAULTS[command])
    if getattr(args, "config", None):
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config file {args.config}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = set(loaded) - set(cfg)
        if unknown:
            raise ConfigError(f"unknown config keys for {command}: {sorted(unknown)}")
        cfg.update(loaded)
    for key, var in ENV_VARS.items():
        if var in environ:
            cfg[key] = environ[var]
    for key in cfg:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    try:
        cfg["seed"] = int(cfg["seed"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"seed must be an integer, got {cfg['seed']!r}") from exc
    return cfg


def _require(cfg: dict, *keys) -> None:
    missing = [k for k in keys if cfg.get(k) is None]
    if missing:
        raise ConfigError("missing required setting(s): " + ", ".join(missing))


def _positive_k(cfg: dict, upper: int, what: str) -> int:
    k = int(cfg["k"])
    if not 0 < k < upper:
        raise ConfigError(f"k must satisfy 0 < k < {upper} ({what}), got {k}")
    return k


def _read(path, what: str) -> np.ndarray:
    try:
        return read_matrix(path)
    except OSError as exc:
        raise ConfigError(f"cannot read {what} matrix {path}: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"cannot parse {what} matrix {path}: {exc}") from exc


def _out_path(cfg: dict, key: str, default_name: str) -> Path:
    return Path(cfg[key]) if cfg.get(key) else Path(cfg["out_dir"]) / default_name


# ---------------------------------------------------------------- commands

def cmd_prune_matrix(cfg: dict, report: Report) -> int:
    _require(cfg, "w", "g", "k")
    W = _read(cfg["w"], "weight")
    G = _read(cfg["g"], "gradient")
    if W.shape != G.shape:
        raise ConfigError(f"W {W.shape} and G {G.shape} differ in shape")
    k = _positive_k(cfg, W.shape[1], "columns")
    strategy = cfg["strategy"]
    H = hessian_from_gradient_cols(G, cfg["lambda"])
    report.notes.append(f"lambda_used={H.lam!r}")
    W_new, entry = prune_full_matrix(W, G, H, k, strategy)
    report.add_prune(entry)
    status = EXIT_OK
    if cfg["oracle"]:
        checks = full_checks(0, W, G, H, k)
        for c in checks:
            report.add("oracle", c.record())
        agree = all(c.ok for c in checks)
        report.add("metric", ["oracle_agreement", agree])
        if not agree:
            status = EXIT_DISAGREE
    out = _out_path(cfg, "out", "pruned.txt")
    write_matrix(out, W_new)
    report.notes.append(f"output={out}")
    return status


def cmd_prune_lora(cfg: dict, report: Report) -> int:
    _require(cfg, "adapter", "ga", "gb", "k")
    try:
        adapter = read_adapter(cfg["adapter"])
    except (OSError, ValueError, IndexError, StopIteration) as exc:
        raise ConfigError(f"cannot read adapter {cfg['adapter']}: {exc}") from exc
    G_A = _read(cfg["ga"], "A-gradient")
    G_B = _read(cfg["gb"], "B-gradient")
    if G_A.shape != adapter.A.shape or G_B.shape != adapter.B.shape:
        raise ConfigError("gradient shapes do not match the adapter")
    k = _positive_k(cfg, adapter.rank, "rank indices")
    hess = lora_hessians(G_A, G_B, cfg["lambda"])
    new, entry = prune_adapter(adapter, (G_A, G_B), hess, k, cfg["strategy"], alpha=cfg["alpha"])
    report.add_prune(entry)
    out = _out_path(cfg, "out", "pruned_adapter.txt")
    out.write_text(format_adapter(new))
    report.notes.append(f"output={out}")
    return EXIT_OK


def _schedule_config(cfg: dict) -> ScheduleConfig:
    try:
        return ScheduleConfig(
            k1=int(cfg["k1"]), k2=int(cfg["k2"]), target_rank=int(cfg["target_rank"]),
            total_steps=int(cfg["total_steps"]), alpha_policy=AlphaPolicy(cfg["alpha_policy"]),
            fixed_alpha=float(cfg["fixed_alpha"]), learning_rate=float(cfg["lr"]),
            optimizer_kind=OptimizerKind(cfg["optimizer"]), warmup_ratio=TOY_CONFIG.warmup_ratio,
            damping=float(cfg["damping"]), damping_mode=DampingMode(cfg["damping_mode"]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _seed_list(cfg: dict) -> list[int]:
    raw = cfg["seeds"]
    if raw is None:
        return [cfg["seed"]]
    if isinstance(raw, (list, tuple)):
        return [int(s) for s in raw]
    try:
        return [int(s) for s in str(raw).split(",") if s.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad seed list {raw!r}") from exc


def cmd_train(cfg: dict, report: Report) -> int:
    sched = _schedule_config(cfg)
    pruner = None if str(cfg["pruner"]).lower() == "none" else cfg["pruner"]
    init_rank = int(cfg["init_rank"])
    every = int(cfg["record_every"])
    if every < 1:
        raise ConfigError("record_every must be >= 1")
    for seed in _seed_list(cfg):
        task = make_teacher_task(seed, **TOY_TASK)
        rng = np.random.default_rng(seed + 1_000_003)
        model = init_lora_model(task, init_rank, apply_alpha_policy(sched, init_rank), rng)
        try:
            _, records = train(model, task.X, task.Y, sched, pruner, every)
        except KeyError as exc:
            raise ConfigError(f"unknown pruner {pruner!r}") from exc
        except ScheduleError as exc:
            raise ConfigError(str(exc)) from exc
        for rec in records:
            report.add("train", [seed, rec.step, rec.loss, rec.current_rank, rec.alpha,
                                 "prune" if rec.event is not None else ""])
            if rec.event is not None:
                report.add_prune(rec.event)
    return EXIT_OK


def compare_report(cfg: dict, report: Report) -> None:
    n = int(cfg["seeds"])
    if n < 1:
        raise ConfigError("seeds must be >= 1")
    strategies = [s.strip() for s in str(cfg["strategies"]).split(",") if s.strip()]
    unknown = [s for s in strategies if s not in STRATEGIES]
    if unknown:
        raise ConfigError(f"unknown strategies {unknown}; choose from {list(STRATEGIES)}")
    seeds = list(range(cfg["seed"], cfg["seed"] + n))
    results = compare(seeds, strategies)
    for name in strategies:
        losses = np.array([r.final_loss for r in results[name]])
        ranks = sorted({r.final_rank for r in results[name]})
        report.add("summary", [name, n, float(np.median(losses)), float(losses.min()),
                               float(losses.max()), " ".join(str(r) for r in ranks)])
    for name in strategies:
        for r in results[name]:
            report.add("seed_result", [name, r.seed, r.final_loss, r.final_rank])


def cmd_compare(cfg: dict, report: Report) -> int:
    compare_report(cfg, report)
    return EXIT_OK


def cmd_attention_bound(cfg: dict, report: Report) -> int:
    trials, d, d_model, tokens = (int(cfg[k]) for k in ("trials", "d", "d_model", "tokens"))
    eps = float(cfg["epsilon"])
    if min(trials, d, d_model, tokens) < 1 or not eps > 0:
        raise ConfigError("trials, d, d_model, tokens must be >= 1 and epsilon > 0")
    rng = np.random.default_rng(cfg["seed"])
    attn = random_attention(rng, d_model, d)
    X = rng.normal(size=(tokens, d_model))
    Y = rng.normal(size=(tokens, d))
    results = proposition_experiment(attn, X, lambda a: attention_loss(a, X, Y), eps, trials, rng)
    ok = True
    for t in results:
        report.add("bound", [t.trial, "activation", t.activation_error, t.activation_bound, t.activation_ok])
        report.add("bound", [t.trial, "gradient_sequential", t.sequential_loss_change, t.gradient_bound,
                             t.gradient_ok])
        report.add("bound", [t.trial, "gradient_joint", t.joint_loss_change, t.gradient_bound,
                             t.joint_loss_change <= t.gradient_bound])
        ok = ok and t.activation_ok and t.gradient_ok
    report.add("metric", ["all_bounds_hold", ok])
    return EXIT_OK if ok else EXIT_DISAGREE


def cmd_oracle_check(cfg: dict, report: Report) -> int:
    trials, max_n = int(cfg["trials"]), int(cfg["max_n"])
    if trials < 1 or not 3 <= max_n <= 10:
        raise ConfigError("trials must be >= 1 and max_n in [3, 10]")
    records = oracle_suite(trials, max_n, np.random.default_rng(cfg["seed"]))
    failed = [r for r in records if not r.ok]
    for r in failed:
        report.add("oracle", r.record())
    checks = sorted({r.check for r in records})
    for c in checks:
        vals = [r.value for r in records if r.check == c]
        report.add("metric", [f"{c}.count", len(vals)])
        report.add("metric", [f"{c}.worst", max(vals)])
    report.add("metric", ["failures", len(failed)])
    return EXIT_DISAGREE if failed else EXIT_OK


COMMANDS = {
    "prune-matrix": cmd_prune_matrix,
    "prune-lora": cmd_prune_lora,
    "train": cmd_train,
    "compare": cmd_compare,
    "attention-bound": cmd_attention_bound,
    "oracle-check": cmd_oracle_check,
}


def _report_path(command: str, cfg: dict) -> Path:
    return Path(cfg["report"]) if cfg.get("report") else Path(cfg["out_dir"]) / f"{command}.report"


def main(argv=None, environ=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    command = args.command
    try:
        cfg = resolve_config(command, args, environ)
        report = Report(command, {k: v for k, v in cfg.items() if k not in ("report", "out_dir")})
        Path(cfg["out_dir"]).mkdir(parents=True, exist_ok=True)
        status = COMMANDS[command](cfg, report)
    except (ConfigError, DimensionError, ContractViolation) as exc:
        print(f"obsprune {command}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SingularityError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"obsprune {command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"obsprune {command}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    path = _report_path(command, cfg)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.render())
    print(path)
    return status


if __name__ == "__main__":
    sys.exit(main())

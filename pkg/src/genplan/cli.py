"""Command-line entry points: gen-data, train, eval and plan-trace.

Configuration is a nested YAML file (see ``configs/``). Values resolve in the
order defaults < file < command line. Exit codes: 0 success, 2 config error,
3 runtime abort.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import yaml

from .gridworld import TaskFamily, expert_demo, load_dataset, serialize_dataset
from .gridworld.encode import N_CHANNELS
from .gridworld.tasks import N_INSTRUCTIONS, describe_instruction, generate_tasks, instance_key
from .net import ArchConfig, BCModel, CheckpointError, ParamStore, load_into, read_checkpoint, save_checkpoint
from .planner import PlanConfig, as_planner, bc_baseline_train, episode_streams, eval_tasks, evaluate, rollouts
from .train import FitResult, TrainConfig, build_model, examples_from_demos, fit

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
WORKERS_ENV = "GENPLAN_WORKERS"


class ConfigError(ValueError):
    pass


@dataclass
class FamilyConfig:
    kind: str = "TP"
    room_size: int = 4
    rows: int = 2
    n_obstacles: int = 0
    n_goals: int = 1
    variant: str = "maze"
    horizon: int = 20

    def build(self) -> TaskFamily:
        return TaskFamily(self.kind, self.room_size, self.rows, self.n_obstacles, self.n_goals, self.variant,
                          self.horizon)


@dataclass
class ModelConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    t_dim: int = 16
    obs_encoder: str = "conv"
    tied: bool = True


@dataclass
class DataConfig:
    n_demos: int = 2000
    corruption: float = 0.0


@dataclass
class EvalConfig:
    n_episodes: int = 100
    stochastic_p: float = 0.0
    oracle_goals: bool = False
    baseline: bool = False


@dataclass
class PathsConfig:
    dataset: str = "runs/demos.ndjson"
    checkpoint: str = "runs/genplan.ckpt"
    baseline_checkpoint: str = "runs/bc.ckpt"
    log: str = "runs/train_log.ndjson"
    report: str = "runs/report.json"


@dataclass
class RunConfig:
    seed: int = 0
    family: FamilyConfig = field(default_factory=FamilyConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    plan: PlanConfig = field(default_factory=PlanConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def arch(self) -> ArchConfig:
        fam = self.family.build()
        return ArchConfig(width=fam.size, height=fam.size, channels=N_CHANNELS, horizon=fam.horizon,
                          n_instructions=N_INSTRUCTIONS, ctx=self.plan.ctx, **asdict(self.model))

    def plan_config(self) -> PlanConfig:
        return self.plan

    def to_dict(self) -> dict:
        return asdict(self)

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


# --- parsing -------------------------------------------------------------------

def _line_map(node, prefix=(), out=None) -> dict:
    """Map dotted key paths to 1-based source lines from a composed YAML node."""
    out = {} if out is None else out
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            path = prefix + (str(k.value),)
            out[".".join(path)] = k.start_mark.line + 1
            _line_map(v, path, out)
    return out


def _coerce(value, current, where: str):
    if current is None or value is None:
        return value
    if isinstance(current, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "yes", "no", "1", "0"):
            return value.lower() in ("true", "yes", "1")
        raise ConfigError(f"{where}: expected a boolean, got {value!r}")
    for typ in (int, float, str):
        if isinstance(current, typ):
            if typ is int and isinstance(value, float) and not value.is_integer():
                raise ConfigError(f"{where}: expected an integer, got {value!r}")
            try:
                return typ(value)
            except (TypeError, ValueError):
                raise ConfigError(f"{where}: expected {typ.__name__}, got {value!r}") from None
    return value


def _build(cls, data: dict, lines: dict, prefix: str = ""):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or 'config'}: expected a mapping")
    base = cls()
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        path = f"{prefix}{key}"
        where = f"line {lines[path]}: {path}" if path in lines else path
        if key not in known:
            raise ConfigError(f"{where}: unknown field")
        current = getattr(base, key)
        if dataclasses.is_dataclass(current):
            kwargs[key] = _build(type(current), value or {}, lines, f"{path}.")
        else:
            kwargs[key] = _coerce(value, current, where)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{prefix.rstrip('.') or 'config'}: {e}") from None


def _set_path(tree: dict, dotted: str, raw: str) -> None:
    *parents, leaf = dotted.split(".")
    node = tree
    for p in parents:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"{dotted}: {p} is not a section")
    node[leaf] = yaml.safe_load(raw)


def parse_config(text: str = "", overrides=()) -> RunConfig:
    """Parse YAML text, then apply ``key.path=value`` overrides (command line wins)."""
    try:
        node = yaml.compose(text) if text.strip() else None
        tree = yaml.safe_load(text) if text.strip() else {}
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        loc = f"line {mark.line + 1}: " if mark is not None else ""
        raise ConfigError(f"{loc}invalid YAML ({getattr(e, 'problem', e)})") from None
    tree = tree or {}
    if not isinstance(tree, dict):
        raise ConfigError("config: top level must be a mapping")
    lines = _line_map(node) if node is not None else {}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r}: expected key.path=value")
        k, v = item.split("=", 1)
        _set_path(tree, k.strip(), v)
        lines.pop(k.strip(), None)
    # the plan horizon follows the family unless given explicitly (then it must agree)
    fam, plan_sec = tree.get("family") or {}, tree.get("plan") or {}
    if isinstance(fam, dict) and isinstance(plan_sec, dict):
        tree["plan"] = {"horizon": fam.get("horizon", FamilyConfig.horizon), **plan_sec}
    cfg = _build(RunConfig, tree, lines)
    if cfg.plan.horizon != cfg.family.horizon:
        where = f"line {lines['plan.horizon']}: " if "plan.horizon" in lines else ""
        raise ConfigError(f"{where}plan.horizon ({cfg.plan.horizon}) must equal family.horizon "
                          f"({cfg.family.horizon})")
    # cross-section checks: the family and the architecture derived from it must be valid
    for section, check in (("family", cfg.family.build), ("model", cfg.arch), ("plan", cfg.plan_config)):
        try:
            check()
        except (TypeError, ValueError) as e:
            raise ConfigError(f"{section}: {e}") from None
    return cfg


def load_config(path: Optional[str], overrides=()) -> RunConfig:
    text = ""
    if path:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    return parse_config(text, overrides)


# --- commands --------------------------------------------------------------------

def _ensure_parent(path: str) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)


def cmd_gen_data(cfg: RunConfig) -> dict:
    fam = cfg.family.build().training_family()
    out = cfg.paths.dataset
    _ensure_parent(out)
    tasks = generate_tasks(fam, cfg.data.n_demos, cfg.seed)
    rng = np.random.default_rng([cfg.seed, 1])
    demos = [expert_demo(t.grid, t.agent, t.mission, t.instruction_id, rng, corruption=cfg.data.corruption)
             for t in tasks]
    meta = {"family": fam.to_dict(), "seed": cfg.seed, "corruption": cfg.data.corruption}
    serialize_dataset(demos, out, meta)
    lengths = [len(d) for d in demos]
    summary = {"path": out, "n_demos": len(demos), "solvable": len(demos),
               "mean_length": float(np.mean(lengths)) if lengths else 0.0,
               "corrupted_fraction": (float(sum(len(d.corrupted_steps) for d in demos) / max(1, sum(lengths))))}
    print(f"wrote {summary['n_demos']} demonstrations to {out}: mean length {summary['mean_length']:.2f}, "
          f"solvable {summary['solvable']}/{summary['n_demos']}, "
          f"corrupted actions {summary['corrupted_fraction']:.3f}")
    return summary


def _header(cfg: RunConfig, kind: str, lam: float = 0.0) -> dict:
    return {"kind": kind, "arch": cfg.arch().to_dict(), "train": asdict(cfg.train), "lambda": lam,
            "family": asdict(cfg.family), "seed": cfg.seed}


def load_model(path: str, cfg: Optional[RunConfig] = None):
    """Rebuild a model from a checkpoint; ``cfg`` (if given) must describe the same architecture."""
    header, arrays = read_checkpoint(path)
    arch = ArchConfig.from_dict(header["arch"])
    if cfg is not None and cfg.arch() != arch:
        raise CheckpointError(f"checkpoint/architecture mismatch: {path} holds {arch.to_dict()}, "
                              f"config asks for {cfg.arch().to_dict()}")
    model = BCModel(arch) if header.get("kind") == "bc" else build_model(arch, 0)
    store = ParamStore(model)
    load_into(store, arrays, header)
    model.eval()
    return model, store, header


def cmd_train(cfg: RunConfig, resume: bool = False, extra_iters: Optional[int] = None,
              baseline: bool = False) -> dict:
    path = cfg.paths.dataset
    if not Path(path).exists():
        raise FileNotFoundError(f"dataset not found: {path}")
    demos = load_dataset(path)
    arch = cfg.arch()
    data = examples_from_demos(demos, arch.horizon)
    out = cfg.paths.baseline_checkpoint if baseline else cfg.paths.checkpoint
    _ensure_parent(out)
    if baseline:
        model, store, log = bc_baseline_train(data, cfg.train, arch)
        save_checkpoint(out, store, _header(cfg, "bc"))
        print(f"trained BC baseline for {store.step} steps, final loss {log[-1]['loss']:.4f}; saved {out}")
        return {"checkpoint": out, "step": store.step}
    prior = None
    log_path = cfg.paths.log
    _ensure_parent(log_path)
    if resume:
        model, store, header = load_model(out, cfg)
        prior = FitResult(model, store, float(header.get("lambda", cfg.train.lambda0)))
    elif Path(log_path).exists():
        Path(log_path).unlink()
    res = fit(data, cfg.train, arch, log_path=log_path, resume=prior, extra_iters=extra_iters)
    save_checkpoint(out, res.store, _header(cfg, "genplan", res.lam))
    last = res.log[-1] if res.log else {}
    print(f"trained to step {res.store.step}: total={last.get('total', float('nan')):.4f} "
          f"lambda={res.lam:.4f} recovery={last.get('recovery', float('nan')):.3f}; saved {out}")
    return {"checkpoint": out, "step": res.store.step}


def _exclusion(cfg: RunConfig) -> Optional[set]:
    if not Path(cfg.paths.dataset).exists():
        return None
    return {instance_key(d) for d in load_dataset(cfg.paths.dataset)}


def cmd_eval(cfg: RunConfig) -> dict:
    ckpt = cfg.paths.baseline_checkpoint if cfg.eval.baseline else cfg.paths.checkpoint
    model, _, _ = load_model(ckpt, cfg)
    fam = cfg.family.build()
    rep = evaluate(model, fam, cfg.eval.n_episodes, cfg.plan_config(), cfg.seed,
                   stochastic=cfg.eval.stochastic_p, oracle_goals=cfg.eval.oracle_goals, exclude=_exclusion(cfg))
    _ensure_parent(cfg.paths.report)
    payload = rep.to_dict()
    payload["run"] = cfg.to_dict()
    with open(cfg.paths.report, "w", encoding="utf-8") as f:
        json.dump(payload, f, sort_keys=True, indent=1)
        f.write("\n")
    print(rep.summary_row())
    return payload


def cmd_plan_trace(cfg: RunConfig, episode: int = 0) -> dict:
    """Roll out one evaluation episode and print each replan next to the executed trajectory."""
    ckpt = cfg.paths.baseline_checkpoint if cfg.eval.baseline else cfg.paths.checkpoint
    model, _, _ = load_model(ckpt, cfg)
    fam = cfg.family.build()
    n = episode + 1
    task = eval_tasks(fam, n, cfg.seed, _exclusion(cfg))[episode]
    _, plan_rng, env_rng, en_rng = episode_streams(cfg.seed, n)[episode]
    out = rollouts(as_planner(model), [task], cfg.plan_config(), [plan_rng], [env_rng], cfg.eval.stochastic_p,
                   cfg.eval.oracle_goals, track_energy=not cfg.eval.baseline, energy_rngs=[en_rng])[0]
    print(describe_instruction(task.instruction_id))
    print(task.grid.dump(task.agent))
    for i, acts in enumerate(out.action_plans):
        energy = f" energy={out.energies[i]:.3f}" if i < len(out.energies) else ""
        print(f"plan {i}: actions={acts} goals={out.goal_plans[i]}{energy}")
    print(f"executed: {out.actions}")
    print(f"success={out.success} steps={out.steps}")
    return out.to_dict()


# --- entry point ---------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="genplan", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML run configuration")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config field, e.g. train.max_iters=200")
        sp.add_argument("--seed", type=int)
        return sp

    g = common(sub.add_parser("gen-data", help="write expert demonstrations"))
    g.add_argument("--n_demos", type=int)
    g.add_argument("--corruption", type=float, help="fraction of corrupted expert decisions")
    g.add_argument("--out", help="dataset path")

    t = common(sub.add_parser("train", help="train a planner"))
    t.add_argument("--dataset")
    t.add_argument("--out", help="checkpoint path")
    t.add_argument("--resume", action="store_true", help="continue from the checkpoint at --out")
    t.add_argument("--extra_iters", type=int, help="iterations to add when resuming")
    t.add_argument("--interpolant", choices=("mask", "uniform"))
    t.add_argument("--baseline", action="store_true", help="train the BC baseline instead")

    for name, help_ in (("eval", "evaluate a checkpoint"), ("plan-trace", "trace one episode")):
        e = common(sub.add_parser(name, help=help_))
        e.add_argument("--checkpoint")
        e.add_argument("--dataset", help="training data; its instances are excluded")
        e.add_argument("--report", help="report path")
        e.add_argument("--n_episodes", type=int)
        e.add_argument("--baseline", action="store_true", help="use the BC baseline checkpoint")
        e.add_argument("--oracle_goals", action="store_true")
        e.add_argument("--stochastic_p", type=float)
        e.add_argument("--replan_mode", choices=("multi_step", "single_step", "multi", "single"))
        e.add_argument("--I_max", type=int)
        if name == "plan-trace":
            e.add_argument("--episode", type=int, default=0)
    return p


def _flag_overrides(args) -> list:
    o = []
    if args.seed is not None:
        o.append(f"seed={args.seed}")
    simple = {"n_demos": "data.n_demos", "corruption": "data.corruption", "n_episodes": "eval.n_episodes",
              "stochastic_p": "eval.stochastic_p", "interpolant": "train.interpolant", "I_max": "plan.I_max",
              "dataset": "paths.dataset", "report": "paths.report"}
    for attr, key in simple.items():
        v = getattr(args, attr, None)
        if v is not None:
            o.append(f"{key}={v}")
    if getattr(args, "replan_mode", None):
        o.append(f"plan.replan_mode={args.replan_mode if '_' in args.replan_mode else args.replan_mode + '_step'}")
    for flag in ("oracle_goals", "baseline"):
        if getattr(args, flag, False) and args.command in ("eval", "plan-trace"):
            o.append(f"eval.{flag}=true")
    baseline = getattr(args, "baseline", False)
    if args.command == "gen-data" and args.out:
        o.append(f"paths.dataset={args.out}")
    if args.command == "train" and args.out:
        o.append(f"paths.{'baseline_checkpoint' if baseline else 'checkpoint'}={args.out}")
    if args.command in ("eval", "plan-trace") and args.checkpoint:
        o.append(f"paths.{'baseline_checkpoint' if baseline else 'checkpoint'}={args.checkpoint}")
    return o


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = load_config(args.config, list(args.set) + _flag_overrides(args))
        workers = os.environ.get(WORKERS_ENV, "1")
        if not workers.isdigit() or int(workers) < 1:
            raise ConfigError(f"{WORKERS_ENV} must be a positive integer, got {workers!r}")
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    torch.set_num_threads(int(workers))
    try:
        if args.command == "gen-data":
            cmd_gen_data(cfg)
        elif args.command == "train":
            cmd_train(cfg, resume=args.resume, extra_iters=args.extra_iters, baseline=args.baseline)
        elif args.command == "eval":
            cmd_eval(cfg)
        else:
            cmd_plan_trace(cfg, args.episode)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ValueError, FloatingPointError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

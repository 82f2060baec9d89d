"""Command-line entry point: ``lt2 <command> [--config PATH] [--seed N] [--out DIR] [--format F]``."""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import analysis as an
from .diagnostics import residual_rms_trace
from .errors import ConfigError, LT2Error
from .mixers import MixerKind
from .model import BlockConfig, LoopedModel, LoopSchedule, save_checkpoint
from .tasks import gen_state_recall, tokenize_program
from .trainer import KdConfig, TrainConfig, kd_demo, train_synthetic


# -- configuration ------------------------------------------------------------------------------
@dataclass
class ModelConfig:
    block: BlockConfig = field(default_factory=lambda: BlockConfig(
        n_layers=2, d_model=64, n_heads=4, mixers=["gdn", "gdn"], vocab_size=32))
    schedule: LoopSchedule = field(default_factory=lambda: LoopSchedule(T=4))
    act: bool = False
    ponder_weight: float = 0.0


@dataclass
class TaskConfig:
    m: int = 8
    n: int = 8
    count: int = 100


@dataclass
class DiagnosticsConfig:
    enabled: bool = True
    seq_len: int = 64
    batch: int = 1


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    task: TaskConfig = field(default_factory=TaskConfig)
    optim: TrainConfig = field(default_factory=TrainConfig)
    diagnostics: DiagnosticsConfig = field(default_factory=DiagnosticsConfig)
    seed: int = 0
    out: str = "runs/default"

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        cfg = _build(cls, data, "")
        try:
            cfg.model.block.validate()
        except ConfigError as e:
            raise ConfigError(str(e).split(": ", 1)[-1], f"model.block.{e.path}") from None
        try:
            cfg.model.schedule.validate()
        except LT2Error as e:
            raise ConfigError(str(e), "model.schedule") from None
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"invalid JSON ({e.msg} at line {e.lineno})", str(path)) from None
        return cls.from_dict(data)

    def build_model(self) -> LoopedModel:
        m = self.model
        return LoopedModel(m.block, m.schedule, seed=self.seed, act=m.act, ponder_weight=m.ponder_weight)


_NESTED = {
    (RunConfig, "model"): ModelConfig, (RunConfig, "task"): TaskConfig,
    (RunConfig, "optim"): TrainConfig, (RunConfig, "diagnostics"): DiagnosticsConfig,
    (ModelConfig, "block"): BlockConfig, (ModelConfig, "schedule"): LoopSchedule,
}


def _check_type(value, default, path: str):
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, (list, tuple)):
        ok = isinstance(value, list)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"expected {type(default).__name__}, got {type(value).__name__}", path)
    return value


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError("expected an object", path or "<root>")
    proto = cls()
    known = {f.name for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        sub = f"{path}.{key}" if path else key
        if key not in known:
            raise ConfigError("unknown field", sub)
        nested = _NESTED.get((cls, key))
        if nested is not None:
            kwargs[key] = _build(nested, value, sub)
        else:
            kwargs[key] = _check_type(value, getattr(proto, key), sub)
    return cls(**kwargs)


# -- output helpers ---------------------------------------------------------------------------------
def _emit(args, name: str, text: str) -> None:
    if args.out:
        p = Path(args.out) / name
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(text)
        print(str(p))
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


def _table(args, stem: str, header, rows) -> None:
    if args.format == "json":
        _emit(args, f"{stem}.json", json.dumps([dict(zip(header, r)) if not isinstance(r, dict) else r
                                                 for r in rows], indent=1))
    else:
        _emit(args, f"{stem}.csv", an.to_csv(header, rows))


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


# -- commands --------------------------------------------------------------------------------------
def cmd_verify(args) -> int:
    from .verify import run_verify

    report = run_verify(seed=args.seed or 0, inject_fault=args.inject_fault)
    _emit(args, "verify.json", json.dumps(report, indent=1))
    return 0 if report["ok"] else 1


def cmd_cost(args) -> int:
    kinds = [MixerKind.parse(k) for k in args.kinds.split(",")] if args.kinds else list(MixerKind)
    Ls = [int(x) for x in args.L.split(",")]
    rows = an.cost_table(kinds, Ls, d=args.d, d_k=args.dk, d_v=args.dv, w=args.w, T=args.T,
                         N=args.N, batch=args.batch)
    _table(args, "cost", an.COST_HEADER, rows)
    return 0


def cmd_analyze_rf(args) -> int:
    rows = an.rf_table(args.pattern, args.L, args.w, list(range(1, args.T_max + 1)))
    _table(args, "receptive_field", an.RF_HEADER, rows)
    return 0


def cmd_gen_tasks(args) -> int:
    cfg = _config(args)
    m = args.m or cfg.task.m
    n = args.n if args.n is not None else cfg.task.n
    count = args.count or cfg.task.count
    lines = [gen_state_recall(m, n, cfg.seed * 1_000_003 + i).to_json() for i in range(count)]
    _emit(args, "tasks.jsonl", "\n".join(lines) + "\n")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.steps is not None:
        cfg.optim.steps = args.steps
    model = cfg.build_model()
    report = train_synthetic(model, cfg.optim, seed=cfg.seed,
                             log=(lambda s: print(s, file=sys.stderr)) if args.verbose else None)
    _emit(args, "report.json", report.to_json())
    if args.format == "csv" or args.out:
        _emit(args, "curves.csv", report.curves_csv())
    if args.out and args.checkpoint:
        save_checkpoint(model, Path(args.out) / "model")
    return 0


def cmd_diagnose(args) -> int:
    cfg = _config(args)
    if not cfg.diagnostics.enabled:
        raise ConfigError("diagnostics are disabled", "diagnostics.enabled")
    model = cfg.build_model()
    rng = np.random.default_rng(cfg.seed)
    ids = rng.integers(0, model.cfg.vocab_size, size=(cfg.diagnostics.batch, cfg.diagnostics.seq_len))
    _, trace = model(ids, capture=True)
    ut = residual_rms_trace(trace)
    _table(args, "trace", ut.HEADER, ut.rows())
    return 0


def cmd_kd_demo(args) -> int:
    cfg = _config(args)
    block = cfg.model.block
    rows = kd_demo(block, T=cfg.model.schedule.T, steps=args.steps, seed=cfg.seed,
                   kd=KdConfig(top_k=min(8, block.vocab_size)))
    _table(args, "kd", ("step", "kd_loss", "grad_norm", "weights"), rows)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lt2", description="Looped hybrid-mixer transformers: analysis and toy training.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, default=None, help="JSON run configuration")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", type=str, default=None, help="output directory (default: stdout)")
    common.add_argument("--format", choices=("csv", "json"), default="csv")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", parents=[common], help="run the invariant suites")
    p.add_argument("--inject-fault", default=None, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("cost", parents=[common], help="analytic FLOP/cache table")
    p.add_argument("--kinds", default=None, help="comma-separated mixer kinds (default: all)")
    p.add_argument("--L", default="1024,2048,4096,8192,16384,32768,65536")
    p.add_argument("--d", type=int, default=2048)
    p.add_argument("--dk", type=int, default=128)
    p.add_argument("--dv", type=int, default=128)
    p.add_argument("--w", type=int, default=512)
    p.add_argument("--T", type=int, default=4)
    p.add_argument("--N", type=int, default=1)
    p.add_argument("--batch", type=int, default=1)
    p.set_defaults(func=cmd_cost)

    p = sub.add_parser("analyze-rf", parents=[common], help="receptive-field sizes per loop count")
    p.add_argument("--pattern", choices=("window", "powerslash"), default="window")
    p.add_argument("--w", type=int, default=2)
    p.add_argument("--L", type=int, default=64)
    p.add_argument("--T-max", dest="T_max", type=int, default=8)
    p.set_defaults(func=cmd_analyze_rf)

    p = sub.add_parser("gen-tasks", parents=[common], help="write state-recall programs as JSONL")
    p.add_argument("--m", type=int, default=None)
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--count", type=int, default=None)
    p.set_defaults(func=cmd_gen_tasks)

    p = sub.add_parser("train", parents=[common], help="curriculum training on state recall")
    p.add_argument("--steps", type=int, default=None, help="override optim.steps")
    p.add_argument("--checkpoint", action="store_true", help="save the final weights under --out")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("diagnose", parents=[common], help="per-(loop, layer) trace of a forward pass")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("kd-demo", parents=[common], help="per-loop distillation on random tokens")
    p.add_argument("--steps", type=int, default=20)
    p.set_defaults(func=cmd_kd_demo)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except LT2Error as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

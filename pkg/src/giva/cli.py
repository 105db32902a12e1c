"""``giva`` command line: verify | train | bench | inspect.

Configuration is a flat JSON object whose keys are dotted field paths, for
example ``{"adapter.method": "giva", "adapter.rank": 4, "train.lr": 0.01}``.
Nested objects are accepted too and flattened to the same paths. Unknown
keys and invalid values raise :class:`ConfigError` naming the path.

Exit codes: 0 success, 1 check or validation failure, 2 I/O or integrity error.
"""

import argparse
import csv
import dataclasses
import json
import math
import os
import sys
import time
import types
import typing
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .adapters import AdapterConfig, attach_adapters, trainable_param_count
from .checkpoint import inspect_checkpoint, save_base, save_light
from .datasets import DatasetSpec
from .errors import ConfigError, ContractError, DivergenceError, GivaError, IntegrityError
from .gradprobe import estimate_first_step_gradient
from .nnmodel import frozen_tensors, linear_model, mlp
from .oracle import adapter_loss_floor, run_verify
from .trainer import TrainConfig, sweep, train


@dataclass
class ModelConfig:
    """``auto`` uses a linear layer at the teacher's ``W_pt`` for teacher-student
    tasks and a seeded MLP otherwise."""

    kind: str = "auto"
    hidden: list = field(default_factory=list)
    activation: str = "relu"
    bias: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("auto", "linear", "mlp"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.activation not in ("identity", "relu", "tanh"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if any(int(h) < 1 for h in self.hidden):
            raise ValueError("hidden widths must be positive")


@dataclass
class ProbeConfig:
    num_batches: int = 1
    batch_size: int | None = None  # None: the training batch size
    seed: int = 0

    def __post_init__(self):
        if self.num_batches < 1:
            raise ValueError("num_batches must be >= 1")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class BenchConfig:
    methods: list = field(default_factory=lambda: ["giva", "vera"])
    ranks: list = field(default_factory=lambda: [4, 32])
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])

    def __post_init__(self):
        if not self.methods or not self.ranks or not self.seeds:
            raise ValueError("bench needs at least one method, rank and seed")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    out: str = "runs/default"
    sweep: list | None = None

    def flat(self):
        out = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if dataclasses.is_dataclass(value):
                for k, v in asdict(value).items():
                    out[f"{f.name}.{k}"] = list(v) if isinstance(v, tuple) else v
            else:
                out[f.name] = value
        return out

    def with_seed(self, seed):
        """Copy with every seed field set to ``seed``."""
        return replace_paths(self, {"model.seed": seed, "dataset.seed": seed, "adapter.seed": seed,
                                    "train.seed": seed, "probe.seed": seed})


_SECTIONS = {"model": ModelConfig, "dataset": DatasetSpec, "adapter": AdapterConfig, "train": TrainConfig,
             "probe": ProbeConfig, "bench": BenchConfig}


def _flatten(obj, prefix=""):
    out = {}
    for key, value in obj.items():
        path = f"{prefix}{key}"
        if isinstance(value, dict) and key in _SECTIONS and not prefix:
            out.update(_flatten(value, path + "."))
        else:
            out[path] = value
    return out


def _coerce(path, value, hint):
    """Check ``value`` against a dataclass field annotation."""
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        errors = []
        for arg in args:
            if arg is type(None):
                continue
            try:
                return _coerce(path, value, arg)
            except ConfigError as exc:
                errors.append(exc.message)
        raise ConfigError(path, "; ".join(errors))
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected a boolean, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    if hint in (list, tuple) or origin in (list, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(path, f"expected a list, got {value!r}")
        return list(value) if hint is list or origin is list else tuple(value)
    return value


def replace_paths(cfg, updates):
    """New :class:`RunConfig` with dotted-path ``updates`` applied and validated."""
    sections = {name: asdict(getattr(cfg, name)) for name in _SECTIONS}
    adapter = sections["adapter"]
    if "adapter.alpha" not in updates and adapter["alpha"] == 2.0 * adapter["rank"]:
        adapter["alpha"] = None  # a defaulted alpha follows the rank
    top = {"out": cfg.out, "sweep": cfg.sweep}
    hints = {name: typing.get_type_hints(cls) for name, cls in _SECTIONS.items()}
    top_hints = typing.get_type_hints(RunConfig)
    for path, value in updates.items():
        head, _, rest = path.partition(".")
        if head in _SECTIONS and rest:
            if rest not in hints[head]:
                raise ConfigError(path, "unknown key")
            sections[head][rest] = _coerce(path, value, hints[head][rest])
        elif head in top and not rest:
            if path == "sweep" and value is not None:
                value = _coerce(path, value, list)
                if not value or any(isinstance(v, bool) or not isinstance(v, (int, float)) or v <= 0 for v in value):
                    raise ConfigError(path, "sweep must be a non-empty list of positive learning rates")
                value = [float(v) for v in value]
            elif path == "out":
                value = _coerce(path, value, top_hints["out"])
            top[path] = value
        else:
            raise ConfigError(path, "unknown key")
    built = {}
    for name, cls in _SECTIONS.items():
        try:
            built[name] = cls(**sections[name])
        except (ValueError, TypeError) as exc:
            raise ConfigError(name, str(exc)) from None
    return RunConfig(**built, **top)


def load_config(path=None, overrides=None):
    """Read a flat (or sectioned) JSON config; ``overrides`` wins over the file."""
    updates = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError("<file>", f"{path}: invalid JSON ({exc})") from None
        if not isinstance(raw, dict):
            raise ConfigError("<root>", "config must be a JSON object")
        updates.update(_flatten(raw))
    updates.update(overrides or {})
    return replace_paths(RunConfig(), updates)


# ---------------------------------------------------------------- runs


def build_task(cfg):
    """``(model, train, val, hidden)`` for a run config; the model is fresh each call."""
    train_set, val_set, hidden = cfg.dataset.build()
    kind = cfg.model.kind
    if kind == "auto":
        kind = "linear" if hidden is not None else "mlp"
    if kind == "linear":
        if hidden is None:
            raise ConfigError("model.kind", "a linear model needs a teacher-student dataset")
        return linear_model(hidden.W_pt.copy()), train_set, val_set, hidden
    d = train_set.inputs.shape[0]
    if train_set.is_classification:
        out, loss = int(max(train_set.targets.max(), val_set.targets.max())) + 1, "cross_entropy"
    else:
        out, loss = train_set.targets.shape[0], "mse"
    sizes = [d, *[int(h) for h in cfg.model.hidden], out]
    model = mlp(sizes, cfg.model.activation, loss, bias=cfg.model.bias, seed=cfg.model.seed)
    return model, train_set, val_set, hidden


def prepare(cfg):
    """Build the task, probe if needed and attach adapters."""
    model, train_set, val_set, hidden = build_task(cfg)
    probe = None
    if cfg.adapter.method == "giva":
        bs = cfg.probe.batch_size or cfg.train.batch_size
        probe = estimate_first_step_gradient(model, train_set, cfg.probe.num_batches, bs, cfg.probe.seed)
    states = attach_adapters(model, cfg.adapter, gradients=None if probe is None else probe.gradients)
    return model, states, train_set, val_set, hidden, probe


def _frozen_bytes(model):
    return {k: v.tobytes() for k, v in frozen_tensors(model).items()}


def run_once(cfg, lr=None, on_eval=None):
    """Train one configuration; returns a dict with the report, states and model."""
    if lr is not None:
        cfg = replace_paths(cfg, {"train.lr": lr})
    model, states, train_set, val_set, hidden, probe = prepare(cfg)
    before = _frozen_bytes(model)
    report = train(model, train_set, val_set, cfg.train, on_eval)
    if _frozen_bytes(model) != before:
        raise ContractError("a frozen tensor changed during training")
    floors = None
    if hidden is not None and len(states) == 1:
        (state,) = states.values()
        floors = adapter_loss_floor(hidden.delta, state.A, hidden.noise)
    return {"cfg": cfg, "report": report, "model": model, "states": states, "probe": probe, "floor": floors}


def run_with_sweep(cfg):
    """``run_once`` over ``cfg.sweep`` (or the configured lr); best validation loss wins."""
    lrs = cfg.sweep or [cfg.train.lr]
    runs = {}

    def one(lr):
        runs[lr] = run_once(cfg, lr)
        return runs[lr]["report"]

    best_lr, _, reports = sweep(one, lrs)
    result = runs[best_lr]
    result["sweep"] = {repr(lr): (None if rep is None else rep.best_val_loss) for lr, rep in reports.items()}
    result["lr"] = best_lr
    return result


def _seeds(cfg):
    return {"model": cfg.model.seed, "dataset": cfg.dataset.seed, "adapter": cfg.adapter.seed,
            "train": cfg.train.seed, "probe": cfg.probe.seed}


def _hyper(cfg):
    return {"rank": cfg.adapter.rank, "init": cfg.adapter.init, "d_initial": cfg.adapter.d_initial,
            "alpha": cfg.adapter.alpha}


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_train(cfg):
    os.makedirs(cfg.out, exist_ok=True)
    result = run_with_sweep(cfg)
    report, model, states = result["report"], result["model"], result["states"]
    with open(os.path.join(cfg.out, "metrics.jsonl"), "w", encoding="utf-8") as fh:
        fh.write(report.jsonl())
    base = save_base(os.path.join(cfg.out, "base"), model, states, _seeds(cfg), _hyper(cfg))
    light = save_light(os.path.join(cfg.out, "light"), model, states, report.best_params, _seeds(cfg), _hyper(cfg))
    _write_json(os.path.join(cfg.out, "config.json"), result["cfg"].flat())
    summary = report.summary()
    summary.update({
        "lr": result["lr"],
        "sweep": result["sweep"],
        "trainable_params": sum(trainable_param_count(s) for s in states.values()),
        "loss_floor": result["floor"],
        "probe": None if result["probe"] is None else result["probe"].summary(),
        "base_payload_bytes": base["payload_bytes"],
        "light_payload_bytes": light["payload_bytes"],
    })
    _write_json(os.path.join(cfg.out, "summary.json"), summary)
    return summary


BENCH_FIELDS = ["method", "rank", "seed", "lr", "final_val_loss", "best_val_loss", "trainable_params",
                "wall_time", "diverged"]


def bench_cell(cfg, method, rank, seed, out_dir=None):
    """One (method, rank, seed) cell; divergence is recorded, not raised."""
    cell = replace_paths(cfg.with_seed(seed), {"adapter.method": method, "adapter.rank": rank})
    row = {"method": method, "rank": rank, "seed": seed}
    start = time.perf_counter()
    try:
        result = run_with_sweep(cell)
    except DivergenceError:
        row.update(lr=math.nan, final_val_loss=math.nan, best_val_loss=math.nan, trainable_params=0,
                   wall_time=time.perf_counter() - start, diverged=True)
        return row
    report = result["report"]
    row.update(lr=result["lr"], final_val_loss=report.final_val_loss, best_val_loss=report.best_val_loss,
               trainable_params=sum(trainable_param_count(s) for s in result["states"].values()),
               wall_time=time.perf_counter() - start, diverged=False)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "metrics.jsonl"), "w", encoding="utf-8") as fh:
            fh.write(report.jsonl())
        _write_json(os.path.join(out_dir, "config.json"), result["cfg"].flat())
    return row


def average_rows(rows):
    """One ``seed="mean"`` row per (method, rank) over non-diverged cells."""
    groups = {}
    for row in rows:
        groups.setdefault((row["method"], row["rank"]), []).append(row)
    out = []
    for (method, rank), group in groups.items():
        ok = [r for r in group if not r["diverged"]]
        mean = (lambda k: float(np.mean([r[k] for r in ok])) if ok else math.nan)
        out.append({"method": method, "rank": rank, "seed": "mean", "lr": math.nan,
                    "final_val_loss": mean("final_val_loss"), "best_val_loss": mean("best_val_loss"),
                    "trainable_params": group[0]["trainable_params"] if ok else 0,
                    "wall_time": mean("wall_time"), "diverged": len(group) - len(ok)})
    return out


def cmd_bench(cfg, threads=1):
    cells = [(m, r, s) for m in cfg.bench.methods for r in cfg.bench.ranks for s in cfg.bench.seeds]

    def work(cell):
        m, r, s = cell
        return bench_cell(cfg, m, r, s, os.path.join(cfg.out, "cells", f"{m}_r{r}_s{s}"))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(work, cells))
    else:
        rows = [work(c) for c in cells]
    rows = rows + average_rows(rows)
    os.makedirs(cfg.out, exist_ok=True)
    with open(os.path.join(cfg.out, "bench.csv"), "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=BENCH_FIELDS)
        writer.writeheader()
        writer.writerows(rows)
    return rows


def cmd_verify(seed=0, perturb=0.0):
    checks = run_verify(seed=seed, perturb=perturb)
    ok = all(c["passed"] for c in checks if c["gating"])
    return {"passed": ok, "seed": seed, "perturb": perturb, "checks": checks}


# ---------------------------------------------------------------- entry point


def _threads(arg):
    if arg is not None:
        return arg
    env = os.environ.get("GIVA_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError("GIVA_THREADS", f"expected an integer, got {env!r}") from None
    return 1


def _parser():
    p = argparse.ArgumentParser(prog="giva", description="Gradient-initialized vector adapters at desk scale.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (flat dotted keys)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, help="seed applied to every seeded component")
    common.add_argument("--threads", type=int, help="worker threads (default: $GIVA_THREADS or 1)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=JSON",
                        help="override one config key, e.g. --set adapter.rank=4")
    sub = p.add_subparsers(dest="command", required=True)
    v = sub.add_parser("verify", parents=[common], help="run the oracle checks")
    v.add_argument("--perturb", type=float, default=0.0, help="perturb GiVA bases A by this amount (negative control)")
    sub.add_parser("train", parents=[common], help="train one adapter configuration")
    sub.add_parser("bench", parents=[common], help="method x rank x seed comparison")
    i = sub.add_parser("inspect", parents=[common], help="summarize a checkpoint")
    i.add_argument("checkpoint", help="path to a checkpoint manifest (.json) or stem")
    i.add_argument("--json", action="store_true", help="print the JSON summary only")
    return p


def _overrides(args):
    out = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(key, "--set expects KEY=VALUE")
        try:
            out[key] = json.loads(value)
        except json.JSONDecodeError:
            out[key] = value
    if args.out is not None:
        out["out"] = args.out
    return out


def _print_json(obj):
    print(json.dumps(obj, indent=2, sort_keys=True, default=str))


def main(argv=None):
    args = _parser().parse_args(argv)
    try:
        threads = _threads(args.threads)
        if args.command == "verify":
            seed = args.seed if args.seed is not None else 0
            result = cmd_verify(seed, args.perturb)
            if args.out:
                os.makedirs(args.out, exist_ok=True)
                _write_json(os.path.join(args.out, "verify.json"), result)
            _print_json(result)
            return 0 if result["passed"] else 1
        if args.command == "inspect":
            info = inspect_checkpoint(args.checkpoint)
            if not args.json:
                m = info["manifest"]
                print(f"{m['kind']} checkpoint, method {m['method']}, {len(m['tensors'])} tensors, "
                      f"{m['payload_bytes']} payload bytes, sha256 {m['content_hash'][:16]}")
                for name, entry in m["tensors"].items():
                    print(f"  {name:<24} shape {entry['shape']} sha256 {entry['sha256'][:16]}")
                for name, res in info["orthonormality_residuals"].items():
                    print(f"  orthonormality {name:<16} {res:.3e}")
            _print_json(info)
            return 0
        cfg = load_config(args.config, _overrides(args))
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        if args.command == "train":
            _print_json(cmd_train(cfg))
        else:
            rows = cmd_bench(cfg, threads)
            print(f"wrote {len(rows)} rows to {os.path.join(cfg.out, 'bench.csv')}")
        return 0
    except (IntegrityError, OSError) as exc:
        print(f"giva: error: {exc}", file=sys.stderr)
        return 2
    except (GivaError, ValueError) as exc:
        print(f"giva: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

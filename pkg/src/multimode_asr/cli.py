"""Command-line entry point: gen-data, train, sweep, sample-masks, latency.

Exit codes: 0 success, 1 usage/config error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np
import yaml

from .data import DatasetError, TaskSpec, gen_dataset, read_dataset, split_seed, write_dataset
from .evaluate import EvalReport, context_sweep
from .masking import latency_ms, parse_schedule, parse_spec, sample_schedule
from .model import CheckpointError, ModelConfig, Transducer, load_checkpoint, save_checkpoint
from .train import TrainConfig, TrainingDiverged, average_checkpoints, format_log, train, train_tag

SPLITS = ("train", "valid", "test")
DEFAULT_SCHEDULES = ["fixed:0", "fixed:1", "fixed:2", "full"]
OBJECTIVES = {"multi": [1.0, 1.0, 1.0], "baseline": [1.0, 0.0, 0.0]}


class UsageError(Exception):
    pass


def default_config() -> dict:
    train_defaults = {f.name: f.default for f in dataclasses.fields(TrainConfig) if f.name != "sampler"}
    train_defaults["sampler"] = "tied-uniform:0:2"
    train_defaults["weights"] = list(train_defaults["weights"])
    return {
        "seed": 0,
        "model": dataclasses.asdict(ModelConfig()),
        "task": dataclasses.asdict(TaskSpec()),
        "data": {"train": 2000, "valid": 200, "test": 200},
        "train": train_defaults,
        "sweep": {"schedules": list(DEFAULT_SCHEDULES), "split": "test", "max_symbols_per_frame": 4},
    }


def _merge(base: dict, update: dict, where: str = "") -> dict:
    for key, val in update.items():
        if key not in base:
            raise UsageError(f"unknown config key {where + key!r}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise UsageError(f"config key {where + key!r} must be a mapping")
            _merge(base[key], val, f"{where}{key}.")
        else:
            base[key] = val
    return base


def effective_config(args: argparse.Namespace) -> dict:
    cfg = default_config()
    if args.config:
        try:
            loaded = yaml.safe_load(Path(args.config).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(loaded, dict):
            raise UsageError("config file must hold a mapping")
        _merge(cfg, loaded)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if getattr(args, "sampler", None):
        cfg["train"]["sampler"] = args.sampler
    if getattr(args, "objective", None):
        cfg["train"]["weights"] = list(OBJECTIVES[args.objective])
    if getattr(args, "steps", None) is not None:
        cfg["train"]["steps"] = args.steps
    if getattr(args, "shift", None) is not None:
        cfg["train"]["s_shift"] = args.shift
    if getattr(args, "schedules", None):
        cfg["sweep"]["schedules"] = [s for s in args.schedules.split(",") if s.strip()]
    for split in SPLITS:
        n = getattr(args, f"n_{split}", None)
        if n is not None:
            cfg["data"][split] = n
    cfg["train"]["seed"] = cfg["seed"]
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def build_objects(cfg: dict) -> tuple[ModelConfig, TaskSpec, TrainConfig]:
    try:
        model_cfg = ModelConfig(**cfg["model"])
        task = TaskSpec(**cfg["task"])
        tcfg = dict(cfg["train"])
        tcfg["sampler"] = parse_spec(str(tcfg["sampler"]))
        tcfg["weights"] = tuple(float(w) for w in tcfg["weights"])
        train_cfg = TrainConfig(**tcfg)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None
    return model_cfg, task, train_cfg


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dump_config(out: Path, cfg: dict, name: str) -> str:
    digest = config_hash(cfg)
    body = yaml.safe_dump({"config_hash": digest, **cfg}, sort_keys=True)
    (out / name).write_text(body)
    return digest


def _load_split(data_dir: Path, split: str):
    path = data_dir / f"{split}.mmds"
    if not path.exists():
        raise UsageError(f"missing dataset {path}; run gen-data first")
    return read_dataset(path)


# ---------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    cfg = effective_config(args)
    _, task, _ = build_objects(cfg)
    out = _out_dir(args)
    _dump_config(out, cfg, "gen-data.config.yaml")
    for i, split in enumerate(SPLITS):
        utts = gen_dataset(task, int(cfg["data"][split]), split_seed(cfg["seed"], i))
        write_dataset(out / f"{split}.mmds", task, utts)
        print(f"{split}: {len(utts)} utterances -> {out / f'{split}.mmds'}")
    return 0


def cmd_train(args) -> int:
    cfg = effective_config(args)
    model_cfg, task, train_cfg = build_objects(cfg)
    out = _out_dir(args)
    data_dir = Path(args.data) if args.data else out
    spec_train, train_set = _load_split(data_dir, "train")
    _, valid_set = _load_split(data_dir, "valid")
    if (spec_train.F, spec_train.V) != (model_cfg.F, model_cfg.V):
        raise UsageError(f"dataset F/V {spec_train.F}/{spec_train.V} do not match model {model_cfg.F}/{model_cfg.V}")
    digest = _dump_config(out, cfg, "train.config.yaml")
    meta = {"meta": {"config_hash": digest, "seed": cfg["seed"], "train_tag": train_tag(train_cfg)}}
    records: list[dict] = []
    try:
        result = train(model_cfg, train_set, valid_set, train_cfg, on_step=records.append)
    except TrainingDiverged as exc:
        (out / "train.log").write_text(format_log([meta, *records]))
        print(f"error: {exc}", file=sys.stderr)
        return 2
    (out / "train.log").write_text(format_log([meta, *records]))
    for rank, ck in enumerate(result.checkpoints):
        save_checkpoint(out / f"best{rank}.ckpt", model_cfg, ck.params)
    final = average_checkpoints([ck.params for ck in result.checkpoints])
    save_checkpoint(out / "final.ckpt", model_cfg, final)
    steps = ", ".join(f"{ck.step} ({ck.valid_loss:.4f})" for ck in result.checkpoints)
    print(f"averaged best checkpoints at steps {steps} -> {out / 'final.ckpt'}")
    return 0


def cmd_sweep(args) -> int:
    cfg = effective_config(args)
    _, _, train_cfg = build_objects(cfg)
    out = _out_dir(args)
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "final.ckpt"
    if not ckpt.exists():
        raise UsageError(f"missing checkpoint {ckpt}")
    model_cfg, params = load_checkpoint(ckpt)
    schedules = []
    for text in cfg["sweep"]["schedules"]:
        try:
            schedules.append(parse_schedule(text, model_cfg.L_audio))
        except ValueError as exc:
            raise UsageError(f"bad schedule token {text!r}: {exc}") from None
    data_dir = Path(args.data) if args.data else out
    _, dataset = _load_split(data_dir, cfg["sweep"]["split"])
    report = context_sweep(
        Transducer(model_cfg), params, dataset, schedules, train_tag(train_cfg),
        train_cfg.sampler, train_cfg.teacher_branch, int(cfg["sweep"]["max_symbols_per_frame"]),
    )
    digest = _dump_config(out, cfg, "sweep.config.yaml")
    report.metadata = {
        "config_hash": digest,
        "seed": cfg["seed"],
        "checkpoint_sha256": hashlib.sha256(ckpt.read_bytes()).hexdigest()[:16],
        "split": cfg["sweep"]["split"],
    }
    (out / "report.txt").write_text(report.to_text())
    (out / "report.csv").write_text(report.to_csv())
    print(report.table(), end="")
    return 0


def _fmt_latency(ms: float) -> str:
    return "unbounded" if math.isinf(ms) else f"{ms:.1f}"


def cmd_sample_masks(args) -> int:
    text = args.spec or args.sampler
    if not text:
        raise UsageError("sample-masks needs a sampler spec")
    try:
        spec = parse_spec(text)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    rng = np.random.default_rng(0 if args.seed is None else args.seed)
    totals = []
    for _ in range(args.n):
        sched = sample_schedule(spec, args.layers, rng)
        total = sched.total()
        totals.append(total)
        shown = "full" if sched.is_full else "[" + " ".join(map(str, sched.per_layer)) + "]"
        lat = _fmt_latency(latency_ms(sched, args.frame_ms, args.downsample, args.frontend_frames))
        print(f"{shown}  C={'inf' if math.isinf(total) else int(total)}  latency_ms={lat}")
    finite = [t for t in totals if not math.isinf(t)]
    if finite:
        print(f"# n={len(totals)} mean_C={np.mean(finite):.4f} max_C={int(max(finite))}")
    return 0


def cmd_latency(args) -> int:
    try:
        sched = parse_schedule(args.schedule, args.layers)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    print(_fmt_latency(latency_ms(sched, args.frame_ms, args.downsample, args.frontend_frames)))
    return 0


# ---------------------------------------------------------------- parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", default="runs/default", help="output directory")

    frames = argparse.ArgumentParser(add_help=False)
    frames.add_argument("--layers", "-L", type=int, default=12, help="audio encoder layers")
    frames.add_argument("--frame-ms", type=float, default=10.0)
    frames.add_argument("--downsample", type=int, default=4)
    frames.add_argument("--frontend-frames", type=int, default=0)

    parser = _Parser(prog="multimode-asr", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", parents=[common], help="write train/valid/test datasets")
    for split in SPLITS:
        p.add_argument(f"--n-{split}", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train and average the best checkpoints")
    p.add_argument("--data", help="dataset directory (default: --out)")
    p.add_argument("--sampler", help="e.g. tied-uniform:0:2, constrained:12:2, fixed:1")
    p.add_argument("--objective", choices=sorted(OBJECTIVES), help="multi = stream+full+distill, baseline = stream only")
    p.add_argument("--steps", type=int)
    p.add_argument("--shift", type=int, help="distillation time shift in frames")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", parents=[common], help="error rate per inference context")
    p.add_argument("--data", help="dataset directory (default: --out)")
    p.add_argument("--checkpoint", help="checkpoint (default: OUT/final.ckpt)")
    p.add_argument("--schedules", help="comma-separated: fixed:0,fixed:1,layers:2-0-1-0,full")
    p.add_argument("--sampler", help="training sampler, for matched/mismatched marks")
    p.add_argument("--objective", choices=sorted(OBJECTIVES))
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("sample-masks", parents=[frames], help="draw context schedules")
    p.add_argument("spec", nargs="?")
    p.add_argument("--sampler")
    p.add_argument("-n", type=int, default=10)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_sample_masks)

    p = sub.add_parser("latency", parents=[frames], help="lookahead latency of a schedule")
    p.add_argument("schedule", help="fixed:c, full or layers:c1-c2-...")
    p.set_defaults(func=cmd_latency)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, DatasetError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

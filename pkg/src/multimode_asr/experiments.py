"""Desk-scale trend study: one multi-mode model against two fixed-context baselines."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .data import TaskSpec, gen_dataset, split_seed
from .evaluate import EvalReport, context_sweep
from .masking import Fixed, TiedUniform, parse_schedule
from .model import ModelConfig, Transducer
from .train import TrainConfig, average_checkpoints, train, train_tag

SWEEP = ("fixed:0", "fixed:1", "fixed:2", "full")


@dataclass
class StudyConfig:
    seeds: tuple[int, ...] = (0, 1, 2)
    n_train: int = 2000
    n_valid: int = 200
    n_test: int = 200
    model: ModelConfig = field(default_factory=ModelConfig)
    task: TaskSpec = field(default_factory=TaskSpec)
    multi: TrainConfig = field(default_factory=lambda: TrainConfig(sampler=TiedUniform(0, 2), s_shift=1))
    baseline: TrainConfig = field(default_factory=lambda: TrainConfig(weights=(1.0, 0.0, 0.0)))

    def runs(self) -> list[TrainConfig]:
        return [
            self.multi,
            replace(self.baseline, sampler=Fixed(0)),
            replace(self.baseline, sampler=Fixed(1)),
        ]


@dataclass
class StudyResult:
    reports: dict[int, EvalReport]  # per seed
    seconds: float

    def mean(self, tag: str, schedule: str) -> float:
        return float(np.mean([r.lookup(tag, schedule) for r in self.reports.values()]))

    def table(self) -> str:
        rows = []
        first = next(iter(self.reports.values()))
        for r in first.rows:
            rows.append(replace(r, error_rate=self.mean(r.train_tag, r.schedule)))
        return EvalReport(rows).table()


def run_seed(cfg: StudyConfig, seed: int, log=print) -> EvalReport:
    train_set = gen_dataset(cfg.task, cfg.n_train, split_seed(seed, 0))
    valid_set = gen_dataset(cfg.task, cfg.n_valid, split_seed(seed, 1))
    test_set = gen_dataset(cfg.task, cfg.n_test, split_seed(seed, 2))
    schedules = [parse_schedule(s, cfg.model.L_audio) for s in SWEEP]
    model = Transducer(cfg.model)
    report = EvalReport(metadata={"seed": seed})
    for run in cfg.runs():
        run = replace(run, seed=seed)
        t0 = time.perf_counter()
        result = train(cfg.model, train_set, valid_set, run)
        params = average_checkpoints([c.params for c in result.checkpoints])
        part = context_sweep(model, params, test_set, schedules, train_tag(run), run.sampler, run.teacher_branch)
        report.extend(part)
        rates = " ".join(f"{r.schedule}={100 * r.error_rate:.2f}%" for r in part.rows)
        log(f"seed {seed}  {train_tag(run):<24} {rates}  ({time.perf_counter() - t0:.0f}s)")
    return report


def run_study(cfg: StudyConfig | None = None, log=print) -> StudyResult:
    cfg = cfg or StudyConfig()
    t0 = time.perf_counter()
    reports = {seed: run_seed(cfg, seed, log) for seed in cfg.seeds}
    return StudyResult(reports, time.perf_counter() - t0)


def trend_checks(result: StudyResult, cfg: StudyConfig | None = None) -> dict[str, tuple[bool, str]]:
    """Seed-averaged qualitative trends; each entry is (passed, detail)."""
    cfg = cfg or StudyConfig()
    multi, base0, base1 = (train_tag(r) for r in cfg.runs())
    m = {c: result.mean(multi, f"fixed:{c}") for c in range(3)}
    b1_0, b1_1 = result.mean(base1, "fixed:0"), result.mean(base1, "fixed:1")
    b0_0 = result.mean(base0, "fixed:0")
    lo, hi = min(m.values()), max(m.values())
    ratio = hi / lo if lo > 0 else (1.0 if hi == 0 else float("inf"))
    return {
        "a": (b1_0 >= 2 * b1_1, f"Fixed(1) baseline c=0 {b1_0:.4f} vs 2 x c=1 {2 * b1_1:.4f}"),
        "b": (ratio <= 1.3, f"multi max/min over c=0..2 = {ratio:.3f} (limit 1.3)"),
        "c": (m[2] <= m[0], f"multi c=2 {m[2]:.4f} vs c=0 {m[0]:.4f}"),
        "d": (m[0] <= 1.25 * b0_0, f"multi c=0 {m[0]:.4f} vs 1.25 x Fixed(0) baseline {1.25 * b0_0:.4f}"),
    }

"""Multi-mode training loop, best-k checkpoint retention and averaging."""

from __future__ import annotations

import json
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tt
from .data import Utterance
from .losses import LossBundle, mode_pair_loss, transducer_nll
from .masking import ContextSchedule, FullContext, SamplerSpec, TiedUniform, format_spec, sample_schedule
from .model import ModelConfig, ParamSet, Transducer, clone_params
from .tensor import Tensor

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, last_finite: dict | None):
        super().__init__(f"non-finite loss at step {step}; last finite losses: {last_finite}")
        self.step = step
        self.last_finite = last_finite


@dataclass
class TrainConfig:
    sampler: SamplerSpec = field(default_factory=lambda: TiedUniform(0, 2))
    steps: int = 2000
    batch_size: int = 8
    warmup_steps: int = 200
    peak_lr: float = 2e-3
    decay: str = "hold-exp"  # or "inverse-sqrt"
    hold_steps: int = 500
    decay_rate: float = 0.05
    seed: int = 0
    s_shift: int = 0
    eval_every: int = 100
    keep_best_k: int = 3
    dropout: float = 0.1
    weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    clip_norm: float = 5.0

    def __post_init__(self):
        if self.steps <= 0 or self.warmup_steps < 0 or self.keep_best_k < 1:
            raise ValueError("need steps > 0, warmup_steps >= 0, keep_best_k >= 1")
        if self.decay not in ("hold-exp", "inverse-sqrt"):
            raise ValueError(f"unknown decay {self.decay!r}")

    @property
    def teacher_branch(self) -> bool:
        return self.weights[1] != 0 or self.weights[2] != 0


def learning_rate(cfg: TrainConfig, step: int) -> float:
    """``step`` is 1-based.  Linear warm-up, then hold + exponential or inverse-sqrt decay."""
    w = cfg.warmup_steps
    if w and step <= w:
        return cfg.peak_lr * step / w
    if cfg.decay == "inverse-sqrt":
        return cfg.peak_lr * math.sqrt(max(w, 1) / step)
    past = step - w - cfg.hold_steps
    if past <= 0:
        return cfg.peak_lr
    span = max(cfg.steps - w - cfg.hold_steps, 1)
    return cfg.peak_lr * cfg.decay_rate ** (past / span)


class Adam:
    def __init__(self, params: ParamSet, betas=(0.9, 0.98), eps: float = 1e-9):
        self.params = params
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float, clip_norm: float | None = None) -> float:
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in self.params.items()}
        norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        factor = clip_norm / norm if clip_norm and norm > clip_norm else 1.0
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            g = grads[k] * factor
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            p.data -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
        return norm


def bucket_by_length(utterances: list[Utterance]) -> dict[int, list[Utterance]]:
    """Same token count means same frame count, so batches need no padding."""
    buckets: dict[int, list[Utterance]] = defaultdict(list)
    for utt in sorted(utterances, key=lambda u: u.id):
        buckets[len(utt.tokens)].append(utt)
    return dict(sorted(buckets.items()))


def collate(batch: list[Utterance]) -> tuple[np.ndarray, np.ndarray]:
    feats = np.stack([u.features for u in batch]).astype(np.float64)
    tokens = np.stack([u.tokens for u in batch])
    return feats, tokens


class Batcher:
    def __init__(self, utterances: list[Utterance], batch_size: int, rng: np.random.Generator):
        self.buckets = list(bucket_by_length(utterances).values())
        if not self.buckets:
            raise ValueError("no training utterances")
        sizes = np.array([len(b) for b in self.buckets], dtype=np.float64)
        self.probs = sizes / sizes.sum()
        self.batch_size = batch_size
        self.rng = rng

    def next(self) -> tuple[np.ndarray, np.ndarray]:
        bucket = self.buckets[self.rng.choice(len(self.buckets), p=self.probs)]
        n = min(self.batch_size, len(bucket))
        pick = self.rng.choice(len(bucket), size=n, replace=False)
        return collate([bucket[i] for i in sorted(pick)])


def validation_schedule(cfg: TrainConfig, n_layers: int) -> ContextSchedule:
    """Full context when the teacher branch is trained, else a draw from the sampler."""
    if cfg.teacher_branch or isinstance(cfg.sampler, FullContext):
        return ContextSchedule.full(n_layers)
    return sample_schedule(cfg.sampler, n_layers, np.random.default_rng(cfg.seed))


def corpus_loss(model: Transducer, params: ParamSet, utterances: list[Utterance],
                schedule: ContextSchedule, batch_size: int = 64) -> float:
    total, count = 0.0, 0
    with tt.no_grad():
        for bucket in bucket_by_length(utterances).values():
            for i in range(0, len(bucket), batch_size):
                feats, tokens = collate(bucket[i:i + batch_size])
                nll = transducer_nll(model.forward(params, feats, tokens, schedule), tokens)
                total += float(nll.data.sum())
                count += len(tokens)
    return total / max(count, 1)


@dataclass
class Checkpoint:
    step: int
    valid_loss: float
    params: ParamSet


@dataclass
class TrainResult:
    checkpoints: list[Checkpoint]  # best first
    log: list[dict]
    last: ParamSet


def log_record(step: int, bundle: LossBundle, lr: float) -> dict:
    return {"step": step, **bundle.values(), "schedule": bundle.schedule_used.encode(), "lr": lr}


def format_log(records: list[dict]) -> str:
    return "".join(json.dumps(r, sort_keys=False) + "\n" for r in records)


def train(model_cfg: ModelConfig, train_set: list[Utterance], valid_set: list[Utterance],
          cfg: TrainConfig, on_step=None) -> TrainResult:
    init_seq, batch_seq, sched_seq, drop_seq = np.random.SeedSequence(cfg.seed).spawn(4)
    model = Transducer(model_cfg)
    params = model.init_params(int(init_seq.generate_state(1)[0]))
    batcher = Batcher(train_set, cfg.batch_size, np.random.default_rng(batch_seq))
    sched_rng = np.random.default_rng(sched_seq)
    drop_rng = np.random.default_rng(drop_seq)
    opt = Adam(params)
    val_schedule = validation_schedule(cfg, model_cfg.L_audio)

    records: list[dict] = []
    best: list[Checkpoint] = []
    last_finite = None
    for step in range(1, cfg.steps + 1):
        feats, tokens = batcher.next()
        schedule = sample_schedule(cfg.sampler, model_cfg.L_audio, sched_rng)
        bundle = mode_pair_loss(
            model, params, feats, tokens, schedule,
            shift=cfg.s_shift, weights=cfg.weights, dropout=cfg.dropout, rng=drop_rng,
        )
        if not math.isfinite(bundle.total.item()):
            raise TrainingDiverged(step, last_finite)
        for p in params.values():
            p.zero_grad()
        bundle.total.backward()
        lr = learning_rate(cfg, step)
        opt.step(lr, cfg.clip_norm)
        rec = log_record(step, bundle, lr)
        records.append(rec)
        last_finite = {k: rec[k] for k in ("l_stream", "l_full", "l_distill", "total")}
        if on_step is not None:
            on_step(rec)

        if step % cfg.eval_every == 0 or step == cfg.steps:
            vloss = corpus_loss(model, params, valid_set, val_schedule) if valid_set else bundle.total.item()
            rec["valid_loss"] = vloss
            best.append(Checkpoint(step, vloss, clone_params(params)))
            best.sort(key=lambda c: (c.valid_loss, -c.step))
            del best[cfg.keep_best_k:]
            log.info("step %d  total %.4f  valid %.4f  lr %.2e", step, rec["total"], vloss, lr)

    for p in params.values():
        p.zero_grad()
    return TrainResult(best, records, params)


def average_checkpoints(checkpoints: list[ParamSet]) -> ParamSet:
    if not checkpoints:
        raise ValueError("need at least one checkpoint")
    names = list(checkpoints[0])
    for ck in checkpoints[1:]:
        if list(ck) != names or any(ck[k].shape != checkpoints[0][k].shape for k in names):
            raise ValueError("checkpoints have mismatched tensors")
    n = len(checkpoints)
    out = {}
    for k in names:
        acc = np.zeros_like(checkpoints[0][k].data)
        for ck in checkpoints:
            acc += ck[k].data
        out[k] = Tensor(acc / n, requires_grad=True, name=k)
    return out


def train_tag(cfg: TrainConfig) -> str:
    kind = "multi" if cfg.teacher_branch else "baseline"
    return f"{kind} {format_spec(cfg.sampler)}"

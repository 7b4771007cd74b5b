"""Transducer loss, merged-posterior distillation and the dual/multi-mode objectives."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .masking import ContextSchedule, Fixed, SamplerSpec, sample_schedule
from .model import BLANK, ParamSet, Transducer
from .tensor import Tensor

KL_FLOOR = 1e-12


def _batched(logp: Tensor, labels) -> tuple[Tensor, np.ndarray, bool]:
    labels = np.asarray(labels, dtype=np.int64)
    single = logp.ndim == 3
    if single:
        logp = logp.reshape(1, *logp.shape)
        labels = labels.reshape(1, -1)
    B, T, U1, V = logp.shape
    if labels.shape != (B, U1 - 1):
        raise ValueError(f"lattice {logp.shape} does not match labels {labels.shape}")
    if T < 1:
        raise ValueError("lattice needs at least one frame")
    return logp, labels, single


def _emission_scores(lp: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Blank scores ``[B, T, U+1]`` and next-label scores ``[B, T, U]``."""
    U = labels.shape[1]
    blank = lp[..., BLANK]
    idx = np.broadcast_to(labels[:, None, :, None], lp.shape[:2] + (U, 1))
    emit = np.take_along_axis(lp[:, :, :U], idx, axis=-1)[..., 0]
    return blank, emit


def _forward_alpha(blank: np.ndarray, emit: np.ndarray) -> np.ndarray:
    B, T, U1 = blank.shape
    alpha = np.full((B, T, U1), -np.inf)
    alpha[:, 0, 0] = 0.0
    for t in range(T):
        if t > 0:
            alpha[:, t] = alpha[:, t - 1] + blank[:, t - 1]
        for u in range(1, U1):
            alpha[:, t, u] = np.logaddexp(alpha[:, t, u], alpha[:, t, u - 1] + emit[:, t, u - 1])
    return alpha


def _backward_beta(blank: np.ndarray, emit: np.ndarray) -> np.ndarray:
    B, T, U1 = blank.shape
    beta = np.full((B, T, U1), -np.inf)
    beta[:, T - 1, U1 - 1] = blank[:, T - 1, U1 - 1]
    for t in range(T - 1, -1, -1):
        if t < T - 1:
            beta[:, t] = beta[:, t + 1] + blank[:, t]
        for u in range(U1 - 2, -1, -1):
            beta[:, t, u] = np.logaddexp(beta[:, t, u], beta[:, t, u + 1] + emit[:, t, u])
    return beta


def transducer_nll(logp: Tensor, labels) -> Tensor:
    """Per-utterance negative log-likelihood ``[B]`` over all monotone alignments.

    ``logp`` is ``[B, T, U+1, V]``.  The gradient comes from the forward and
    backward variables, so the recursion is never taped step by step.
    """
    logp, labels, _ = _batched(logp, labels)
    B, T, U1, V = logp.shape
    blank, emit = _emission_scores(logp.data, labels)
    alpha = _forward_alpha(blank, emit)
    log_z = alpha[:, T - 1, U1 - 1] + blank[:, T - 1, U1 - 1]

    def backward(g):
        beta = _backward_beta(blank, emit)
        after_blank = np.full((B, T, U1), -np.inf)
        after_blank[:, :-1] = beta[:, 1:]
        after_blank[:, T - 1, U1 - 1] = 0.0
        norm = log_z[:, None, None]
        scale_ = -g[:, None, None]
        grad = np.zeros(logp.shape)
        grad[..., BLANK] = scale_ * np.exp(alpha + blank + after_blank - norm)
        occ = scale_ * np.exp(alpha[:, :, :-1] + emit + beta[:, :, 1:] - norm)
        np.put_along_axis(
            grad[:, :, :-1],
            np.broadcast_to(labels[:, None, :, None], (B, T, U1 - 1, 1)),
            occ[..., None],
            axis=-1,
        )
        return (grad,)

    return tt._record(-log_z, (logp,), backward)


def transducer_loss(logp: Tensor, labels) -> Tensor:
    """Mean transducer negative log-likelihood over the batch."""
    return tt.mean(transducer_nll(logp, labels))


def brute_force_transducer_loss(logp, labels, max_paths: int = 200_000) -> float:
    """Negative log of the summed probability of every alignment, by enumeration.

    ``logp`` is a single ``[T, U+1, V]`` lattice.
    """
    lp = np.asarray(logp.data if isinstance(logp, Tensor) else logp, dtype=np.float64)
    y = [int(v) for v in labels]
    T, U1, _ = lp.shape
    U = U1 - 1
    if len(y) != U:
        raise ValueError(f"lattice has U={U}, labels have {len(y)}")
    n_paths = math.comb(T - 1 + U, U)
    if n_paths > max_paths:
        raise ValueError(f"refusing to enumerate {n_paths} paths (T={T}, U={U})")
    scores = []
    for label_steps in itertools.combinations(range(T - 1 + U), U):
        t = u = 0
        score = 0.0
        chosen = set(label_steps)
        for step in range(T - 1 + U):
            if step in chosen:
                score += lp[t, u, y[u]]
                u += 1
            else:
                score += lp[t, u, BLANK]
                t += 1
        scores.append(score + lp[T - 1, U, BLANK])
    return -tt.logsumexp(scores)


# ---------------------------------------------------------------- distillation

def merge_posteriors(logp: Tensor, labels) -> Tensor:
    """Collapse each node to (blank, correct next label, everything else).

    The last row has no next label, so its middle slot is zero.
    """
    logp, labels, single = _batched(logp, labels)
    B, T, U1, V = logp.shape
    onehot = np.zeros((B, 1, U1, V))
    rows = np.arange(U1 - 1)
    for b in range(B):
        onehot[b, 0, rows, labels[b]] = 1.0
    other = 1.0 - onehot
    other[..., BLANK] = 0.0
    p = tt.exp(logp)
    p3 = tt.stack([p[..., BLANK], (p * onehot).sum(axis=-1), (p * other).sum(axis=-1)])
    return p3.reshape(T, U1, 3) if single else p3


def distill_kl(student: Tensor, teacher: Tensor, shift: int = 0) -> Tensor:
    """Mean over aligned nodes of KL(student[t] || teacher[t - shift]); teacher is constant."""
    if student.shape != teacher.shape:
        raise ValueError(f"student {student.shape} vs teacher {teacher.shape}")
    if student.ndim == 3:
        student = student.reshape(1, *student.shape)
        teacher = teacher.reshape(1, *teacher.shape)
    T = student.shape[1]
    if not 0 <= shift < T:
        raise ValueError(f"shift {shift} outside [0, {T})")
    s = student[:, shift:]
    log_t = np.log(np.maximum(teacher.data[:, : T - shift], KL_FLOOR))
    log_s = tt.log(tt.clamp_min(s, KL_FLOOR))
    kl = (s * (log_s - log_t)).sum(axis=-1)
    return tt.mean(kl)


# ---------------------------------------------------------------- objectives

@dataclass
class LossBundle:
    l_stream: Tensor
    l_full: Tensor
    l_distill: Tensor
    total: Tensor
    schedule_used: ContextSchedule

    def values(self) -> dict[str, float]:
        return {
            "l_stream": self.l_stream.item(),
            "l_full": self.l_full.item(),
            "l_distill": self.l_distill.item(),
            "total": self.total.item(),
        }


def mode_pair_loss(
    model: Transducer,
    params: ParamSet,
    features,
    labels,
    schedule: ContextSchedule,
    shift: int = 0,
    weights: tuple[float, float, float] = (1.0, 1.0, 1.0),
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
    teacher: Tensor | None = None,
) -> LossBundle:
    """Streaming branch under ``schedule`` plus the full-context teacher branch.

    A zero weight on both the full-context and distillation terms skips the
    teacher forward pass entirely (stand-alone streaming baseline).  Passing
    ``teacher`` pins the distillation target to given merged posteriors
    instead of this call's full-context output.
    """
    w_stream, w_full, w_distill = weights
    full = ContextSchedule.full(model.cfg.L_audio)
    logp_s = model.forward(params, features, labels, schedule, dropout, rng)
    l_stream = transducer_loss(logp_s, labels)
    if w_full == 0 and w_distill == 0:
        zero = Tensor(0.0)
        return LossBundle(l_stream, zero, zero, tt.scale(l_stream, w_stream), schedule)
    logp_f = model.forward(params, features, labels, full, dropout, rng)
    l_full = transducer_loss(logp_f, labels)
    if teacher is None:
        teacher = merge_posteriors(logp_f, labels).detach()
    l_distill = distill_kl(merge_posteriors(logp_s, labels), teacher, shift)
    total = tt.scale(l_stream, w_stream) + tt.scale(l_full, w_full) + tt.scale(l_distill, w_distill)
    return LossBundle(l_stream, l_full, l_distill, total, schedule)


def dual_mode_loss(model: Transducer, params: ParamSet, features, labels, c_fixed: int, **kw) -> LossBundle:
    schedule = sample_schedule(Fixed(c_fixed), model.cfg.L_audio, None)
    return mode_pair_loss(model, params, features, labels, schedule, **kw)


def multi_mode_loss(model: Transducer, params: ParamSet, features, labels, spec: SamplerSpec,
                    rng: np.random.Generator, **kw) -> LossBundle:
    """One schedule draw per call estimates the expectation over context sizes."""
    schedule = sample_schedule(spec, model.cfg.L_audio, rng)
    return mode_pair_loss(model, params, features, labels, schedule, **kw)

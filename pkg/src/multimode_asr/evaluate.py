"""Greedy transducer decoding, Levenshtein scoring and context sweeps."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as tt
from .data import Utterance
from .masking import ContextSchedule, SamplerSpec, in_support
from .model import BLANK, ParamSet, Transducer


def greedy_search(n_frames: int, scorer: Callable[[int, list[int]], np.ndarray],
                  max_symbols_per_frame: int = 4) -> list[int]:
    """Frame-synchronous argmax search; ``scorer(t, prefix)`` returns scores over V."""
    if max_symbols_per_frame < 1:
        raise ValueError("max_symbols_per_frame must be >= 1")
    out: list[int] = []
    for t in range(n_frames):
        for _ in range(max_symbols_per_frame):
            k = int(np.argmax(scorer(t, out)))
            if k == BLANK:
                break
            out.append(k)
    return out


def greedy_decode(model: Transducer, params: ParamSet, features, schedule: ContextSchedule,
                  max_symbols_per_frame: int = 4) -> list[int]:
    """Decode one utterance (features ``[N, F]``) under a fixed context schedule."""
    with tt.no_grad():
        x = np.asarray(features, dtype=np.float64)[None]
        h_a = model.encode_audio(model.frontend(x, params), params, schedule)
        a = (h_a.data @ params["joint.wa"].data + params["joint.ba"].data)[0]
        wl = params["joint.wl"].data
        w, b = params["joint.w"].data, params["joint.b"].data
        cache: dict[int, np.ndarray] = {}

        def label_state(prefix: list[int]) -> np.ndarray:
            n = len(prefix)
            if n not in cache:
                h_l = model.encode_labels(np.asarray(prefix, dtype=np.int64)[None], params)
                cache.clear()
                cache[n] = h_l.data[0, -1] @ wl
            return cache[n]

        def scorer(t: int, prefix: list[int]) -> np.ndarray:
            return np.tanh(a[t] + label_state(prefix)) @ w + b

        return greedy_search(a.shape[0], scorer, max_symbols_per_frame)


def edit_distance(hyp: Sequence[int], ref: Sequence[int]) -> tuple[int, int, int]:
    """(substitutions, insertions, deletions) of a minimal unit-cost alignment.

    Backtrace prefers substitution/match, then insertion, then deletion.
    """
    n, m = len(hyp), len(ref)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            d[i, j] = min(
                d[i - 1, j - 1] + (hyp[i - 1] != ref[j - 1]),
                d[i - 1, j] + 1,
                d[i, j - 1] + 1,
            )
    sub = ins = dele = 0
    i, j = n, m
    while i or j:
        if i and j and d[i, j] == d[i - 1, j - 1] + (hyp[i - 1] != ref[j - 1]):
            sub += hyp[i - 1] != ref[j - 1]
            i, j = i - 1, j - 1
        elif i and d[i, j] == d[i - 1, j] + 1:
            ins += 1
            i -= 1
        else:
            dele += 1
            j -= 1
    return int(sub), ins, dele


def error_rate(hyp: Sequence[int], ref: Sequence[int]) -> float:
    errs = sum(edit_distance(hyp, ref))
    if not ref:
        return math.inf if errs else 0.0
    return errs / len(ref)


# ---------------------------------------------------------------- sweeps

@dataclass
class ReportRow:
    train_tag: str
    schedule: str
    total_context: float
    error_rate: float
    matched: bool


@dataclass
class EvalReport:
    rows: list[ReportRow] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def extend(self, other: EvalReport) -> None:
        self.rows.extend(other.rows)

    def lookup(self, train_tag: str, schedule: str) -> float:
        for r in self.rows:
            if r.train_tag == train_tag and r.schedule == schedule:
                return r.error_rate
        raise KeyError((train_tag, schedule))

    def to_text(self) -> str:
        out = io.StringIO()
        for k in sorted(self.metadata):
            out.write(f"# {k}: {self.metadata[k]}\n")
        for r in self.rows:
            out.write(
                f"cell train={r.train_tag!r} schedule={r.schedule} C={_fmt_c(r.total_context)} "
                f"error_rate={r.error_rate:.6f} matched={'yes' if r.matched else 'no'}\n"
            )
        out.write("\n")
        out.write(self.table())
        return out.getvalue()

    def table(self) -> str:
        """Training tags down, inference schedules across; mismatched cells carry ``*``."""
        tags = list(dict.fromkeys(r.train_tag for r in self.rows))
        scheds = list(dict.fromkeys(r.schedule for r in self.rows))
        cells = {(r.train_tag, r.schedule): r for r in self.rows}
        header = ["train \\ infer", *scheds]
        body = []
        for tag in tags:
            line = [tag]
            for s in scheds:
                r = cells.get((tag, s))
                line.append("-" if r is None else f"{100 * r.error_rate:.2f}%" + ("" if r.matched else "*"))
            body.append(line)
        widths = [max(len(row[i]) for row in [header, *body]) for i in range(len(header))]
        fmt = lambda row: "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths)))
        lines = [fmt(header), fmt(["-" * w for w in widths]), *map(fmt, body)]
        lines.append("(* = mismatched: inference context outside the training distribution)")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["train_tag", "schedule", "total_context", "error_rate", "matched"])
        for r in self.rows:
            w.writerow([r.train_tag, r.schedule, _fmt_c(r.total_context), f"{r.error_rate:.6f}", int(r.matched)])
        return out.getvalue()


def _fmt_c(c: float) -> str:
    return "inf" if math.isinf(c) else str(int(c))


def is_matched(schedule: ContextSchedule, sampler: SamplerSpec | None, teacher_branch: bool) -> bool:
    if sampler is None:
        return False
    if schedule.is_full and teacher_branch:
        return True
    return in_support(schedule, sampler)


def context_sweep(model: Transducer, params: ParamSet, dataset: list[Utterance],
                  schedules: list[ContextSchedule], train_tag: str,
                  sampler: SamplerSpec | None = None, teacher_branch: bool = True,
                  max_symbols_per_frame: int = 4) -> EvalReport:
    """Decode every utterance under every schedule with the same weights."""
    if not schedules:
        raise ValueError("need at least one schedule")
    utts = sorted(dataset, key=lambda u: u.id)
    report = EvalReport()
    for sched in schedules:
        errors = words = 0
        for utt in utts:
            hyp = greedy_decode(model, params, utt.features, sched, max_symbols_per_frame)
            errors += sum(edit_distance(hyp, list(utt.tokens)))
            words += len(utt.tokens)
        rate = errors / words if words else (math.inf if errors else 0.0)
        report.rows.append(ReportRow(train_tag, sched.encode(), sched.total(), rate,
                                     is_matched(sched, sampler, teacher_branch)))
    return report

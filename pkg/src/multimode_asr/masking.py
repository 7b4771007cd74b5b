"""Future-context schedules, their samplers, attention masks and latency."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

UNBOUNDED = math.inf


# ---------------------------------------------------------------- sampler specs

@dataclass(frozen=True)
class TiedUniform:
    lo: int
    hi: int

    def __post_init__(self):
        if not 0 <= self.lo <= self.hi:
            raise ValueError(f"need 0 <= lo <= hi, got {self.lo}, {self.hi}")


@dataclass(frozen=True)
class TiedNormal:
    mu: float
    sigma: float

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")


@dataclass(frozen=True)
class UntiedUniform(TiedUniform):
    pass


@dataclass(frozen=True)
class UntiedNormal(TiedNormal):
    pass


@dataclass(frozen=True)
class Constrained:
    c_max: int
    d: float = 2.0

    def __post_init__(self):
        if self.c_max < 0 or self.d <= 0:
            raise ValueError(f"need c_max >= 0 and d > 0, got {self.c_max}, {self.d}")


@dataclass(frozen=True)
class Fixed:
    c: int

    def __post_init__(self):
        if self.c < 0:
            raise ValueError(f"context size must be >= 0, got {self.c}")


@dataclass(frozen=True)
class FullContext:
    pass


SamplerSpec = TiedUniform | TiedNormal | UntiedUniform | UntiedNormal | Constrained | Fixed | FullContext

_TAGS = {
    "tied-uniform": (TiedUniform, (int, int)),
    "tied-normal": (TiedNormal, (float, float)),
    "untied-uniform": (UntiedUniform, (int, int)),
    "untied-normal": (UntiedNormal, (float, float)),
    "constrained": (Constrained, (int, float)),
    "fixed": (Fixed, (int,)),
    "full": (FullContext, ()),
}


def _num(x) -> str:
    return str(int(x)) if float(x).is_integer() else repr(float(x))


def format_spec(spec: SamplerSpec) -> str:
    for tag, (cls, _) in _TAGS.items():
        if type(spec) is cls:
            fields = [getattr(spec, f) for f in spec.__dataclass_fields__]
            return ":".join([tag, *(_num(v) for v in fields)])
    raise TypeError(f"not a sampler spec: {spec!r}")


def parse_spec(text: str) -> SamplerSpec:
    """Parse ``tied-uniform:0:2``, ``constrained:12:2``, ``fixed:1``, ``full``..."""
    tag, *args = text.strip().split(":")
    if tag not in _TAGS:
        raise ValueError(f"unknown sampler {tag!r} in {text!r}")
    cls, types = _TAGS[tag]
    if tag == "constrained" and len(args) == 1:
        args.append("2")
    if len(args) != len(types):
        raise ValueError(f"{tag!r} takes {len(types)} argument(s), got {text!r}")
    try:
        return cls(*(t(a) for t, a in zip(types, args)))
    except ValueError as exc:
        raise ValueError(f"bad sampler {text!r}: {exc}") from None


# ---------------------------------------------------------------- schedules

@dataclass(frozen=True)
class ContextSchedule:
    """Per-layer lookahead ``per_layer``; ``None`` means full context."""

    per_layer: tuple[int, ...] | None
    source: str = ""
    n_layers: int = 0

    @classmethod
    def full(cls, n_layers: int, source: str = "full") -> ContextSchedule:
        return cls(None, source, n_layers)

    @classmethod
    def of(cls, per_layer, source: str = "") -> ContextSchedule:
        per_layer = tuple(int(c) for c in per_layer)
        if any(c < 0 for c in per_layer):
            raise ValueError(f"negative context in {per_layer}")
        return cls(per_layer, source, len(per_layer))

    def __len__(self) -> int:
        return self.n_layers

    @property
    def is_full(self) -> bool:
        return self.per_layer is None

    def layer(self, i: int) -> int | None:
        return None if self.per_layer is None else self.per_layer[i]

    def total(self) -> float:
        return UNBOUNDED if self.per_layer is None else sum(self.per_layer)

    def encode(self) -> str:
        if self.per_layer is None:
            return "full"
        if len(set(self.per_layer)) == 1:
            return f"fixed:{self.per_layer[0]}"
        return "layers:" + "-".join(map(str, self.per_layer))


def parse_schedule(text: str, n_layers: int) -> ContextSchedule:
    """Inference schedules: ``fixed:c``, ``full`` or ``layers:c1-c2-...``."""
    text = text.strip()
    if text == "full":
        return ContextSchedule.full(n_layers)
    tag, _, arg = text.partition(":")
    try:
        if tag == "fixed":
            return ContextSchedule.of([int(arg)] * n_layers, text)
        if tag == "layers":
            cs = [int(c) for c in arg.split("-")]
            if len(cs) != n_layers:
                raise ValueError(f"expected {n_layers} layers, got {len(cs)}")
            return ContextSchedule.of(cs, text)
    except ValueError as exc:
        raise ValueError(f"bad schedule {text!r}: {exc}") from None
    raise ValueError(f"bad schedule {text!r}")


def _discrete(rng: np.random.Generator, spec) -> int:
    if isinstance(spec, TiedUniform):
        return int(rng.integers(spec.lo, spec.hi + 1))
    return int(np.floor(np.abs(rng.normal(spec.mu, spec.sigma))))


def tied_sample(spec: TiedUniform | TiedNormal, n_layers: int, rng: np.random.Generator) -> ContextSchedule:
    """One draw shared by every layer; normal draws become ``floor(|x|)``."""
    c = _discrete(rng, spec)
    return ContextSchedule.of([c] * n_layers, format_spec(spec))


def untied_sample(spec: UntiedUniform | UntiedNormal, n_layers: int, rng: np.random.Generator) -> ContextSchedule:
    cs = [_discrete(rng, spec) for _ in range(n_layers)]
    return ContextSchedule.of(cs, format_spec(spec))


def constrained_sample(c_max: int, d: float, n_layers: int, rng: np.random.Generator) -> ContextSchedule:
    """Bottom layer first; each layer draws uniformly from ``[0, floor(R / d)]``.

    The bound is capped at ``R`` so that ``d < 1`` cannot overspend the budget.
    """
    remaining = c_max
    cs = []
    for _ in range(n_layers):
        c = int(rng.integers(0, min(math.floor(remaining / d), remaining) + 1))
        cs.append(c)
        remaining -= c
    return ContextSchedule.of(cs, format_spec(Constrained(c_max, d)))


def sample_schedule(spec: SamplerSpec, n_layers: int, rng: np.random.Generator) -> ContextSchedule:
    if n_layers < 1:
        raise ValueError("need at least one layer")
    if isinstance(spec, (UntiedUniform, UntiedNormal)):
        return untied_sample(spec, n_layers, rng)
    if isinstance(spec, (TiedUniform, TiedNormal)):
        return tied_sample(spec, n_layers, rng)
    if isinstance(spec, Constrained):
        return constrained_sample(spec.c_max, spec.d, n_layers, rng)
    if isinstance(spec, Fixed):
        return ContextSchedule.of([spec.c] * n_layers, format_spec(spec))
    if isinstance(spec, FullContext):
        return ContextSchedule.full(n_layers)
    raise TypeError(f"not a sampler spec: {spec!r}")


def in_support(schedule: ContextSchedule, spec: SamplerSpec) -> bool:
    """Whether ``spec`` can produce ``schedule``."""
    if schedule.is_full or isinstance(spec, FullContext):
        return schedule.is_full and isinstance(spec, FullContext)
    cs = schedule.per_layer
    tied = len(set(cs)) == 1
    if isinstance(spec, UntiedUniform):
        return all(spec.lo <= c <= spec.hi for c in cs)
    if isinstance(spec, UntiedNormal):
        return True
    if isinstance(spec, TiedUniform):
        return tied and spec.lo <= cs[0] <= spec.hi
    if isinstance(spec, TiedNormal):
        return tied
    if isinstance(spec, Fixed):
        return all(c == spec.c for c in cs)
    if isinstance(spec, Constrained):
        remaining = spec.c_max
        for c in cs:
            if c > min(math.floor(remaining / spec.d), remaining):
                return False
            remaining -= c
        return True
    raise TypeError(f"not a sampler spec: {spec!r}")


# ---------------------------------------------------------------- masks, latency

def build_mask(n_frames: int, c: int | None) -> np.ndarray:
    """Boolean ``[T, T]`` allowance: query ``t`` sees key ``j`` iff ``j <= t + c``.

    ``c=None`` is full context.  The past is never restricted.
    """
    if n_frames < 1:
        raise ValueError("need at least one frame")
    if c is None:
        return np.ones((n_frames, n_frames), dtype=bool)
    if c < 0:
        raise ValueError(f"context size must be >= 0, got {c}")
    t = np.arange(n_frames)
    return t[None, :] <= t[:, None] + c


def receptive_future(schedule: ContextSchedule) -> float:
    """Future encoder frames that can reach the current output; ``inf`` if unbounded."""
    return schedule.total()


def latency_ms(
    schedule: ContextSchedule,
    frame_shift_ms: float = 10.0,
    downsample: int = 4,
    frontend_lookahead_frames: int = 0,
) -> float:
    if frame_shift_ms <= 0 or downsample < 1:
        raise ValueError("need frame_shift_ms > 0 and downsample >= 1")
    future = receptive_future(schedule)
    if math.isinf(future):
        return UNBOUNDED
    return float((future * downsample + frontend_lookahead_frames) * frame_shift_ms)

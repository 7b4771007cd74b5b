"""Synthetic utterances whose labels are only resolved by future frames.

Feature layout per frame (``F`` dims):

* ``[0, F-2)`` class prototype of the token whose span covers the frame
* ``F-2``      onset marker, 1.0 on the first frame of every token span
* ``F-1``      disambiguation tag for the *previous* token

Labels come in ambiguous pairs that share a prototype.  The pair member is
told apart only by the sign of the tag written into the ``lookahead_k`` frames
that follow the token's own span, so a recogniser that must decide inside the
span is at chance on those tokens.  With ``lookahead_k = 0`` the tag sits in
the span itself and the task is causal.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, fields

import numpy as np

DATA_MAGIC = b"MMDS"
DATA_VERSION = 1
PROTOTYPE_SEED = 20210311


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    F: int = 8
    V: int = 8
    lookahead_k: int = 4
    frames_per_token: int = 8
    noise_sigma: float = 0.3
    min_tokens: int = 4
    max_tokens: int = 12
    ambiguous_fraction: float = 0.5
    tag_amplitude: float = 1.0

    def __post_init__(self):
        if self.F < 3:
            raise ValueError("F must leave room for prototype, onset and tag dims")
        if self.V < 2:
            raise ValueError("V must include blank plus at least one label")
        if self.lookahead_k < 0 or self.frames_per_token < 1 or self.noise_sigma < 0:
            raise ValueError("need lookahead_k >= 0, frames_per_token >= 1, noise_sigma >= 0")
        if not 1 <= self.min_tokens <= self.max_tokens:
            raise ValueError("need 1 <= min_tokens <= max_tokens")

    @property
    def n_labels(self) -> int:
        return self.V - 1

    @property
    def n_pairs(self) -> int:
        return min(round(self.ambiguous_fraction * self.n_labels / 2), self.n_labels // 2)

    def n_frames(self, n_tokens: int) -> int:
        return n_tokens * self.frames_per_token + self.lookahead_k


@dataclass
class Utterance:
    id: str
    tokens: np.ndarray  # int64 [U]
    features: np.ndarray  # float32 [N, F]

    def __eq__(self, other):
        return (
            isinstance(other, Utterance)
            and self.id == other.id
            and np.array_equal(self.tokens, other.tokens)
            and self.features.dtype == other.features.dtype
            and self.features.tobytes() == other.features.tobytes()
            and self.features.shape == other.features.shape
        )


def label_groups(spec: TaskSpec) -> tuple[np.ndarray, np.ndarray]:
    """Prototype group and tag sign for every label id (index 0 = blank, unused)."""
    group = np.zeros(spec.V, dtype=np.int64)
    sign = np.zeros(spec.V)
    g = 0
    label = 1
    for _ in range(spec.n_pairs):
        group[label] = group[label + 1] = g
        sign[label], sign[label + 1] = 1.0, -1.0
        g += 1
        label += 2
    while label < spec.V:
        group[label] = g
        g += 1
        label += 1
    return group, sign


def prototypes(spec: TaskSpec) -> np.ndarray:
    """``[n_groups, F-2]`` unit-norm class prototypes, fixed for a given task."""
    group, _ = label_groups(spec)
    n_groups = int(group[1:].max()) + 1
    width = spec.F - 2
    if n_groups <= width:
        return np.eye(n_groups, width)
    rng = np.random.default_rng(PROTOTYPE_SEED)
    protos = rng.normal(size=(n_groups, width))
    return protos / np.linalg.norm(protos, axis=1, keepdims=True)


def render(spec: TaskSpec, tokens: np.ndarray, rng: np.random.Generator | None) -> np.ndarray:
    """Clean features plus Gaussian noise (skipped when ``rng`` is None)."""
    group, sign = label_groups(spec)
    protos = prototypes(spec)
    fpt, k = spec.frames_per_token, spec.lookahead_k
    x = np.zeros((spec.n_frames(len(tokens)), spec.F))
    for u, tok in enumerate(tokens):
        start = u * fpt
        x[start:start + fpt, : spec.F - 2] = protos[group[tok]]
        x[start, spec.F - 2] = 1.0
        # with no lookahead the tag lives in the token's own span
        tag = slice(start + fpt, start + fpt + k) if k else slice(start, start + fpt)
        x[tag, spec.F - 1] += spec.tag_amplitude * sign[tok]
    if rng is not None and spec.noise_sigma > 0:
        x += rng.normal(0.0, spec.noise_sigma, x.shape)
    return x.astype(np.float32)


def gen_utterance(spec: TaskSpec, rng: np.random.Generator, uid: str = "utt") -> Utterance:
    n = int(rng.integers(spec.min_tokens, spec.max_tokens + 1))
    tokens = rng.integers(1, spec.V, size=n).astype(np.int64)
    return Utterance(uid, tokens, render(spec, tokens, rng))


def gen_dataset(spec: TaskSpec, count: int, base_seed: int) -> list[Utterance]:
    """Utterance ``i`` uses seed ``base_seed ^ i``."""
    return [
        gen_utterance(spec, np.random.default_rng(base_seed ^ i), f"utt{i:06d}")
        for i in range(count)
    ]


def split_seed(seed: int, split: int) -> int:
    """Base seeds that stay disjoint under XOR with any index below 2**32."""
    return (split << 32) | (seed & 0xFFFFFFFF)


# ---------------------------------------------------------------- oracles

def nearest_prototype_decode(spec: TaskSpec, utt: Utterance, lookahead: bool) -> np.ndarray:
    """Token-synchronous oracle with known segmentation.

    The causal variant sees only the token's own frames and picks the first
    member of an ambiguous pair; the lookahead variant also reads the tag.
    With ``lookahead_k == 0`` the tag is in-span, so both variants read it.
    """
    group, sign = label_groups(spec)
    protos = prototypes(spec)
    fpt, k = spec.frames_per_token, spec.lookahead_k
    x = utt.features.astype(np.float64)
    out = []
    for u in range(len(utt.tokens)):
        span = x[u * fpt:(u + 1) * fpt, : spec.F - 2].mean(axis=0)
        g = int(np.argmin(((protos - span) ** 2).sum(axis=1)))
        members = [lab for lab in range(1, spec.V) if group[lab] == g]
        pick = members[0]
        if len(members) == 2 and (lookahead or k == 0):
            lo = (u + 1) * fpt if k else u * fpt
            tag = x[lo:lo + (k or fpt), spec.F - 1].mean()
            pick = members[0] if tag >= 0 else members[1]
        out.append(pick)
    return np.asarray(out, dtype=np.int64)


# ---------------------------------------------------------------- file I/O

_INT_FIELDS = [f.name for f in fields(TaskSpec) if f.type in (int, "int")]
_FLOAT_FIELDS = [f.name for f in fields(TaskSpec) if f.type in (float, "float")]


def dump_dataset(spec: TaskSpec, utterances: list[Utterance]) -> bytes:
    out = io.BytesIO()
    out.write(DATA_MAGIC)
    out.write(struct.pack("<I", DATA_VERSION))
    out.write(struct.pack(f"<{len(_INT_FIELDS)}i", *(getattr(spec, f) for f in _INT_FIELDS)))
    out.write(struct.pack(f"<{len(_FLOAT_FIELDS)}d", *(getattr(spec, f) for f in _FLOAT_FIELDS)))
    out.write(struct.pack("<I", len(utterances)))
    for utt in utterances:
        raw = utt.id.encode()
        out.write(struct.pack("<I", len(raw)) + raw)
        out.write(struct.pack("<I", len(utt.tokens)))
        out.write(np.asarray(utt.tokens, dtype="<u2").tobytes())
        feats = np.asarray(utt.features, dtype="<f4")
        if feats.ndim != 2 or feats.shape[1] != spec.F:
            raise ValueError(f"{utt.id}: features {feats.shape} do not match F={spec.F}")
        out.write(struct.pack("<I", feats.shape[0]))
        out.write(feats.tobytes())
    return out.getvalue()


def parse_dataset(blob: bytes) -> tuple[TaskSpec, list[Utterance]]:
    view = memoryview(blob)
    pos = 0

    def take(n: int, what: str) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise DatasetError(f"truncated {what} at byte {pos}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4, "magic")) != DATA_MAGIC:
        raise DatasetError("bad magic at byte 0")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != DATA_VERSION:
        raise DatasetError(f"unsupported version {version} at byte 4")
    ints = struct.unpack(f"<{len(_INT_FIELDS)}i", take(4 * len(_INT_FIELDS), "header"))
    floats = struct.unpack(f"<{len(_FLOAT_FIELDS)}d", take(8 * len(_FLOAT_FIELDS), "header"))
    try:
        spec = TaskSpec(**dict(zip(_INT_FIELDS, ints)), **dict(zip(_FLOAT_FIELDS, floats)))
    except ValueError as exc:
        raise DatasetError(f"invalid task header at byte 8: {exc}") from None
    (count,) = struct.unpack("<I", take(4, "count"))
    utts = []
    for _ in range(count):
        (n,) = struct.unpack("<I", take(4, "id length"))
        uid = bytes(take(n, "id")).decode()
        (u,) = struct.unpack("<I", take(4, "token count"))
        tokens = np.frombuffer(take(2 * u, "tokens"), dtype="<u2").astype(np.int64)
        (frames,) = struct.unpack("<I", take(4, "frame count"))
        feats = np.frombuffer(take(4 * frames * spec.F, "features"), dtype="<f4")
        utts.append(Utterance(uid, tokens, feats.astype(np.float32).reshape(frames, spec.F)))
    if pos != len(view):
        raise DatasetError(f"trailing bytes at byte {pos}")
    return spec, utts


def write_dataset(path, spec: TaskSpec, utterances: list[Utterance]) -> None:
    with open(path, "wb") as fh:
        fh.write(dump_dataset(spec, utterances))


def read_dataset(path) -> tuple[TaskSpec, list[Utterance]]:
    with open(path, "rb") as fh:
        return parse_dataset(fh.read())

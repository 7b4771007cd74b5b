"""Transformer transducer: frame-stacking frontend, masked audio encoder,
causal label encoder and additive joint network."""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, fields

import numpy as np

from . import tensor as tt
from .masking import ContextSchedule, build_mask
from .tensor import Tensor

BLANK = 0

ParamSet = dict[str, Tensor]


@dataclass(frozen=True)
class ModelConfig:
    L_audio: int = 4
    L_label: int = 1
    D: int = 64
    D_ff: int = 128
    heads: int = 4
    D_joint: int = 32
    V: int = 8
    F: int = 8
    downsample: int = 4

    def __post_init__(self):
        if self.D % self.heads:
            raise ValueError(f"D={self.D} not divisible by heads={self.heads}")
        if self.V < 2:
            raise ValueError("V must include blank plus at least one label")
        if self.downsample < 1:
            raise ValueError("downsample must be >= 1")

    @property
    def sos(self) -> int:
        return self.V


def sinusoid_positions(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    rate = np.exp(-math.log(10000.0) * (np.arange(0, d, 2) / d))
    out = np.zeros((n, d))
    out[:, 0::2] = np.sin(pos * rate)
    out[:, 1::2] = np.cos(pos * rate[: d // 2])
    return out


def _block_shapes(prefix: str, cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    D, Dff = cfg.D, cfg.D_ff
    return [
        (f"{prefix}.ln1.g", (D,)), (f"{prefix}.ln1.b", (D,)),
        (f"{prefix}.attn.wq", (D, D)), (f"{prefix}.attn.bq", (D,)),
        (f"{prefix}.attn.wk", (D, D)), (f"{prefix}.attn.bk", (D,)),
        (f"{prefix}.attn.wv", (D, D)), (f"{prefix}.attn.bv", (D,)),
        (f"{prefix}.attn.wo", (D, D)), (f"{prefix}.attn.bo", (D,)),
        (f"{prefix}.ln2.g", (D,)), (f"{prefix}.ln2.b", (D,)),
        (f"{prefix}.ff.w1", (D, Dff)), (f"{prefix}.ff.b1", (Dff,)),
        (f"{prefix}.ff.w2", (Dff, D)), (f"{prefix}.ff.b2", (D,)),
    ]


def param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Every tensor name and shape, in checkpoint order."""
    shapes = [("frontend.w", (cfg.F * cfg.downsample, cfg.D)), ("frontend.b", (cfg.D,))]
    for i in range(cfg.L_audio):
        shapes += _block_shapes(f"audio.{i}", cfg)
    shapes += [("audio.ln.g", (cfg.D,)), ("audio.ln.b", (cfg.D,))]
    shapes += [("label.embed", (cfg.V + 1, cfg.D))]
    for i in range(cfg.L_label):
        shapes += _block_shapes(f"label.{i}", cfg)
    shapes += [("label.ln.g", (cfg.D,)), ("label.ln.b", (cfg.D,))]
    shapes += [
        ("joint.wa", (cfg.D, cfg.D_joint)), ("joint.ba", (cfg.D_joint,)),
        ("joint.wl", (cfg.D, cfg.D_joint)),
        ("joint.w", (cfg.D_joint, cfg.V)), ("joint.b", (cfg.V,)),
    ]
    return shapes


def init_params(cfg: ModelConfig, seed: int = 0) -> ParamSet:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg):
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            data = np.ones(shape)
        elif len(shape) == 1:
            data = np.zeros(shape)
        elif leaf == "embed":
            data = rng.normal(0.0, 1.0, shape)
        else:
            data = rng.normal(0.0, 1.0 / math.sqrt(shape[0]), shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = x @ w
    return y if b is None else y + b


def attention(x: Tensor, p: ParamSet, prefix: str, heads: int, mask: np.ndarray,
              dropout: float = 0.0, rng: np.random.Generator | None = None) -> Tensor:
    B, T, D = x.shape
    dh = D // heads

    def split(t):
        return t.reshape(B, T, heads, dh).transpose(0, 2, 1, 3)

    q = split(linear(x, p[f"{prefix}.wq"], p[f"{prefix}.bq"]))
    k = split(linear(x, p[f"{prefix}.wk"], p[f"{prefix}.bk"]))
    v = split(linear(x, p[f"{prefix}.wv"], p[f"{prefix}.bv"]))
    scores = tt.scale(q @ k.transpose(0, 1, 3, 2), 1.0 / math.sqrt(dh))
    weights = tt.dropout(tt.softmax(scores, mask), dropout, rng)
    ctx = (weights @ v).transpose(0, 2, 1, 3).reshape(B, T, D)
    return linear(ctx, p[f"{prefix}.wo"], p[f"{prefix}.bo"])


def transformer_block(x: Tensor, p: ParamSet, prefix: str, heads: int, mask: np.ndarray,
                      dropout: float = 0.0, rng: np.random.Generator | None = None) -> Tensor:
    h = tt.layer_norm(x, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"])
    x = x + attention(h, p, f"{prefix}.attn", heads, mask, dropout, rng)
    h = tt.layer_norm(x, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"])
    h = linear(tt.gelu(linear(h, p[f"{prefix}.ff.w1"], p[f"{prefix}.ff.b1"])), p[f"{prefix}.ff.w2"], p[f"{prefix}.ff.b2"])
    return x + tt.dropout(h, dropout, rng)


class Transducer:
    """Stateless model definition; weights live in a separate ``ParamSet``.

    All inputs are batched: features ``[B, N, F]``, tokens ``[B, U]``.
    """

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg

    def init_params(self, seed: int = 0) -> ParamSet:
        return init_params(self.cfg, seed)

    def n_frames(self, n_input: int) -> int:
        return n_input // self.cfg.downsample

    def frontend(self, features, params: ParamSet) -> Tensor:
        cfg = self.cfg
        x = tt.as_tensor(features)
        B, N, F = x.shape
        T = N // cfg.downsample
        if T < 1:
            raise ValueError(f"need at least {cfg.downsample} frames, got {N}")
        stacked = x[:, : T * cfg.downsample].reshape(B, T, F * cfg.downsample)
        return linear(stacked, params["frontend.w"], params["frontend.b"])

    def encode_audio(self, x: Tensor, params: ParamSet, schedule: ContextSchedule,
                     dropout: float = 0.0, rng: np.random.Generator | None = None) -> Tensor:
        cfg = self.cfg
        if len(schedule) != cfg.L_audio:
            raise ValueError(f"schedule has {len(schedule)} layers, encoder has {cfg.L_audio}")
        T = x.shape[1]
        x = x + sinusoid_positions(T, cfg.D)
        for i in range(cfg.L_audio):
            mask = build_mask(T, schedule.layer(i))
            x = transformer_block(x, params, f"audio.{i}", cfg.heads, mask, dropout, rng)
        return tt.layer_norm(x, params["audio.ln.g"], params["audio.ln.b"])

    def encode_labels(self, tokens, params: ParamSet) -> Tensor:
        """Rows ``0..U``; row ``u`` depends on the start symbol and ``tokens[:, :u]``."""
        cfg = self.cfg
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim == 1:
            tokens = tokens[None]
        if tokens.size and (tokens.min() < 1 or tokens.max() >= cfg.V):
            raise ValueError(f"label ids must lie in [1, {cfg.V})")
        B, U = tokens.shape
        ids = np.concatenate([np.full((B, 1), cfg.sos), tokens], axis=1)
        x = tt.take_rows(params["label.embed"], ids) + sinusoid_positions(U + 1, cfg.D)
        mask = build_mask(U + 1, 0)
        for i in range(cfg.L_label):
            x = transformer_block(x, params, f"label.{i}", cfg.heads, mask)
        return tt.layer_norm(x, params["label.ln.g"], params["label.ln.b"])

    def joint(self, h_audio: Tensor, h_label: Tensor, params: ParamSet) -> Tensor:
        """Log-posteriors ``[B, T, U+1, V]`` from ``W tanh(Wa h_a + Wl h_l)``."""
        a = linear(h_audio, params["joint.wa"], params["joint.ba"])
        l = linear(h_label, params["joint.wl"])
        B, T, J = a.shape
        U1 = l.shape[1]
        z = tt.tanh(a.reshape(B, T, 1, J) + l.reshape(B, 1, U1, J))
        return tt.log_softmax(linear(z, params["joint.w"], params["joint.b"]))

    def forward(self, params: ParamSet, features, tokens, schedule: ContextSchedule,
                dropout: float = 0.0, rng: np.random.Generator | None = None) -> Tensor:
        h_a = self.encode_audio(self.frontend(features, params), params, schedule, dropout, rng)
        return self.joint(h_a, self.encode_labels(tokens, params), params)


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"MMT1"
CKPT_VERSION = 1
_CFG_FIELDS = [f.name for f in fields(ModelConfig)]


class CheckpointError(ValueError):
    pass


def dump_params(cfg: ModelConfig, params: ParamSet) -> bytes:
    out = io.BytesIO()
    out.write(CKPT_MAGIC)
    out.write(struct.pack("<I", CKPT_VERSION))
    out.write(struct.pack(f"<{len(_CFG_FIELDS)}i", *(getattr(cfg, f) for f in _CFG_FIELDS)))
    out.write(struct.pack("<I", len(params)))
    for name, t in params.items():
        raw = name.encode()
        out.write(struct.pack("<I", len(raw)) + raw)
        out.write(struct.pack("<I", t.data.ndim))
        out.write(struct.pack(f"<{t.data.ndim}I", *t.data.shape))
        out.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return out.getvalue()


def load_params(blob: bytes) -> tuple[ModelConfig, ParamSet]:
    view = memoryview(blob)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"truncated checkpoint at byte {pos}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != CKPT_MAGIC:
        raise CheckpointError("bad checkpoint magic at byte 0")
    (version,) = struct.unpack("<I", take(4))
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    cfg = ModelConfig(*struct.unpack(f"<{len(_CFG_FIELDS)}i", take(4 * len(_CFG_FIELDS))))
    (count,) = struct.unpack("<I", take(4))
    params = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", take(4))
        name = bytes(take(n)).decode()
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(take(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    if pos != len(view):
        raise CheckpointError(f"trailing bytes after byte {pos}")
    return cfg, params


def save_checkpoint(path, cfg: ModelConfig, params: ParamSet) -> None:
    with open(path, "wb") as fh:
        fh.write(dump_params(cfg, params))


def load_checkpoint(path) -> tuple[ModelConfig, ParamSet]:
    with open(path, "rb") as fh:
        return load_params(fh.read())


def clone_params(params: ParamSet) -> ParamSet:
    return {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in params.items()}

"""A small pre-norm decoder-only transformer in numpy.

Blocks follow ``h <- h + Attn(RMSNorm(h)); h <- h + MLP(RMSNorm(h))`` with
rotary position embedding applied to queries and keys per head, so nothing
positional lives in the residual width. All arithmetic is float64; weights
are usually held as float32.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from typing import Sequence

import numpy as np

from .errors import PreconditionError

RMS_EPS = 1e-6
ROPE_BASE = 10000.0

BLOCK_TENSORS = ("attn_norm", "wq", "wk", "wv", "wo", "mlp_norm", "w_up", "w_down")


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    vocab_size: int = 256
    max_seq: int = 256

    def __post_init__(self):
        self.validate()

    def validate(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool):
                raise PreconditionError(f"config field {f.name} must be an integer, got {v!r}")
            floor = 0 if f.name == "n_layers" else 1
            if v < floor:
                raise PreconditionError(f"config field {f.name} must be >= {floor}, got {v}")
        if self.d_model % self.n_heads:
            raise PreconditionError(
                f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}"
            )
        if (self.d_model // self.n_heads) % 2:
            raise PreconditionError("rotary embedding needs an even head dimension")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return {f.name: int(getattr(self, f.name)) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise PreconditionError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class Block:
    attn_norm: np.ndarray  # (d,)
    wq: np.ndarray  # (d, d)
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    mlp_norm: np.ndarray  # (d,)
    w_up: np.ndarray  # (d, d_ff)
    w_down: np.ndarray  # (d_ff, d)

    def tensors(self) -> dict:
        return {name: getattr(self, name) for name in BLOCK_TENSORS}

    def astype(self, dtype) -> "Block":
        return Block(**{k: np.asarray(v, dtype=dtype) for k, v in self.tensors().items()})


@dataclass(frozen=True)
class TransformerModel:
    config: ModelConfig
    token_embedding: np.ndarray  # (vocab, d)
    blocks: tuple
    final_norm: np.ndarray  # (d,)
    lm_head: np.ndarray  # (d, vocab)
    metadata: dict = field(default_factory=dict, compare=False)

    kind = "transformer"

    def tensors(self) -> dict:
        """Flat name -> array mapping in canonical (container) order."""
        out = {"token_embedding": self.token_embedding}
        for i, blk in enumerate(self.blocks):
            for name, arr in blk.tensors().items():
                out[f"blocks.{i}.{name}"] = arr
        out["final_norm"] = self.final_norm
        out["lm_head"] = self.lm_head
        return out

    @property
    def dtype(self):
        return self.token_embedding.dtype

    def astype(self, dtype) -> "TransformerModel":
        return replace(
            self,
            token_embedding=np.asarray(self.token_embedding, dtype=dtype),
            blocks=tuple(b.astype(dtype) for b in self.blocks),
            final_norm=np.asarray(self.final_norm, dtype=dtype),
            lm_head=np.asarray(self.lm_head, dtype=dtype),
        )

    # hooks used by forward(); the sliced model overrides these
    def embed(self, tokens):
        return self.token_embedding[tokens].astype(np.float64)

    def between_blocks(self, i, h):
        return h

    @property
    def norm_dim(self) -> int:
        return self.config.d_model

    def check_shapes(self):
        c = self.config
        expect = {
            "token_embedding": (c.vocab_size, c.d_model),
            "final_norm": (c.d_model,),
            "lm_head": (c.d_model, c.vocab_size),
        }
        block_shapes = {
            "attn_norm": (c.d_model,), "wq": (c.d_model, c.d_model), "wk": (c.d_model, c.d_model),
            "wv": (c.d_model, c.d_model), "wo": (c.d_model, c.d_model), "mlp_norm": (c.d_model,),
            "w_up": (c.d_model, c.d_ff), "w_down": (c.d_ff, c.d_model),
        }
        if len(self.blocks) != c.n_layers:
            raise PreconditionError(f"config says {c.n_layers} blocks, model has {len(self.blocks)}")
        for i in range(c.n_layers):
            for k, v in block_shapes.items():
                expect[f"blocks.{i}.{k}"] = v
        for name, arr in self.tensors().items():
            if tuple(arr.shape) != expect[name]:
                raise PreconditionError(f"tensor {name} has shape {arr.shape}, expected {expect[name]}")


def init_model(config: ModelConfig, seed: int = 0, dtype=np.float32) -> TransformerModel:
    """Random initialization: unit-variance embeddings, fan-in scaled projections."""
    rng = np.random.default_rng(seed)
    d, f = config.d_model, config.d_ff
    out_scale = 1.0 / np.sqrt(2.0 * max(config.n_layers, 1))

    def lin(fan_in, fan_out, scale=1.0):
        return (rng.standard_normal((fan_in, fan_out)) * scale / np.sqrt(fan_in)).astype(dtype)

    blocks = []
    for _ in range(config.n_layers):
        blocks.append(Block(
            attn_norm=np.ones(d, dtype=dtype),
            wq=lin(d, d), wk=lin(d, d), wv=lin(d, d), wo=lin(d, d, out_scale),
            mlp_norm=np.ones(d, dtype=dtype),
            w_up=lin(d, f), w_down=lin(f, d, out_scale),
        ))
    return TransformerModel(
        config=config,
        token_embedding=rng.standard_normal((config.vocab_size, d)).astype(dtype),
        blocks=tuple(blocks),
        final_norm=np.ones(d, dtype=dtype),
        lm_head=lin(d, config.vocab_size),
    )


# -- tokenizer ---------------------------------------------------------------

def encode(text: str) -> list:
    return list(text.encode("utf-8"))


def decode(tokens: Sequence[int]) -> str:
    return bytes(int(t) for t in tokens).decode("utf-8")


# -- forward -----------------------------------------------------------------

@dataclass
class HiddenTrace:
    block_inputs: list = field(default_factory=list)
    block_outputs: list = field(default_factory=list)


def rms_norm(x, gain, dim: int):
    """``gain * x / sqrt(sum(x^2)/dim + eps)``.

    ``dim`` is the width the mean is taken over. It equals the last axis for an
    unsliced model; a sliced model keeps the original width so the norm of a
    rotated, truncated vector stays on the same scale.
    """
    r = np.sqrt(np.sum(x * x, axis=-1, keepdims=True) / dim + RMS_EPS)
    return (x / r) * gain


def rope_tables(t: int, head_dim: int):
    half = head_dim // 2
    inv_freq = ROPE_BASE ** (-np.arange(half, dtype=np.float64) / half)
    ang = np.arange(t, dtype=np.float64)[:, None] * inv_freq[None, :]
    return np.cos(ang), np.sin(ang)


def apply_rope(x, cos, sin, inverse: bool = False):
    """Rotate (..., T, head_dim) pairs (j, j + half) by position-dependent angles."""
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    if inverse:
        sin = -sin
    return np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)


def gelu(x):
    return 0.5 * x * (1.0 + np.tanh(0.7978845608028654 * (x + 0.044715 * x * x * x)))


def _split_heads(x, n_heads):
    b, t, d = x.shape
    return x.reshape(b, t, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, t, hd = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * hd)


def block_forward(h, blk: Block, config: ModelConfig, rope, norm_dim: int, cache: dict | None = None):
    """One decoder block on a (B, T, width) residual stream.

    When ``cache`` is a dict, intermediates needed by the backward pass are
    stored in it.
    """
    w = {k: np.asarray(v, dtype=np.float64) for k, v in blk.tensors().items()}
    cos, sin = rope
    t = h.shape[1]
    hd = config.head_dim

    n1 = rms_norm(h, w["attn_norm"], norm_dim)
    q = apply_rope(_split_heads(n1 @ w["wq"], config.n_heads), cos, sin)
    k = apply_rope(_split_heads(n1 @ w["wk"], config.n_heads), cos, sin)
    v = _split_heads(n1 @ w["wv"], config.n_heads)
    scores = (q @ k.transpose(0, 1, 3, 2)) / np.sqrt(hd)
    mask = np.triu(np.ones((t, t), dtype=bool), 1)
    scores = np.where(mask, -np.inf, scores)
    scores = scores - scores.max(axis=-1, keepdims=True)
    p = np.exp(scores)
    p /= p.sum(axis=-1, keepdims=True)
    o = _merge_heads(p @ v)
    h1 = h + o @ w["wo"]

    n2 = rms_norm(h1, w["mlp_norm"], norm_dim)
    u = n2 @ w["w_up"]
    a = gelu(u)
    h2 = h1 + a @ w["w_down"]

    if cache is not None:
        cache.update(h=h, n1=n1, q=q, k=k, v=v, p=p, o=o, h1=h1, n2=n2, u=u, a=a, w=w)
    return h2


def forward(model, tokens, trace: bool = False):
    """Logits for a token sequence (T,) or batch (B, T).

    Returns ``(logits, trace)``; the trace is None unless requested and holds
    the residual stream entering and leaving every block.
    """
    toks = np.asarray(tokens, dtype=np.int64)
    single = toks.ndim == 1
    if single:
        toks = toks[None, :]
    cfg = model.config
    if toks.shape[1] > cfg.max_seq:
        raise PreconditionError(f"sequence of {toks.shape[1]} tokens exceeds max_seq={cfg.max_seq}")
    if toks.size and (toks.min() < 0 or toks.max() >= cfg.vocab_size):
        raise PreconditionError("token id out of vocabulary range")

    rope = rope_tables(toks.shape[1], cfg.head_dim)
    tr = HiddenTrace() if trace else None
    h = model.embed(toks)
    for i, blk in enumerate(model.blocks):
        out = block_forward(h, blk, cfg, rope, model.norm_dim)
        if tr is not None:
            tr.block_inputs.append(h[0] if single else h)
            tr.block_outputs.append(out[0] if single else out)
        h = model.between_blocks(i, out)
    logits = rms_norm(h, np.asarray(model.final_norm, dtype=np.float64), cfg.d_model) @ np.asarray(
        model.lm_head, dtype=np.float64
    )
    return (logits[0] if single else logits), tr


def log_softmax(logits):
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))

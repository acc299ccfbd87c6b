"""Layer redundancy scores and per-block input Gram matrices.

The redundancy of block i is the cosine similarity between the residual
stream entering and leaving the block, averaged over every calibration token
position, then min-max scaled across blocks. Higher means the block changes
its input less, so it can be sliced harder.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, PreconditionError
from .linalg import gram_accumulate
from .model import forward


def iter_windows(tokens, window: int, offset: int = 0):
    """Non-overlapping windows of ``window`` tokens starting at ``offset``; the tail may be short."""
    toks = np.asarray(tokens, dtype=np.int64)
    for start in range(offset, len(toks), window):
        yield toks[start : start + window]


def _batched(windows, batch_size):
    """Group equal-length windows into (B, T) arrays, preserving order."""
    batch = []
    for w in windows:
        if batch and (len(batch) == batch_size or len(w) != len(batch[0])):
            yield np.stack(batch)
            batch = []
        batch.append(w)
    if batch:
        yield np.stack(batch)


def traced_batches(model, corpus, batch_size: int = 8, window: int | None = None, offset: int = 0):
    """Yield the HiddenTrace of each (B, T) batch of corpus windows."""
    window = window or model.config.max_seq
    for batch in _batched(iter_windows(corpus, window, offset), batch_size):
        _, trace = forward(model, batch, trace=True)
        yield trace


@dataclass
class LRAccumulator:
    """Mergeable partial sums of per-token cosine similarity."""

    n_layers: int
    cos_sum: np.ndarray = None
    count: np.ndarray = None
    skipped: np.ndarray = None

    def __post_init__(self):
        if self.cos_sum is None:
            self.cos_sum = np.zeros(self.n_layers)
            self.count = np.zeros(self.n_layers, dtype=np.int64)
            self.skipped = np.zeros(self.n_layers, dtype=np.int64)

    def add(self, i: int, block_in, block_out):
        x = np.asarray(block_in, dtype=np.float64).reshape(-1, block_in.shape[-1])
        y = np.asarray(block_out, dtype=np.float64).reshape(-1, block_out.shape[-1])
        nx = np.linalg.norm(x, axis=1)
        ny = np.linalg.norm(y, axis=1)
        ok = (nx > 0) & (ny > 0)
        cos = np.sum(x[ok] * y[ok], axis=1) / (nx[ok] * ny[ok])
        self.cos_sum[i] += float(np.sum(np.clip(cos, -1.0, 1.0)))
        self.count[i] += int(ok.sum())
        self.skipped[i] += int((~ok).sum())

    def add_trace(self, trace):
        for i, (a, b) in enumerate(zip(trace.block_inputs, trace.block_outputs)):
            self.add(i, a, b)

    def merge(self, other: "LRAccumulator") -> "LRAccumulator":
        return LRAccumulator(
            self.n_layers,
            self.cos_sum + other.cos_sum,
            self.count + other.count,
            self.skipped + other.skipped,
        )

    def raw_lr(self) -> np.ndarray:
        if np.any(self.count == 0):
            raise PreconditionError("no usable token positions for at least one block")
        return self.cos_sum / self.count


def normalize_lr(raw):
    """Min-max scale to [0, 1]. Returns ``(values, degenerate)``.

    When every entry is equal there is no ranking to preserve; all values
    become 0.5 and ``degenerate`` is True, which makes the downstream
    schedule constant.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.size < 1:
        raise PreconditionError("normalize_lr needs at least one value")
    lo, hi = raw.min(), raw.max()
    if hi == lo:
        return np.full(raw.shape, 0.5), True
    return (raw - lo) / (hi - lo), False


@dataclass
class LayerProfile:
    raw_lr: np.ndarray
    normalized_lr: np.ndarray
    tokens_seen: int
    calibration_corpus_id: str = ""
    model_id: str = ""
    degenerate: bool = False
    skip_tally: int = 0
    d_model: int | None = None
    extra: dict = field(default_factory=dict)

    @property
    def n_layers(self) -> int:
        return len(self.raw_lr)

    @classmethod
    def from_raw(cls, raw, **kw) -> "LayerProfile":
        norm, degenerate = normalize_lr(raw)
        return cls(raw_lr=np.asarray(raw, dtype=np.float64), normalized_lr=norm, degenerate=degenerate, **kw)

    def to_dict(self) -> dict:
        out = {
            "model_id": self.model_id,
            "corpus_id": self.calibration_corpus_id,
            "raw_lr": [float(x) for x in self.raw_lr],
            "normalized_lr": [float(x) for x in self.normalized_lr],
            "tokens_seen": int(self.tokens_seen),
            "degenerate_flag": bool(self.degenerate),
            "skip_tally": int(self.skip_tally),
        }
        if self.d_model is not None:
            out["d_model"] = int(self.d_model)
        out.update(self.extra)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "LayerProfile":
        try:
            known = {"model_id", "corpus_id", "raw_lr", "normalized_lr", "tokens_seen",
                     "degenerate_flag", "skip_tally", "d_model"}
            return cls(
                raw_lr=np.asarray(d["raw_lr"], dtype=np.float64),
                normalized_lr=np.asarray(d["normalized_lr"], dtype=np.float64),
                tokens_seen=int(d["tokens_seen"]),
                calibration_corpus_id=d.get("corpus_id", ""),
                model_id=d.get("model_id", ""),
                degenerate=bool(d.get("degenerate_flag", False)),
                skip_tally=int(d.get("skip_tally", 0)),
                d_model=d.get("d_model"),
                extra={k: v for k, v in d.items() if k not in known},
            )
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"malformed profile JSON: {e}") from None

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "LayerProfile":
        try:
            return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
        except (OSError, json.JSONDecodeError) as e:
            raise FormatError(f"cannot read profile {path}: {e}") from None


def profile_lr(model, corpus, batch_size: int = 8, window: int | None = None,
               corpus_id: str = "", model_id: str = "") -> LayerProfile:
    """Score every block's redundancy over a calibration token stream."""
    corpus = np.asarray(corpus, dtype=np.int64)
    if corpus.size < 1:
        raise PreconditionError("calibration corpus is empty")
    if batch_size < 1:
        raise PreconditionError("batch_size must be >= 1")
    acc = LRAccumulator(model.config.n_layers)
    for trace in traced_batches(model, corpus, batch_size, window):
        acc.add_trace(trace)
    return LayerProfile.from_raw(
        acc.raw_lr(),
        tokens_seen=int(corpus.size),
        calibration_corpus_id=corpus_id,
        model_id=model_id,
        skip_tally=int(acc.skipped.sum()),
        d_model=model.config.d_model,
    )


@dataclass
class CovarianceStats:
    grams: list  # per block, (d, d) float64
    rows_seen: int = 0
    warnings: list = field(default_factory=list)

    def merge(self, other: "CovarianceStats") -> "CovarianceStats":
        if len(self.grams) != len(other.grams):
            raise PreconditionError("cannot merge statistics for different depths")
        return CovarianceStats(
            [a + b for a, b in zip(self.grams, other.grams)],
            self.rows_seen + other.rows_seen,
            self.warnings + other.warnings,
        )


def collect_covariances(model, corpus, batch_size: int = 8, window: int | None = None,
                        offset: int = 0) -> CovarianceStats:
    """Accumulate ``sum_t x_t^T x_t`` over the residual stream entering each block."""
    corpus = np.asarray(corpus, dtype=np.int64)
    d = model.config.d_model
    grams = [np.zeros((d, d)) for _ in range(model.config.n_layers)]
    rows = 0
    for trace in traced_batches(model, corpus, batch_size, window, offset):
        for i, x in enumerate(trace.block_inputs):
            grams[i] = gram_accumulate(grams[i], x.reshape(-1, d))
        if trace.block_inputs:
            rows += int(np.prod(trace.block_inputs[0].shape[:-1]))
    notes = []
    if rows < d:
        msg = f"only {rows} calibration rows for width {d}; Gram matrices are rank-deficient"
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        notes.append(msg)
    return CovarianceStats(grams, rows, notes)

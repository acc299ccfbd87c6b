"""PCA-rotation slicing with a per-block kept width, plus the drop-layers baseline.

For block i with input Gram eigenvectors Q_i (descending eigenvalues) and
kept width k_i, let P_i be the first k_i columns of Q_i. The residual stream
of block i is carried as ``h P_i``: input-side projections become ``P_i^T W``,
output-side projections ``W P_i``, and consecutive blocks are bridged by the
adapter ``P_i^T P_{i+1}``. With k_i = d every P_i is orthogonal and the
sliced network computes the same function as the source.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np

from .errors import PreconditionError, TransformError
from .linalg import EigenDecomposition, sym_eig
from .model import BLOCK_TENSORS, Block, ModelConfig, TransformerModel


@dataclass(frozen=True)
class SlicedModel:
    config: ModelConfig
    widths: tuple
    token_embedding: np.ndarray  # (vocab, d)
    embedding_projector: np.ndarray  # (d, k_0)
    blocks: tuple  # block i weights have residual side k_i
    adapters: tuple  # (k_i, k_{i+1}) for i < n - 1
    head_reconstructor: np.ndarray  # (k_{n-1}, d)
    final_norm: np.ndarray
    lm_head: np.ndarray
    metadata: dict = field(default_factory=dict, compare=False)

    kind = "sliced"

    def tensors(self) -> dict:
        out = {"token_embedding": self.token_embedding, "embedding_projector": self.embedding_projector}
        for i, blk in enumerate(self.blocks):
            for name, arr in blk.tensors().items():
                out[f"blocks.{i}.{name}"] = arr
        for i, a in enumerate(self.adapters):
            out[f"adapters.{i}"] = a
        out["head_reconstructor"] = self.head_reconstructor
        out["final_norm"] = self.final_norm
        out["lm_head"] = self.lm_head
        return out

    @property
    def dtype(self):
        return self.token_embedding.dtype

    def embed(self, tokens):
        return self.token_embedding[tokens].astype(np.float64) @ self.embedding_projector.astype(np.float64)

    def between_blocks(self, i, h):
        if i < len(self.adapters):
            return h @ self.adapters[i].astype(np.float64)
        return h @ self.head_reconstructor.astype(np.float64)

    @property
    def norm_dim(self) -> int:
        return self.config.d_model


def absorb_norm_scales(model: TransformerModel) -> TransformerModel:
    """Fold every RMSNorm gain into the projection that reads the normalized vector."""
    gains = [b.attn_norm for b in model.blocks] + [b.mlp_norm for b in model.blocks] + [model.final_norm]
    if all(np.all(g == 1) for g in gains):
        return model
    dt = model.dtype

    def fold(g, w):
        return (np.asarray(g, dtype=np.float64)[:, None] * np.asarray(w, dtype=np.float64)).astype(dt)

    blocks = []
    for b in model.blocks:
        blocks.append(Block(
            attn_norm=np.ones_like(b.attn_norm),
            wq=fold(b.attn_norm, b.wq), wk=fold(b.attn_norm, b.wk), wv=fold(b.attn_norm, b.wv),
            wo=b.wo,
            mlp_norm=np.ones_like(b.mlp_norm),
            w_up=fold(b.mlp_norm, b.w_up), w_down=b.w_down,
        ))
    return replace(
        model,
        blocks=tuple(blocks),
        final_norm=np.ones_like(model.final_norm),
        lm_head=fold(model.final_norm, model.lm_head),
    )


def compute_rotations(stats) -> list:
    """Eigendecompose each block's input Gram matrix (descending eigenvalues)."""
    out = []
    for i, g in enumerate(stats.grams):
        try:
            out.append(sym_eig(g))
        except Exception as e:
            raise type(e)(f"block {i}: {e}") from e
    return out


def _as_q(rot):
    return rot.eigenvectors if isinstance(rot, EigenDecomposition) else np.asarray(rot, dtype=np.float64)


def slice_model(model: TransformerModel, schedule, rotations, provenance: dict | None = None) -> SlicedModel:
    """Rotate every block into its PCA basis and keep the leading ``kept_dims[i]`` directions."""
    cfg = model.config
    n, d = cfg.n_layers, cfg.d_model
    gains = [b.attn_norm for b in model.blocks] + [b.mlp_norm for b in model.blocks] + [model.final_norm]
    if not all(np.all(g == 1) for g in gains):
        raise PreconditionError("slice_model needs a model with norm gains absorbed (see absorb_norm_scales)")
    widths = getattr(schedule, "kept_dims", schedule)
    if widths is None or len(widths) != n:
        raise TransformError(f"schedule covers {0 if widths is None else len(widths)} blocks, model has {n}")
    if rotations is None or len(rotations) != n:
        raise TransformError(f"got {0 if rotations is None else len(rotations)} rotations for {n} blocks")
    widths = [int(k) for k in widths]
    if any(k < 1 or k > d for k in widths):
        raise TransformError(f"kept widths must lie in [1, {d}], got {widths}")
    dt = model.dtype
    f64 = lambda a: np.asarray(a, dtype=np.float64)  # noqa: E731
    # C order keeps matmul rounding identical to a reloaded container
    out = lambda a: np.ascontiguousarray(a, dtype=dt)  # noqa: E731
    ps = []
    for i, (rot, k) in enumerate(zip(rotations, widths)):
        q = _as_q(rot)
        if q.shape != (d, d):
            raise TransformError(f"rotation for block {i} has shape {q.shape}, expected {(d, d)}")
        ps.append(q[:, :k])

    blocks = []
    for b, p in zip(model.blocks, ps):
        k = p.shape[1]
        blocks.append(Block(
            attn_norm=np.ones(k, dtype=dt),
            wq=out(p.T @ f64(b.wq)),
            wk=out(p.T @ f64(b.wk)),
            wv=out(p.T @ f64(b.wv)),
            wo=out(f64(b.wo) @ p),
            mlp_norm=np.ones(k, dtype=dt),
            w_up=out(p.T @ f64(b.w_up)),
            w_down=out(f64(b.w_down) @ p),
        ))
    adapters = tuple(out(ps[i].T @ ps[i + 1]) for i in range(n - 1))
    eye = np.eye(d)
    return SlicedModel(
        config=cfg,
        widths=tuple(widths),
        token_embedding=model.token_embedding,
        embedding_projector=out(ps[0] if ps else eye),
        blocks=tuple(blocks),
        adapters=adapters,
        head_reconstructor=out(ps[-1].T if ps else eye),
        final_norm=model.final_norm,
        lm_head=model.lm_head,
        metadata=dict(provenance or {}),
    )


@dataclass(frozen=True)
class ParameterCount:
    total: int
    per_block: tuple
    pruned_fraction_vs: float | None = None


def count_parameters(model, reference=None) -> ParameterCount:
    total = sum(int(np.asarray(a).size) for a in model.tensors().values())
    per_block = tuple(sum(int(a.size) for a in b.tensors().values()) for b in model.blocks)
    frac = None
    if reference is not None:
        ref_total = count_parameters(reference).total
        frac = 1.0 - total / ref_total
    return ParameterCount(total, per_block, frac)


@dataclass(frozen=True)
class DropReport:
    dropped: tuple
    kept: tuple
    block_pruned_fraction: Fraction
    pruned_fraction: float


def drop_layers_baseline(model: TransformerModel, profile, count: int):
    """Remove the ``count`` most redundant whole blocks; returns ``(model, DropReport)``."""
    n = model.config.n_layers
    if not 0 <= count < n:
        raise PreconditionError(f"can drop between 0 and {n - 1} of {n} blocks, asked for {count}")
    lr = np.asarray(getattr(profile, "normalized_lr", profile), dtype=np.float64)
    if lr.shape != (n,):
        raise PreconditionError(f"profile covers {lr.size} blocks, model has {n}")
    order = np.argsort(-lr, kind="stable")
    dropped = tuple(sorted(int(i) for i in order[:count]))
    kept = tuple(i for i in range(n) if i not in dropped)
    new = replace(
        model,
        config=replace(model.config, n_layers=len(kept)),
        blocks=tuple(model.blocks[i] for i in kept),
    )
    before = count_parameters(model)
    after = count_parameters(new)
    block_total = sum(before.per_block)
    block_frac = Fraction(sum(before.per_block[i] for i in dropped), block_total) if block_total else Fraction(0)
    return new, DropReport(dropped, kept, block_frac, 1.0 - after.total / before.total)

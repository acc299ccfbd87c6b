"""Hand-written backward pass for the fixed architecture, plus Adam.

Gradients are computed in float64 against the same ``block_forward`` the
inference path uses, so there is only one definition of the forward math.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import PreconditionError, TrainingError
from .model import (
    RMS_EPS,
    BLOCK_TENSORS,
    Block,
    TransformerModel,
    _merge_heads,
    _split_heads,
    apply_rope,
    block_forward,
    log_softmax,
    rms_norm,
    rope_tables,
)

_GELU_C = 0.7978845608028654


@dataclass(frozen=True)
class TrainHyperparams:
    lr: float = 3e-3
    batch_size: int = 8
    seq_len: int = 64
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 1.0
    seed: int = 0


def _gelu_grad(x):
    inner = _GELU_C * (x + 0.044715 * x * x * x)
    t = np.tanh(inner)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)


def _rms_backward(x, gain, dim, dy):
    r = np.sqrt(np.sum(x * x, axis=-1, keepdims=True) / dim + RMS_EPS)
    u = x / r
    dgain = np.sum(dy * u, axis=tuple(range(x.ndim - 1)))
    du = dy * gain
    dx = (du - u * np.sum(du * u, axis=-1, keepdims=True) / dim) / r
    return dx, dgain


def _flat(x):
    return x.reshape(-1, x.shape[-1])


def _block_backward(dh2, c, config, rope):
    w = c["w"]
    dim = config.d_model
    cos, sin = rope
    g = {}

    g["w_down"] = _flat(c["a"]).T @ _flat(dh2)
    du = (dh2 @ w["w_down"].T) * _gelu_grad(c["u"])
    g["w_up"] = _flat(c["n2"]).T @ _flat(du)
    dh1, g["mlp_norm"] = _rms_backward(c["h1"], w["mlp_norm"], dim, du @ w["w_up"].T)
    dh1 = dh1 + dh2

    g["wo"] = _flat(c["o"]).T @ _flat(dh1)
    do = _split_heads(dh1 @ w["wo"].T, config.n_heads)
    p, q, k, v = c["p"], c["q"], c["k"], c["v"]
    dp = do @ v.transpose(0, 1, 3, 2)
    dv = p.transpose(0, 1, 3, 2) @ do
    ds = p * (dp - np.sum(dp * p, axis=-1, keepdims=True)) / np.sqrt(config.head_dim)
    dq = _merge_heads(apply_rope(ds @ k, cos, sin, inverse=True))
    dk = _merge_heads(apply_rope(ds.transpose(0, 1, 3, 2) @ q, cos, sin, inverse=True))
    dv = _merge_heads(dv)
    n1 = _flat(c["n1"])
    g["wq"], g["wk"], g["wv"] = n1.T @ _flat(dq), n1.T @ _flat(dk), n1.T @ _flat(dv)
    dn1 = dq @ w["wq"].T + dk @ w["wk"].T + dv @ w["wv"].T
    dh, g["attn_norm"] = _rms_backward(c["h"], w["attn_norm"], dim, dn1)
    return dh + dh1, g


def loss_and_grads(model: TransformerModel, inputs, targets):
    """Mean next-token cross-entropy over a (B, T) batch and its gradient.

    Gradients come back as a name -> float64 array dict keyed like
    ``model.tensors()``.
    """
    inputs = np.asarray(inputs, dtype=np.int64)
    targets = np.asarray(targets, dtype=np.int64)
    if inputs.ndim == 1:
        inputs, targets = inputs[None], targets[None]
    cfg = model.config
    rope = rope_tables(inputs.shape[1], cfg.head_dim)

    h = np.asarray(model.token_embedding, dtype=np.float64)[inputs]
    caches = []
    for blk in model.blocks:
        c = {}
        h = block_forward(h, blk, cfg, rope, cfg.d_model, cache=c)
        caches.append(c)
    gf = np.asarray(model.final_norm, dtype=np.float64)
    wlm = np.asarray(model.lm_head, dtype=np.float64)
    nf = rms_norm(h, gf, cfg.d_model)
    logits = nf @ wlm
    logp = log_softmax(logits)
    n = targets.size
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = -float(np.sum(picked)) / n

    dlogits = np.exp(logp)
    np.put_along_axis(dlogits, targets[..., None], np.take_along_axis(dlogits, targets[..., None], -1) - 1.0, -1)
    dlogits /= n
    grads = {"lm_head": _flat(nf).T @ _flat(dlogits)}
    dh, grads["final_norm"] = _rms_backward(h, gf, cfg.d_model, dlogits @ wlm.T)
    for i in reversed(range(cfg.n_layers)):
        dh, g = _block_backward(dh, caches[i], cfg, rope)
        for k_, v_ in g.items():
            grads[f"blocks.{i}.{k_}"] = v_
    demb = np.zeros((cfg.vocab_size, cfg.d_model))
    np.add.at(demb, inputs.reshape(-1), _flat(dh))
    grads["token_embedding"] = demb
    return loss, grads


def model_from_tensors(template: TransformerModel, tensors: dict, dtype=None) -> TransformerModel:
    cast = (lambda a: np.asarray(a, dtype=dtype)) if dtype is not None else (lambda a: a)
    blocks = tuple(
        Block(**{k: cast(tensors[f"blocks.{i}.{k}"]) for k in BLOCK_TENSORS})
        for i in range(template.config.n_layers)
    )
    return replace(
        template,
        token_embedding=cast(tensors["token_embedding"]),
        blocks=blocks,
        final_norm=cast(tensors["final_norm"]),
        lm_head=cast(tensors["lm_head"]),
    )


def _sample_batch(rng, corpus, batch_size, seq_len):
    if len(corpus) < 2:
        raise PreconditionError("training corpus needs at least 2 tokens")
    span = min(seq_len + 1, len(corpus))
    starts = rng.integers(0, len(corpus) - span + 1, size=batch_size)
    windows = np.stack([corpus[s : s + span] for s in starts])
    return windows[:, :-1], windows[:, 1:]


def train_toy(model: TransformerModel, corpus, steps: int, hp: TrainHyperparams | None = None, losses=None):
    """Adam on next-token cross-entropy over random corpus windows.

    Returns a new model in the source dtype. Per-step batch losses are
    appended to ``losses`` when a list is given.
    """
    hp = hp or TrainHyperparams()
    corpus = np.asarray(corpus, dtype=np.int64)
    if corpus.size == 0:
        raise PreconditionError("training corpus is empty")
    if hp.seq_len > model.config.max_seq:
        raise PreconditionError(f"seq_len {hp.seq_len} exceeds max_seq {model.config.max_seq}")
    rng = np.random.default_rng(hp.seed)
    src_dtype = model.dtype
    params = {k: np.array(v, dtype=np.float64) for k, v in model.tensors().items()}
    m = {k: np.zeros_like(v) for k, v in params.items()}
    v2 = {k: np.zeros_like(v) for k, v in params.items()}
    current = model_from_tensors(model, params)

    for step in range(1, steps + 1):
        x, y = _sample_batch(rng, corpus, hp.batch_size, hp.seq_len)
        loss, grads = loss_and_grads(current, x, y)
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite loss at step {step}", step=step)
        if losses is not None:
            losses.append(loss)
        if hp.grad_clip:
            norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if norm > hp.grad_clip:
                grads = {k: g * (hp.grad_clip / norm) for k, g in grads.items()}
        bc1 = 1.0 - hp.beta1**step
        bc2 = 1.0 - hp.beta2**step
        for k, g in grads.items():
            m[k] = hp.beta1 * m[k] + (1 - hp.beta1) * g
            v2[k] = hp.beta2 * v2[k] + (1 - hp.beta2) * g * g
            params[k] -= hp.lr * (m[k] / bc1) / (np.sqrt(v2[k] / bc2) + hp.eps)
        current = model_from_tensors(model, params)

    out = model_from_tensors(model, params, dtype=src_dtype)
    return replace(out, metadata={**model.metadata, "train_steps": int(steps), "train_seed": int(hp.seed)})

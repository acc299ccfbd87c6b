#!/usr/bin/env python3
"""Train the toy model, score how much each block changes its input, and
turn those scores into per-block slice fractions."""
from pathlib import Path

import numpy as np

from dynslice import (
    ModelConfig,
    TrainHyperparams,
    build_schedule,
    encode,
    init_model,
    profile_lr,
    train_toy,
)

DATA = Path(__file__).resolve().parent.parent / "data"


def tokens(name):
    return np.asarray(encode((DATA / name).read_text(encoding="utf-8")))


# %% a few hundred Adam steps are enough for a 4-block byte model to learn the grammar
losses = []
model = train_toy(init_model(ModelConfig(), seed=0), tokens("train.txt"), 300,
                  TrainHyperparams(seq_len=64), losses=losses)
print(f"train loss  {losses[0]:.3f} -> {np.mean(losses[-20:]):.3f}")

# %% cosine between block input and output, averaged over every calibration token
prof = profile_lr(model, tokens("lr_calib.txt"), corpus_id="lr_calib.txt")
for i, (raw, norm) in enumerate(zip(prof.raw_lr, prof.normalized_lr)):
    print(f"block {i}  raw={raw:.4f}  normalized={norm:.3f}")

# %% the base fraction s_b is guaranteed; the rest of s_p follows redundancy
for s_b in (0.3, 0.2, 0.1, 0.0):
    s = build_schedule(prof.normalized_lr, 0.3, s_b, 64)
    fs = " ".join(f"{x:.3f}" for x in s.fs)
    print(f"s_b={s_b:.1f}  fs=[{fs}]  mean={s.fs.mean():.6f}  kept={s.kept_dims.tolist()}  clamped={s.clamped}")

#!/usr/bin/env python3
"""Compare dynamic slicing against constant slicing and whole-block removal
at roughly matched parameter budgets."""
from pathlib import Path

import numpy as np

from dynslice import (
    EvalTask,
    ModelConfig,
    TrainHyperparams,
    absorb_norm_scales,
    build_schedule,
    choice_accuracy,
    collect_covariances,
    compute_rotations,
    constant_schedule,
    count_parameters,
    drop_layers_baseline,
    encode,
    init_model,
    load_jsonl,
    perplexity,
    profile_lr,
    slice_model,
    train_toy,
)

DATA = Path(__file__).resolve().parent.parent / "data"


def tokens(name):
    return np.asarray(encode((DATA / name).read_text(encoding="utf-8")))


model = train_toy(init_model(ModelConfig(), seed=0), tokens("train.txt"), 300, TrainHyperparams(seq_len=64))
prof = profile_lr(model, tokens("lr_calib.txt"))
held = tokens("held_out.txt")
task = EvalTask.choice_task("cont", load_jsonl(DATA / "choice_continuation.jsonl"))

# %% gains go into the weights first so rotation commutes with RMSNorm
absorbed = absorb_norm_scales(model)
rots = compute_rotations(collect_covariances(absorbed, tokens("ppl_calib.txt")))


def report(name, m):
    pc = count_parameters(m, reference=model)
    print(f"{name:22s} pruned={pc.pruned_fraction_vs:7.3%}  ppl={perplexity(m, held):8.3f}  "
          f"acc={choice_accuracy(m, task):.3f}")


report("dense", model)
report("rotated, S_P=0", slice_model(absorbed, constant_schedule(4, 0.0, 64), rots))

# %%
for s_p in (0.3, 0.4):
    report(f"constant  S_P={s_p}", slice_model(absorbed, constant_schedule(4, s_p, 64), rots))
    report(f"dynamic   S_P={s_p} S_B=0.1", slice_model(absorbed, build_schedule(prof.normalized_lr, s_p, 0.1, 64), rots))

# %% dropping one of four blocks removes about a fifth of all parameters
dropped, rep = drop_layers_baseline(model, prof, 1)
print(f"drop blocks {list(rep.dropped)}: block fraction {rep.block_pruned_fraction}")
report("drop 1 block", dropped)

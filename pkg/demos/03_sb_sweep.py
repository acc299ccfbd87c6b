#!/usr/bin/env python3
"""Sweep the slice base on a 2% grid, pick it on the calibration corpus, and
compare with the median and mean over the grid."""
from pathlib import Path

import numpy as np

from dynslice import (
    EvalTask,
    ModelConfig,
    TrainHyperparams,
    encode,
    init_model,
    load_jsonl,
    profile_lr,
    sb_grid,
    select_sb_by_calibration,
    sweep_sb,
    train_toy,
)

DATA = Path(__file__).resolve().parent.parent / "data"


def tokens(name):
    return np.asarray(encode((DATA / name).read_text(encoding="utf-8")))


model = train_toy(init_model(ModelConfig(), seed=0), tokens("train.txt"), 300, TrainHyperparams(seq_len=64))
prof = profile_lr(model, tokens("lr_calib.txt"))
tasks = [
    EvalTask.perplexity_task("calib", tokens("ppl_calib.txt")),
    EvalTask.perplexity_task("held", tokens("held_out.txt")),
    EvalTask.choice_task("cont", load_jsonl(DATA / "choice_continuation.jsonl")[:200]),
]

# %%
report = sweep_sb(model, prof, 0.3, sb_grid(0.3), tasks, calibration=tokens("lr_calib.txt"))
for r in report.rows:
    print(f"s_b={r['s_b']:.2f}  kept={r['kept_dims']:12s}  ppl:calib={r['ppl:calib']:.3f}  "
          f"ppl:held={r['ppl:held']:.3f}  acc={r['acc:cont']:.3f}")

# %% the constant point s_b = s_p is always in the grid, so the minimum can only match or beat it
sel = select_sb_by_calibration(report, "calib")
print(f"\nselected s_b={sel['s_b_star']}  held ppl {sel['selected']['ppl:held']:.3f}"
      f"  vs constant {sel['baseline']['ppl:held']:.3f}")
for a in sel["aggregates"]:
    print(f"{a['metric']:10s} median={a['median']:.4f}  mean={a['mean']:.4f}")

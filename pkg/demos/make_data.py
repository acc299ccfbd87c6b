#!/usr/bin/env python3
"""Regenerate the toy corpora and the choice-task fixture under data/.

Two grammar styles stand in for a long-form book corpus (redundancy
calibration) and an encyclopedic one (perplexity calibration). Every file is
a pure function of the seeds below.
"""
from pathlib import Path

from dynslice.corpora import make_choice_items, save_jsonl, synthetic_text

DATA = Path(__file__).resolve().parent.parent / "data"

CORPORA = {
    "train.txt": (16384, 1, "story"),
    "lr_calib.txt": (4096, 2, "story"),
    "ppl_calib.txt": (4096, 3, "article"),
    "held_out.txt": (4096, 4, "story"),
}

# %%
DATA.mkdir(exist_ok=True)
for name, (n, seed, style) in CORPORA.items():
    (DATA / name).write_text(synthetic_text(n, seed=seed, style=style), encoding="utf-8")
    print(f"{name:15s} {n} chars  seed={seed}  style={style}")

# %%
# 500 items: true 16-char continuation vs a same-length span from elsewhere
held = (DATA / "held_out.txt").read_text(encoding="utf-8")
items = make_choice_items(held, 500, seed=5)
save_jsonl(items, DATA / "choice_continuation.jsonl")
print(f"choice_continuation.jsonl  {len(items)} items, gold=1 in {sum(i['gold'] for i in items)}")

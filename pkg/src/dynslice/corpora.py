"""Seeded toy corpora and two-way continuation tasks.

The text comes from a small English-like grammar, so a byte-level model
can learn spelling and some word order within a few hundred steps. Two
styles exist so that the redundancy-calibration text and the perplexity
text are different distributions drawn from the same vocabulary.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import TaskError

_NOUNS = ["cat", "dog", "river", "garden", "teacher", "engine", "city", "window", "farmer", "letter",
          "mountain", "child", "ship", "lamp", "forest", "baker", "market", "stone", "bird", "road"]
_VERBS = ["sees", "finds", "carries", "paints", "follows", "opens", "watches", "builds", "hears", "keeps"]
_ADJS = ["old", "quiet", "red", "small", "bright", "heavy", "cold", "green", "tired", "quick"]
_ADVS = ["slowly", "often", "today", "again", "quietly", "never", "always", "soon"]
_PLACES = ["near the hill", "by the sea", "in the town", "under the bridge", "at the station",
           "behind the wall", "across the field"]
_NAMES = ["Anna", "Tom", "Mara", "Jon", "Lena", "Paul", "Iris", "Sam"]


def _noun_phrase(rng):
    if rng.random() < 0.4:
        return f"the {rng.choice(_ADJS)} {rng.choice(_NOUNS)}"
    return f"the {rng.choice(_NOUNS)}"


def _sentence(rng, style: str) -> str:
    if style == "story":
        r = rng.random()
        if r < 0.35:
            s = f"{rng.choice(_NAMES)} {rng.choice(_VERBS)} {_noun_phrase(rng)} {rng.choice(_PLACES)}"
        elif r < 0.7:
            s = f"{_noun_phrase(rng)} {rng.choice(_ADVS)} {rng.choice(_VERBS)} {_noun_phrase(rng)}"
        else:
            s = f"{rng.choice(_NAMES)} said that {_noun_phrase(rng)} was {rng.choice(_ADJS)}"
    else:  # "article"
        r = rng.random()
        if r < 0.5:
            s = f"{_noun_phrase(rng)} is {rng.choice(_ADJS)} and {rng.choice(_ADJS)}"
        else:
            s = f"in the {rng.choice(_NOUNS)} {_noun_phrase(rng)} {rng.choice(_VERBS)} {_noun_phrase(rng)}"
    return s[0].upper() + s[1:] + "."


def synthetic_text(n_chars: int, seed: int = 0, style: str = "story") -> str:
    """About ``n_chars`` ASCII characters of grammar-generated prose (exactly n_chars)."""
    if style not in ("story", "article"):
        raise ValueError(f"unknown style {style!r}")
    rng = np.random.default_rng(seed)
    parts, size = [], 0
    while size < n_chars:
        s = _sentence(rng, style)
        s += "\n" if rng.random() < 0.15 else " "
        parts.append(s)
        size += len(s)
    return "".join(parts)[:n_chars]


def make_choice_items(text: str, n_items: int, context_chars: int = 48, option_chars: int = 16, seed: int = 0):
    """True continuation vs. a same-length span from elsewhere in ``text``.

    Both options come from the same text distribution, so a model that ignores
    the context is at chance. The gold position is a fair coin per item.
    """
    rng = np.random.default_rng(seed)
    span = context_chars + option_chars
    if len(text) < 2 * span:
        raise TaskError(f"text of {len(text)} chars too short for {span}-char items")
    items = []
    while len(items) < n_items:
        s = int(rng.integers(0, len(text) - span))
        ctx = text[s : s + context_chars]
        true = text[s + context_chars : s + span]
        r = int(rng.integers(0, len(text) - option_chars))
        if abs(r - (s + context_chars)) < option_chars:
            continue
        fake = text[r : r + option_chars]
        if fake == true:
            continue
        gold = int(rng.integers(0, 2))
        options = [true, fake] if gold == 0 else [fake, true]
        items.append({"context": ctx, "options": options, "gold": gold})
    return items


def save_jsonl(items, path):
    with open(path, "w", encoding="utf-8") as fh:
        for it in items:
            fh.write(json.dumps(it, sort_keys=True) + "\n")


def load_jsonl(path):
    items = []
    for i, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines()):
        if not line.strip():
            continue
        try:
            items.append(json.loads(line))
        except json.JSONDecodeError as e:
            raise TaskError(f"line {i + 1} of {path} is not JSON: {e}", item_index=i) from None
    return items

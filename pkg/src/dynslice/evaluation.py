"""Perplexity, two-way choice accuracy, slice-base sweeps and their selection.

Perplexity is ``exp`` of the mean natural-log next-token NLL over
non-overlapping ``max_seq`` windows; the first token of each window has no
context and is not scored.
"""
from __future__ import annotations

import csv
import io
import json
import math
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DynSliceError, PreconditionError, SelectionError, TaskError
from .model import encode, forward, log_softmax
from .profiler import _batched, collect_covariances, iter_windows
from .schedule import FS_MAX, build_schedule
from .slicer import absorb_norm_scales, compute_rotations, count_parameters, slice_model

WINDOW_POLICY = "non-overlapping windows of max_seq tokens; first token of each window unscored"


@dataclass
class EvalTask:
    name: str
    kind: str  # "perplexity" | "choice"
    tokens: np.ndarray | None = None
    items: list = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("perplexity", "choice"):
            raise TaskError(f"unknown task kind {self.kind!r}")
        if self.kind == "choice":
            validate_items(self.items)

    @classmethod
    def perplexity_task(cls, name, text_or_tokens):
        toks = encode(text_or_tokens) if isinstance(text_or_tokens, str) else text_or_tokens
        return cls(name=name, kind="perplexity", tokens=np.asarray(toks, dtype=np.int64))

    @classmethod
    def choice_task(cls, name, items):
        return cls(name=name, kind="choice", items=list(items))


def validate_items(items):
    for i, it in enumerate(items):
        try:
            ctx, opts, gold = it["context"], it["options"], it["gold"]
        except (KeyError, TypeError):
            raise TaskError(f"item {i} needs context, options and gold", item_index=i) from None
        if not isinstance(ctx, str) or not ctx:
            raise TaskError(f"item {i} has an empty or non-string context", item_index=i)
        if not isinstance(opts, list) or len(opts) < 2 or not all(isinstance(o, str) and o for o in opts):
            raise TaskError(f"item {i} needs at least two non-empty string options", item_index=i)
        if not isinstance(gold, int) or isinstance(gold, bool) or not 0 <= gold < len(opts):
            raise TaskError(f"item {i} has invalid gold index {gold!r}", item_index=i)


def nll_sum(model, tokens, batch_size: int = 8):
    """Summed next-token NLL and the number of scored positions."""
    toks = np.asarray(tokens, dtype=np.int64)
    window = model.config.max_seq
    total, count = 0.0, 0
    wins = [w for w in iter_windows(toks, window) if len(w) >= 2]
    for batch in _batched(wins, batch_size):
        logits, _ = forward(model, batch[:, :-1])
        logp = log_softmax(logits)
        picked = np.take_along_axis(logp, batch[:, 1:, None], axis=-1)
        total -= float(np.sum(picked))
        count += picked.size
    return total, count


def perplexity(model, corpus, batch_size: int = 8) -> float:
    toks = np.asarray(corpus, dtype=np.int64)
    if toks.size < 2:
        raise PreconditionError("perplexity needs at least 2 tokens")
    total, count = nll_sum(model, toks, batch_size)
    if count == 0:
        raise PreconditionError("corpus has no window with at least 2 tokens")
    return math.exp(total / count)


@dataclass
class ChoiceResult:
    accuracy: float
    predictions: list
    scores: list  # per item, per option summed log-likelihood
    ties: int


def score_choices(model, items, batch_size: int = 64) -> ChoiceResult:
    """Sum of option-token log-likelihoods given the context, per item and option."""
    validate_items(items)
    max_len = model.config.max_seq + 1
    seqs = []
    for i, it in enumerate(items):
        ctx = encode(it["context"])
        for j, opt in enumerate(it["options"]):
            o = encode(opt)
            if len(o) >= max_len:
                raise TaskError(f"item {i} option {j} longer than the model context", item_index=i)
            full = (ctx + o)[-max_len:]
            seqs.append((i, j, np.asarray(full, dtype=np.int64), len(o)))

    scores = [[0.0] * len(it["options"]) for it in items]
    by_len = {}
    for entry in seqs:
        by_len.setdefault((len(entry[2]), entry[3]), []).append(entry)
    for (_, n_opt), group in sorted(by_len.items()):
        for s in range(0, len(group), batch_size):
            chunk = group[s : s + batch_size]
            toks = np.stack([e[2] for e in chunk])
            logits, _ = forward(model, toks[:, :-1])
            logp = log_softmax(logits[:, -n_opt:, :])
            ll = np.take_along_axis(logp, toks[:, -n_opt:, None], axis=-1)[..., 0].sum(axis=1)
            for (i, j, _, _), v in zip(chunk, ll):
                scores[i][j] = float(v)

    preds, ties, correct = [], 0, 0
    for it, sc in zip(items, scores):
        best = max(sc)
        winners = [j for j, v in enumerate(sc) if v == best]
        ties += len(winners) > 1
        preds.append(winners[0])
        correct += winners[0] == it["gold"]
    return ChoiceResult(correct / len(items) if items else float("nan"), preds, scores, ties)


def choice_accuracy(model, task) -> float:
    items = task.items if isinstance(task, EvalTask) else task
    if isinstance(task, EvalTask) and task.kind != "choice":
        raise TaskError(f"task {task.name} is not a choice task")
    return score_choices(model, items).accuracy


def calibration_offset(seed: int, window: int) -> int:
    """Start offset of the first Gram-calibration window for a given seed."""
    return int(np.random.default_rng(seed).integers(0, window))


def sb_grid(s_p: float, step: float = 0.02) -> list:
    """0, step, 2*step, ... up to and always including s_p."""
    if step <= 0:
        raise PreconditionError("grid step must be positive")
    n = int(math.floor(s_p / step + 1e-9))
    grid = [round(i * step, 10) for i in range(n + 1)]
    if not math.isclose(grid[-1], s_p, abs_tol=1e-12):
        grid.append(float(s_p))
    else:
        grid[-1] = float(s_p)
    return grid


@dataclass
class SweepReport:
    rows: list
    metrics: list
    aggregates: list = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    BASE_COLUMNS = ("s_p", "s_b", "seed", "status", "realized_slice", "pruned_fraction", "clamped",
                    "kept_dims", "error")

    @property
    def columns(self):
        return list(self.BASE_COLUMNS) + list(self.metrics)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("# columns: " + ",".join(self.columns) + "\n")
        buf.write(f"# window_policy: {WINDOW_POLICY}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for r in self.rows:
            w.writerow([_fmt(r.get(c)) for c in self.columns])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "columns": self.columns,
            "rows": self.rows,
            "aggregates": self.aggregates,
            "window_policy": WINDOW_POLICY,
            "provenance": self.provenance,
        }

    def save(self, csv_path=None, json_path=None):
        if csv_path:
            Path(csv_path).write_text(self.to_csv(), encoding="utf-8")
        if json_path:
            Path(json_path).write_text(json.dumps(_clean(self.to_dict()), indent=2, sort_keys=True) + "\n",
                                       encoding="utf-8")

    @classmethod
    def from_dict(cls, d: dict) -> "SweepReport":
        metrics = [c for c in d["columns"] if c not in cls.BASE_COLUMNS]
        return cls(rows=d["rows"], metrics=metrics, aggregates=d.get("aggregates", []),
                   provenance=d.get("provenance", {}))


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _clean(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_clean(v) for v in obj]
    return obj


def aggregate(rows, metrics):
    """Median and mean of every metric over the successful rows of each s_p."""
    out = []
    for s_p in sorted({r["s_p"] for r in rows}):
        ok = [r for r in rows if r["s_p"] == s_p and r["status"] == "ok"]
        for m in metrics:
            vals = [r[m] for r in ok if r.get(m) is not None]
            if not vals:
                continue
            out.append({"s_p": s_p, "metric": m, "n": len(vals),
                        "median": statistics.median(vals), "mean": statistics.fmean(vals)})
    return out


def sweep_sb(model, profile, s_p: float, s_b_grid, tasks, seeds=(0,), calibration=None,
             fs_max: float = FS_MAX, jobs: int = 1) -> SweepReport:
    """Slice and evaluate at every (s_b, seed) point of the grid.

    ``calibration`` is the token stream the PCA Gram matrices come from. The
    seed picks the window offset into it, so different seeds rotate with
    differently aligned calibration contexts.
    """
    grid = [float(x) for x in s_b_grid]
    if not any(math.isclose(x, s_p, abs_tol=1e-12) for x in grid):
        raise PreconditionError("the s_b grid must contain s_b = s_p (the constant-slice baseline)")
    if any(x < 0 or x > s_p + 1e-12 for x in grid):
        raise PreconditionError("grid values must satisfy 0 <= s_b <= s_p")
    if calibration is None:
        raise PreconditionError("sweep_sb needs a calibration token stream for the Gram matrices")
    lr = np.asarray(getattr(profile, "normalized_lr", profile), dtype=np.float64)
    d = model.config.d_model
    absorbed = absorb_norm_scales(model)
    ref_params = count_parameters(model).total
    metrics = []
    for t in tasks:
        if t.kind == "perplexity":
            metrics.append(f"ppl:{t.name}")
        else:
            metrics += [f"acc:{t.name}", f"ties:{t.name}"]
    if sum(t.kind == "choice" for t in tasks) > 1:
        metrics.append("acc:average")

    rotations = {}
    for seed in seeds:
        off = calibration_offset(seed, model.config.max_seq)
        rotations[seed] = compute_rotations(collect_covariances(absorbed, calibration, offset=off))

    def run(point):
        s_b, seed = point
        row = {"s_p": float(s_p), "s_b": s_b, "seed": int(seed), "status": "ok", "error": None}
        try:
            sched = build_schedule(lr, s_p, s_b, d, fs_max=fs_max)
            sliced = slice_model(absorbed, sched, rotations[seed])
        except DynSliceError as e:
            row.update(status="failed", error=f"{e.code}: {e}")
            for m in metrics:
                row[m] = None
            return row
        row["realized_slice"] = sched.realized_mean_slice
        row["pruned_fraction"] = 1.0 - count_parameters(sliced).total / ref_params
        row["clamped"] = bool(sched.clamped)
        row["kept_dims"] = "/".join(str(int(k)) for k in sched.kept_dims)
        accs = []
        for t in tasks:
            if t.kind == "perplexity":
                row[f"ppl:{t.name}"] = perplexity(sliced, t.tokens)
            else:
                res = score_choices(sliced, t.items)
                row[f"acc:{t.name}"] = res.accuracy
                row[f"ties:{t.name}"] = res.ties
                accs.append(res.accuracy)
        if "acc:average" in metrics:
            row["acc:average"] = statistics.fmean(accs)
        return row

    points = [(s_b, seed) for seed in seeds for s_b in grid]
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as ex:
            rows = list(ex.map(run, points))
    else:
        rows = [run(p) for p in points]
    rows.sort(key=lambda r: (r["s_p"], r["seed"], r["s_b"]))
    agg_metrics = [m for m in metrics if not m.startswith("ties:")]
    return SweepReport(rows=rows, metrics=metrics, aggregates=aggregate(rows, agg_metrics))


def select_sb_by_calibration(report: SweepReport, calibration_corpus_id: str, seed=None) -> dict:
    """Pick s_b minimizing calibration perplexity (ties go to the smaller s_b).

    Returns the chosen row, the constant-slice row (s_b = s_p) and the
    median/mean aggregates for side-by-side reporting.
    """
    key = calibration_corpus_id if calibration_corpus_id.startswith("ppl:") else f"ppl:{calibration_corpus_id}"
    rows = report.rows
    if seed is None and rows:
        seed = min(r["seed"] for r in rows)
    rows = [r for r in rows if r["seed"] == seed]
    ok = [r for r in rows if r["status"] == "ok"]
    if not ok:
        raise SelectionError("every sweep row failed; nothing to select")
    if any(r.get(key) is None for r in ok):
        raise SelectionError(f"report has no {key} column for every successful row")
    best = min(ok, key=lambda r: (r[key], r["s_b"]))
    baseline = next((r for r in rows if math.isclose(r["s_b"], r["s_p"], abs_tol=1e-12)), None)
    held_out = {m: best[m] for m in report.metrics if m != key}
    return {
        "calibration_metric": key,
        "s_b_star": best["s_b"],
        "selected": best,
        "held_out": held_out,
        "baseline": baseline,
        "aggregates": [a for a in report.aggregates if a["s_p"] == best["s_p"]],
    }

"""Per-block slice fractions from normalized redundancy scores.

Every block loses a guaranteed base fraction ``s_b``; the remaining budget
``s_p - s_b`` is spread in proportion to redundancy so the fractions average
exactly ``s_p``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, PreconditionError, ScheduleError

FS_MAX = 0.95


@dataclass
class SliceSchedule:
    s_p: float
    s_b: float
    slr: np.ndarray
    fs: np.ndarray
    fs_pre_clamp: np.ndarray = None
    kept_dims: np.ndarray = None
    clamped: bool = False
    realized_mean_slice: float | None = None
    lr_source: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def n_layers(self) -> int:
        return len(self.fs)

    def to_dict(self) -> dict:
        out = {
            "s_p": float(self.s_p),
            "s_b": float(self.s_b),
            "lr_source": self.lr_source,
            "slr": [float(x) for x in self.slr],
            "fs_pre_clamp": [float(x) for x in (self.fs if self.fs_pre_clamp is None else self.fs_pre_clamp)],
            "fs": [float(x) for x in self.fs],
            "kept_dims": None if self.kept_dims is None else [int(k) for k in self.kept_dims],
            "realized_mean_slice": self.realized_mean_slice,
            "clamped": bool(self.clamped),
        }
        out.update(self.extra)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "SliceSchedule":
        known = {"s_p", "s_b", "lr_source", "slr", "fs_pre_clamp", "fs", "kept_dims",
                 "realized_mean_slice", "clamped"}
        try:
            return cls(
                s_p=float(d["s_p"]),
                s_b=float(d["s_b"]),
                slr=np.asarray(d["slr"], dtype=np.float64),
                fs=np.asarray(d["fs"], dtype=np.float64),
                fs_pre_clamp=np.asarray(d.get("fs_pre_clamp", d["fs"]), dtype=np.float64),
                kept_dims=None if d.get("kept_dims") is None else np.asarray(d["kept_dims"], dtype=np.int64),
                clamped=bool(d.get("clamped", False)),
                realized_mean_slice=d.get("realized_mean_slice"),
                lr_source=d.get("lr_source", ""),
                extra={k: v for k, v in d.items() if k not in known},
            )
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"malformed schedule JSON: {e}") from None

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "SliceSchedule":
        try:
            return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
        except (OSError, json.JSONDecodeError) as e:
            raise FormatError(f"cannot read schedule {path}: {e}") from None


def _check_fractions(s_p, s_b):
    if not (0.0 <= s_b <= s_p < 1.0):
        raise PreconditionError(f"need 0 <= s_b <= s_p < 1, got s_p={s_p}, s_b={s_b}")


def compute_schedule(lr_norm, s_p: float, s_b: float) -> SliceSchedule:
    """Redundancy-proportional slice fractions, before clamping and rounding."""
    _check_fractions(s_p, s_b)
    lr = np.asarray(lr_norm, dtype=np.float64)
    if lr.ndim != 1 or lr.size < 1:
        raise PreconditionError("lr_norm must be a non-empty vector")
    if np.any(lr < 0) or np.any(lr > 1) or not np.all(np.isfinite(lr)):
        raise PreconditionError("lr_norm entries must lie in [0, 1]")
    mean = float(np.mean(lr))
    budget = s_p - s_b
    if budget == 0.0:
        slr = np.zeros_like(lr)
        fs = np.full_like(lr, s_p)
    elif mean == 0.0:
        raise ScheduleError(
            f"all redundancy scores are zero; cannot distribute s_p - s_b = {budget:g} across blocks"
        )
    else:
        slr = lr * (budget / mean)
        fs = slr + s_b
    return SliceSchedule(s_p=float(s_p), s_b=float(s_b), slr=slr, fs=fs, fs_pre_clamp=fs.copy())


def clamp_and_redistribute(fs, s_b: float, fs_max: float = FS_MAX, max_iter: int = 100) -> np.ndarray:
    """Force every fraction into ``[s_b, fs_max]`` while keeping the mean.

    Mass cut off at one bound is handed to the entries that still have
    headroom in that direction, proportionally to that headroom.
    """
    fs = np.asarray(fs, dtype=np.float64)
    n = fs.size
    mean = float(np.mean(fs))
    tol = 1e-12
    if mean > fs_max + tol or mean < s_b - tol:
        raise ScheduleError(f"infeasible clamp: mean {mean:.6g} outside bounds [{s_b:g}, {fs_max:g}]")
    if np.all((fs >= s_b) & (fs <= fs_max)):
        return fs.copy()
    target = mean * n
    out = fs.copy()
    for _ in range(max_iter):
        out = np.clip(out, s_b, fs_max)
        deficit = target - float(np.sum(out))
        if abs(deficit) <= 1e-13 * max(1.0, abs(target)):
            break
        room = (fs_max - out) if deficit > 0 else (out - s_b)
        total = float(np.sum(room))
        if total <= 0:
            raise ScheduleError(f"no headroom left to redistribute {deficit:.3g}")
        out = out + np.sign(deficit) * room * min(1.0, abs(deficit) / total)
    else:
        raise ScheduleError("clamp redistribution did not settle")
    return np.clip(out, s_b, fs_max)


def _round_half_away(x):
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def to_kept_dims(fs, d_model: int):
    """Integer kept widths ``round((1 - fs) * d)``, floored at 1, plus the realized mean slice."""
    fs = np.asarray(fs, dtype=np.float64)
    if np.any(fs < 0) or np.any(fs >= 1):
        raise PreconditionError("slice fractions must lie in [0, 1)")
    # the 1e-9 guard stops products like 0.7 * 64 = 44.799999... from flipping at .5
    k = _round_half_away(np.round((1.0 - fs) * d_model, 9)).astype(np.int64)
    k = np.clip(k, 1, d_model)
    realized = 1.0 - float(k.sum()) / (d_model * len(k)) if len(k) else 0.0
    return k, realized


def build_schedule(lr_norm, s_p: float, s_b: float, d_model: int, fs_max: float = FS_MAX,
                   lr_source: str = "") -> SliceSchedule:
    """compute_schedule, then clamp, then discretize to kept widths."""
    sched = compute_schedule(lr_norm, s_p, s_b)
    pre = sched.fs.copy()
    fs = clamp_and_redistribute(pre, s_b, fs_max)
    sched.clamped = not np.array_equal(fs, pre)
    sched.fs = fs
    sched.fs_pre_clamp = pre
    sched.kept_dims, sched.realized_mean_slice = to_kept_dims(fs, d_model)
    sched.lr_source = lr_source
    return sched


def constant_schedule(n_layers: int, s_p: float, d_model: int) -> SliceSchedule:
    """Uniform slicing at s_p; identical to build_schedule with s_b = s_p."""
    return build_schedule(np.full(n_layers, 0.5), s_p, s_p, d_model)


def check_mean(fs, s_p: float, tol: float = 1e-9) -> bool:
    return math.isclose(float(np.mean(fs)), s_p, rel_tol=0.0, abs_tol=tol)

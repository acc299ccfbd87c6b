"""Command-line pipeline: train-toy, profile, schedule, slice, drop, eval, sweep.

Every flag may also come from a TOML or JSON file given with ``--config``.
Top-level keys apply to every subcommand, a table named after the
subcommand overrides them, and explicit flags override both. Keys use the
flag name with dashes turned into underscores.

Errors are printed to stderr as a single ``code: message`` line.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .container import load_model, save_model
from .corpora import load_jsonl
from .errors import DynSliceError, PreconditionError
from .evaluation import (
    EvalTask,
    calibration_offset,
    perplexity,
    sb_grid,
    score_choices,
    select_sb_by_calibration,
    sweep_sb,
)
from .model import ModelConfig, encode, init_model
from .profiler import LayerProfile, collect_covariances, profile_lr
from .schedule import FS_MAX, SliceSchedule, build_schedule
from .slicer import (
    absorb_norm_scales,
    compute_rotations,
    count_parameters,
    drop_layers_baseline,
    slice_model,
)
from .train import TrainHyperparams, train_toy

EXIT_CODES = {
    0: "success",
    1: "unexpected internal error",
    2: "usage: unknown flag or bad flag value",
    3: "format: malformed or inconsistent model/profile/schedule file",
    4: "schedule: infeasible slice schedule",
    5: "precondition: invalid input (missing path, bad fraction, bad config)",
    6: "training: non-finite loss",
    7: "numerical: eigendecomposition did not converge",
    8: "transform: schedule/rotations do not match the model",
    9: "task: malformed choice item",
    10: "selection: no successful sweep row to select from",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        sys.stderr.write(f"usage: {message.splitlines()[0]}\n")
        sys.exit(2)


def _digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _model_digest(path) -> str:
    p = Path(path)
    stem = p.with_suffix("") if p.suffix in (".json", ".bin") else p
    h = hashlib.sha256()
    for suffix in (".json", ".bin"):
        h.update(stem.with_suffix(suffix).read_bytes())
    return h.hexdigest()


def _provenance(seed=None, **inputs) -> dict:
    digests = {}
    for name, path in inputs.items():
        if path is None:
            continue
        if isinstance(path, (list, tuple)):
            for i, p in enumerate(path):
                digests[f"{name}[{i}]"] = _any_digest(p)
        else:
            digests[name] = _any_digest(path)
    return {"tool_version": __version__, "seed": seed, "input_digests": digests}


def _any_digest(path) -> str:
    p = Path(path)
    if p.suffix == ".json" and p.with_suffix(".bin").exists():
        return _model_digest(p)
    return _digest(p)


def _require(*paths):
    for p in paths:
        if p is None:
            continue
        for q in p if isinstance(p, (list, tuple)) else [p]:
            if not Path(q).exists():
                raise PreconditionError(f"input path {q} does not exist")


def _read_tokens(path) -> np.ndarray:
    return np.asarray(encode(Path(path).read_text(encoding="utf-8")), dtype=np.int64)


def _named(spec: str):
    """``name=path`` or bare ``path`` (named after its stem)."""
    if "=" in spec:
        name, path = spec.split("=", 1)
        return name, path
    return Path(spec).stem, spec


def _write_json(path, obj):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _check_fractions(sp, sb):
    if not (0.0 <= sb <= sp < 1.0):
        raise PreconditionError(f"need 0 <= sb <= sp < 1, got sp={sp}, sb={sb}")


# -- subcommands --------------------------------------------------------------

def cmd_train_toy(a):
    _require(a.corpus)
    cfg = ModelConfig(n_layers=a.n_layers, d_model=a.d_model, n_heads=a.n_heads, d_ff=a.d_ff,
                      vocab_size=256, max_seq=a.max_seq)
    hp = TrainHyperparams(lr=a.lr, batch_size=a.batch_size, seq_len=min(a.seq_len, a.max_seq), seed=a.seed)
    model = init_model(cfg, seed=a.seed)
    trained = train_toy(model, _read_tokens(a.corpus), a.steps, hp)
    prov = _provenance(a.seed, corpus=a.corpus)
    prov["hyperparams"] = {"steps": a.steps, "lr": a.lr, "batch_size": hp.batch_size, "seq_len": hp.seq_len}
    trained = replace(trained, metadata=prov)
    print(save_model(trained, a.out))


def cmd_profile(a):
    _require(a.model, a.corpus)
    model = load_model(a.model)
    prof = profile_lr(model, _read_tokens(a.corpus), batch_size=a.batch_size,
                      corpus_id=Path(a.corpus).name, model_id=_model_digest(a.model)[:16])
    prof.extra["provenance"] = _provenance(None, model=a.model, corpus=a.corpus)
    Path(a.out).parent.mkdir(parents=True, exist_ok=True)
    prof.save(a.out)
    print(a.out)


def cmd_schedule(a):
    _require(a.lr)
    _check_fractions(a.sp, a.sb)
    prof = LayerProfile.load(a.lr)
    d = a.d_model or prof.d_model
    if not d:
        raise PreconditionError("profile has no d_model; pass --d-model")
    sched = build_schedule(prof.normalized_lr, a.sp, a.sb, int(d), fs_max=a.fs_max, lr_source=Path(a.lr).name)
    sched.extra["d_model"] = int(d)
    sched.extra["provenance"] = _provenance(None, lr=a.lr)
    Path(a.out).parent.mkdir(parents=True, exist_ok=True)
    sched.save(a.out)
    print(a.out)


def cmd_slice(a):
    _require(a.model, a.calib, a.schedule, a.lr)
    model = load_model(a.model)
    d, n = model.config.d_model, model.config.n_layers
    if a.schedule:
        sched = SliceSchedule.load(a.schedule)
        if sched.kept_dims is None:
            raise PreconditionError("schedule file has no kept_dims")
    else:
        if a.sp is None:
            raise PreconditionError("slice needs --schedule or --sp")
        sb = a.sp if a.sb is None else a.sb
        _check_fractions(a.sp, sb)
        if a.lr:
            lr = LayerProfile.load(a.lr).normalized_lr
        elif sb == a.sp:
            lr = np.full(n, 0.5)
        else:
            raise PreconditionError("dynamic slicing (sb < sp) needs --lr")
        sched = build_schedule(lr, a.sp, sb, d, fs_max=a.fs_max)
    absorbed = absorb_norm_scales(model)
    stats = collect_covariances(absorbed, _read_tokens(a.calib), offset=calibration_offset(a.seed, model.config.max_seq))
    prov = _provenance(a.seed, model=a.model, calib=a.calib, schedule=a.schedule, lr=a.lr)
    prov["schedule"] = sched.to_dict()
    sliced = slice_model(absorbed, sched, compute_rotations(stats), provenance=prov)
    out = save_model(sliced, a.out)
    pc = count_parameters(sliced, reference=model)
    sys.stdout.write(f"{out}\tparams={pc.total}\tpruned_fraction={pc.pruned_fraction_vs:.6f}\n")


def cmd_drop(a):
    _require(a.model, a.lr)
    model = load_model(a.model)
    new, rep = drop_layers_baseline(model, LayerProfile.load(a.lr), a.count)
    prov = _provenance(None, model=a.model, lr=a.lr)
    prov.update(dropped=list(rep.dropped), block_pruned_fraction=str(rep.block_pruned_fraction),
                pruned_fraction=rep.pruned_fraction)
    new = replace(new, metadata=prov)
    out = save_model(new, a.out)
    sys.stdout.write(f"{out}\tdropped={list(rep.dropped)}\tblock_pruned_fraction={rep.block_pruned_fraction}"
                     f"\t({float(rep.block_pruned_fraction):.6f})\n")


def _load_tasks(corpora, tasks):
    out, paths = [], []
    for spec in corpora or []:
        name, path = _named(spec)
        _require(path)
        out.append(EvalTask.perplexity_task(name, _read_tokens(path)))
        paths.append(path)
    for spec in tasks or []:
        name, path = _named(spec)
        _require(path)
        out.append(EvalTask.choice_task(name, load_jsonl(path)))
        paths.append(path)
    return out, paths


def cmd_eval(a):
    _require(a.model)
    model = load_model(a.model)
    tasks, paths = _load_tasks(a.corpus, a.task)
    if not tasks:
        raise PreconditionError("eval needs at least one --corpus or --task")
    metrics = {}
    for t in tasks:
        if t.kind == "perplexity":
            metrics[f"ppl:{t.name}"] = perplexity(model, t.tokens)
        else:
            res = score_choices(model, t.items)
            metrics[f"acc:{t.name}"] = res.accuracy
            metrics[f"ties:{t.name}"] = res.ties
    report = {
        "model": Path(a.model).name,
        "kind": model.kind,
        "parameters": count_parameters(model).total,
        "metrics": metrics,
        "provenance": _provenance(None, model=a.model, inputs=paths),
    }
    if a.out:
        _write_json(a.out, report)
    for k, v in metrics.items():
        sys.stdout.write(f"{k}\t{v!r}\n")


def cmd_sweep(a):
    _require(a.model, a.lr, a.calib)
    model = load_model(a.model)
    prof = LayerProfile.load(a.lr)
    if a.sb_grid:
        grid = [float(x) for x in a.sb_grid.split(",")]
    else:
        grid = sb_grid(a.sp, a.sb_step)
    seeds = [int(s) for s in str(a.seeds).split(",")]
    tasks, paths = _load_tasks(a.corpus, a.task)
    if not any(t.kind == "perplexity" for t in tasks):
        raise PreconditionError("sweep needs at least one --corpus for calibration perplexity")
    select_by = a.select_by or next(t.name for t in tasks if t.kind == "perplexity")
    report = sweep_sb(model, prof, a.sp, grid, tasks, seeds=seeds, calibration=_read_tokens(a.calib),
                      fs_max=a.fs_max, jobs=a.jobs)
    report.provenance = _provenance(seeds, model=a.model, lr=a.lr, calib=a.calib, inputs=paths)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    csv_text = "# provenance: " + json.dumps(report.provenance, sort_keys=True) + "\n" + report.to_csv()
    (out / "sweep.csv").write_text(csv_text, encoding="utf-8")
    report.save(json_path=out / "sweep.json")
    selection = select_sb_by_calibration(report, select_by)
    selection["provenance"] = report.provenance
    _write_json(out / "selection.json", selection)
    ok = sum(r["status"] == "ok" for r in report.rows)
    sys.stdout.write(f"{out / 'sweep.csv'}\trows={len(report.rows)}\tok={ok}\ts_b*={selection['s_b_star']}\n")


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    epilog = "exit codes:\n" + "\n".join(f"  {k:>2}  {v}" for k, v in EXIT_CODES.items())
    p = _Parser(prog="dynslice", description="Redundancy-guided dynamic slicing of a toy transformer.",
                epilog=epilog, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--version", action="version", version=f"dynslice {__version__}")
    p.add_argument("--config", help="TOML or JSON file supplying flag defaults")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train-toy", help="train a toy model on a text corpus")
    t.add_argument("--corpus", required=True)
    t.add_argument("-o", "--out", required=True, help="output model path (manifest .json; blob .bin alongside)")
    t.add_argument("--steps", type=int, default=1000)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--n-layers", type=int, default=4)
    t.add_argument("--d-model", type=int, default=64)
    t.add_argument("--n-heads", type=int, default=4)
    t.add_argument("--d-ff", type=int, default=256)
    t.add_argument("--max-seq", type=int, default=256)
    t.add_argument("--lr", type=float, default=3e-3)
    t.add_argument("--batch-size", type=int, default=8)
    t.add_argument("--seq-len", type=int, default=128)
    t.set_defaults(func=cmd_train_toy)

    pr = sub.add_parser("profile", help="layer redundancy scores over a calibration corpus")
    pr.add_argument("--model", required=True)
    pr.add_argument("--corpus", required=True)
    pr.add_argument("-o", "--out", required=True)
    pr.add_argument("--batch-size", type=int, default=8)
    pr.set_defaults(func=cmd_profile)

    s = sub.add_parser("schedule", help="per-block slice fractions and kept widths")
    s.add_argument("--lr", required=True, help="profile JSON")
    s.add_argument("--sp", type=float, required=True)
    s.add_argument("--sb", type=float, required=True)
    s.add_argument("--fs-max", type=float, default=FS_MAX)
    s.add_argument("--d-model", type=int, default=None)
    s.add_argument("-o", "--out", required=True)
    s.set_defaults(func=cmd_schedule)

    sl = sub.add_parser("slice", help="PCA-rotate and truncate every block")
    sl.add_argument("--model", required=True)
    sl.add_argument("--calib", required=True, help="corpus the Gram matrices are collected on")
    sl.add_argument("--schedule", default=None)
    sl.add_argument("--sp", type=float, default=None)
    sl.add_argument("--sb", type=float, default=None)
    sl.add_argument("--lr", default=None, help="profile JSON (needed when sb < sp)")
    sl.add_argument("--fs-max", type=float, default=FS_MAX)
    sl.add_argument("--seed", type=int, default=0)
    sl.add_argument("-o", "--out", required=True)
    sl.set_defaults(func=cmd_slice)

    dr = sub.add_parser("drop", help="remove the most redundant whole blocks")
    dr.add_argument("--model", required=True)
    dr.add_argument("--lr", required=True)
    dr.add_argument("--count", type=int, required=True)
    dr.add_argument("-o", "--out", required=True)
    dr.set_defaults(func=cmd_drop)

    e = sub.add_parser("eval", help="perplexity and choice accuracy")
    e.add_argument("--model", required=True)
    e.add_argument("--corpus", action="append", help="[name=]path of a text corpus (repeatable)")
    e.add_argument("--task", action="append", help="[name=]path of a choice-task JSONL file (repeatable)")
    e.add_argument("-o", "--out", default=None)
    e.set_defaults(func=cmd_eval)

    w = sub.add_parser("sweep", help="slice-base sweep with calibration selection")
    w.add_argument("--model", required=True)
    w.add_argument("--lr", required=True)
    w.add_argument("--calib", required=True)
    w.add_argument("--corpus", action="append")
    w.add_argument("--task", action="append")
    w.add_argument("--sp", type=float, default=0.3)
    w.add_argument("--sb-step", type=float, default=0.02)
    w.add_argument("--sb-grid", default=None, help="explicit comma-separated s_b values")
    w.add_argument("--seeds", default="0", help="comma-separated seeds")
    w.add_argument("--select-by", default=None, help="perplexity corpus name used for selection")
    w.add_argument("--fs-max", type=float, default=FS_MAX)
    w.add_argument("--jobs", type=int, default=1)
    w.add_argument("-o", "--out", required=True, help="output directory")
    w.set_defaults(func=cmd_sweep)
    return p


def _load_config(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise PreconditionError(f"config file {p} does not exist")
    text = p.read_text(encoding="utf-8")
    if p.suffix == ".json":
        return json.loads(text)
    try:
        import tomllib
    except ModuleNotFoundError:  # Python < 3.11
        import tomli as tomllib
    return tomllib.loads(text)


def _apply_config(parser, argv):
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    cfg = _load_config(known.config)
    sub_action = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    for name, sp in sub_action.choices.items():
        defaults = {k.replace("-", "_"): v for k, v in cfg.items() if not isinstance(v, dict)}
        defaults.update({k.replace("-", "_"): v for k, v in cfg.get(name, {}).items()})
        dests = {a.dest: a for a in sp._actions}
        for k, v in defaults.items():
            if k in dests:
                act = dests[k]
                if act.required:
                    act.required = False
                if isinstance(v, list) and not isinstance(act, argparse._AppendAction):
                    v = ",".join(str(x) for x in v)
                sp.set_defaults(**{k: v})


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
        args = parser.parse_args(argv)
        for k in ("sp", "sb"):
            if getattr(args, k, None) is not None:
                setattr(args, k, float(getattr(args, k)))
        args.func(args)
    except DynSliceError as e:
        sys.stderr.write(f"{e.code}: {' '.join(str(e).split())}\n")
        return e.exit_code
    except (json.JSONDecodeError, ValueError) as e:
        sys.stderr.write(f"precondition: {' '.join(str(e).split())}\n")
        return 5
    except OSError as e:
        sys.stderr.write(f"precondition: {' '.join(str(e).split())}\n")
        return 5
    return 0


if __name__ == "__main__":
    sys.exit(main())

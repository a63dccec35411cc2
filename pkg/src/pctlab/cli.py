"""Command-line entry point: ``pctlab {gen,train,sweep,verify,report}``.

Exit codes: 0 success, 1 runtime error or non-finite abort, 2 verification mismatch.
The output root defaults to ``$PCTLAB_OUT`` (or ``./runs``).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import tasks
from .cells import CELL_NAMES, CellConfig
from .coherence import condition_table, full_audit
from .config import ConfigError, ExperimentConfig
from .train import (STATUS_COMPLETED, SWEEP_AXES, RunExistsError, TrainConfig, load_run, median_iqr, run_sweep,
                    run_training)

OUT_ENV = "PCTLAB_OUT"
EXIT_OK, EXIT_RUNTIME, EXIT_MISMATCH = 0, 1, 2

# task-parameter flags: flag dest -> generator keyword
TASK_FLAGS = {
    "k": "K", "delay": "delay", "v": "V", "length": "L", "vocab": "vocab", "depth_ratio": "depth_ratio",
    "max_depth": "max_depth", "max_args": "max_args", "max_len": "max_len", "bins": "bins",
    "n_active": "n_active", "n_samples": "n_samples", "snr_db": "snr_db", "t": "t", "data_dir": "data_dir",
}

# fixed placement of the gate-isolation matrix: (C2 row, C3 column)
ISOLATION_MATRIX = {
    "sigmoid": ("C2 ✓", "C3 ✓"), "softplus": ("C2 ✓", "C3 ✓"),
    "cubic": ("C2 ✗", "C3 ✓"),
    "clamped_relu": ("C2 ✓", "C3 ✗"),
    "relu": ("C2 ✗", "C3 ✗"),
}


def out_root() -> Path:
    return Path(os.environ.get(OUT_ENV, "runs"))


def _err(msg: str) -> None:
    print(f"error: {msg}", file=sys.stderr)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _task_params(args, task: str) -> dict:
    defaults = tasks.get_task(task).defaults
    params = {}
    for dest, key in TASK_FLAGS.items():
        val = getattr(args, dest, None)
        if val is None:
            continue
        if key not in defaults:
            raise ConfigError(f"--{dest.replace('_', '-')}: task {task!r} has no parameter {key!r}")
        params[key] = val
    for item in getattr(args, "param", None) or []:
        key, sep, val = item.partition("=")
        if not sep:
            raise ConfigError(f"--param expects KEY=VALUE, got {item!r}")
        params[key] = _parse_value(val)
    return params


def _add_task_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("task parameters")
    g.add_argument("--k", type=int, help="copy/phase_memory length K, multipitch pitch count K")
    g.add_argument("--delay", type=int)
    g.add_argument("--v", type=int, help="copy vocabulary size V")
    g.add_argument("--length", type=int, help="needle haystack length L")
    g.add_argument("--vocab", type=int)
    g.add_argument("--depth-ratio", type=float)
    g.add_argument("--max-depth", type=int)
    g.add_argument("--max-args", type=int)
    g.add_argument("--max-len", type=int)
    g.add_argument("--bins", type=int)
    g.add_argument("--n-active", type=int)
    g.add_argument("--n-samples", type=int)
    g.add_argument("--snr-db", type=float)
    g.add_argument("--t", type=int, help="FFT-MNIST resize side")
    g.add_argument("--data-dir")
    g.add_argument("--param", action="append", metavar="KEY=VALUE", help="any generator parameter")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="ExperimentConfig JSON file; flags given explicitly override it")
    p.add_argument("--cell", choices=CELL_NAMES)
    p.add_argument("--task", choices=tasks.TASK_NAMES)
    _add_task_flags(p)
    g = p.add_argument_group("model and optimisation")
    g.add_argument("--dim", type=int)
    g.add_argument("--heads", type=int)
    g.add_argument("--dim-head", type=int)
    g.add_argument("--no-rope", action="store_true")
    g.add_argument("--depth", type=int)
    g.add_argument("--ff-mult", type=int)
    g.add_argument("--batch", type=int)
    g.add_argument("--micro-batch", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--warmup", type=int)
    g.add_argument("--steps", type=int)
    g.add_argument("--weight-decay", type=float)
    g.add_argument("--clip", type=float)
    g.add_argument("--eval-every", type=int)
    g.add_argument("--eval-n", type=int)
    g.add_argument("--precision", choices=("f32", "f64"))
    g.add_argument("--save-weights", action="store_true")
    g.add_argument("--seeds", type=int, help="number of seeds, starting at --seed")
    g.add_argument("--seed", type=int, default=None, help="first seed (default 0)")
    p.add_argument("--out", help="output directory (default $PCTLAB_OUT/<cell>-<task>)")
    p.add_argument("--force", action="store_true", help="overwrite completed runs")
    p.add_argument("--quiet", action="store_true")


_TRAIN_FLAG_KEYS = {"depth": "depth", "ff_mult": "ff_mult", "batch": "batch", "micro_batch": "micro_batch",
                    "lr": "lr", "warmup": "warmup_steps", "steps": "total_steps",
                    "weight_decay": "weight_decay", "clip": "clip_norm", "eval_every": "eval_every",
                    "eval_n": "eval_n", "precision": "precision"}


def experiment_from_args(args) -> ExperimentConfig:
    """Merge a config file (if any) with explicit flags into a validated ExperimentConfig."""
    base = ExperimentConfig.load(args.config) if args.config else None
    cell = base.cell if base else None
    task = args.task or (base.task if base else "copy")
    tparams = dict(base.task_params) if base and task == base.task else {}
    tparams.update(_task_params(args, task))
    train = dict(base.train) if base else {}
    for dest, key in _TRAIN_FLAG_KEYS.items():
        val = getattr(args, dest)
        if val is not None:
            train[key] = val
    if args.save_weights:
        train["save_weights"] = True
    if args.warmup is None and "total_steps" in train:
        train["warmup_steps"] = min(train.get("warmup_steps", TrainConfig.warmup_steps), train["total_steps"])

    cell_kw = {}
    for dest in ("dim", "heads", "dim_head"):
        if getattr(args, dest) is not None:
            cell_kw[dest] = getattr(args, dest)
    if args.no_rope:
        cell_kw["rope"] = False
    name = args.cell or (cell.cell if cell else "complex_sigmoid")
    if cell is None:
        cell = CellConfig(cell=name, dim=64, heads=4, dim_head=16)
    if "dim" in cell_kw and "heads" not in cell_kw and "dim_head" not in cell_kw:
        cell_kw["dim_head"] = cell_kw["dim"] // cell.heads
    elif "dim" in cell_kw and "dim_head" not in cell_kw:
        cell_kw["dim_head"] = cell_kw["dim"] // cell_kw["heads"]
    elif "dim" not in cell_kw and ("heads" in cell_kw or "dim_head" in cell_kw):
        cell_kw["dim"] = cell_kw.get("heads", cell.heads) * cell_kw.get("dim_head", cell.dim_head)
    try:
        cell = replace(cell, cell=name, **cell_kw)
    except ValueError as exc:
        raise ConfigError(f"cell: {exc}") from None

    if args.seeds is not None or args.seed is not None:
        first = args.seed if args.seed is not None else 0
        seeds = list(range(first, first + (args.seeds or 1)))
    else:
        seeds = list(base.seeds) if base else [0]
    out_dir = args.out or (base.out_dir if base else str(out_root() / f"{name}-{task}"))
    return ExperimentConfig(cell=cell, task=task, task_params=tparams, train=train,
                            sweep=base.sweep if base else None, verify=base.verify if base else None,
                            out_dir=out_dir, seeds=seeds)


# -----------------------------------------------------------------------------
# commands
# -----------------------------------------------------------------------------


def cmd_gen(args) -> int:
    params = _task_params(args, args.task)
    out = Path(args.out) if args.out else out_root() / "data" / f"{args.task}-s{args.seed}-n{args.n}.bin"
    out.parent.mkdir(parents=True, exist_ok=True)
    path, side = tasks.write_dataset(out, args.task, params, args.n, args.seed)
    print(f"wrote {args.n} samples to {path} (description {side})")
    return EXIT_OK


def _logger(args):
    return None if args.quiet else (lambda m: print(m, flush=True))


def cmd_train(args) -> int:
    exp = experiment_from_args(args)
    out = Path(exp.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "experiment.json").write_text(exp.dumps())
    rc = EXIT_OK
    for seed in exp.seeds:
        cfg = exp.train_config(seed)
        rdir = out / f"seed{seed}" if len(exp.seeds) > 1 else out
        try:
            rec = run_training(cfg, rdir, force=args.force, log=_logger(args))
        except RunExistsError as exc:
            _err(str(exc))
            return EXIT_RUNTIME
        s = rec.summary
        print(f"{rdir}: status {s['status']} final {rec.final_metric:.4f} best {s['best_metric']}")
        if s["status"] != STATUS_COMPLETED:
            rc = EXIT_RUNTIME
    return rc


def cmd_sweep(args) -> int:
    exp = experiment_from_args(args)
    axis = args.axis or (exp.sweep.axis if exp.sweep else None)
    values = args.values.split(",") if args.values else (list(exp.sweep.values) if exp.sweep else None)
    if not axis or not values:
        raise ConfigError("sweep needs --axis and --values (or a sweep section in --config)")
    protocol = args.stuck_seed_protocol or bool(exp.sweep and exp.sweep.stuck_seed_protocol)
    out = Path(exp.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "experiment.json").write_text(exp.dumps())
    records, table = run_sweep(exp.train_config(exp.seeds[0]), axis, values, exp.seeds, out,
                               force=args.force, stuck_seed_protocol=protocol, log=_logger(args))
    print(markdown_table(table, axis))
    return EXIT_OK if all(r.summary.get("status") == STATUS_COMPLETED for r in records) else EXIT_RUNTIME


def cmd_verify(args) -> int:
    cells = list(CELL_NAMES) if args.all else [args.cell]
    seeds = list(range(args.seeds))
    reports = [full_audit(c, seeds=seeds, dim=args.dim, heads=args.heads, n_tokens=args.n_tokens,
                          gate_d=args.gate_d, gate_n=args.gate_n) for c in cells]
    print(condition_table(reports))
    doc = [r.to_dict() for r in reports]
    text = json.dumps(doc if args.all else doc[0], indent=2, sort_keys=True, default=_json_default)
    if args.json:
        Path(args.json).write_text(text + "\n")
    else:
        print(text)
    failed = False
    for r in reports:
        for name, c in r.checks.items():
            if not c["pass"]:
                failed = True
                print(f"MISMATCH {r.cell} {name}: expected {c['expected']}, observed {c['observed']}",
                      file=sys.stderr)
    return EXIT_MISMATCH if failed else EXIT_OK


def _json_default(o):
    if hasattr(o, "item"):
        return o.item()
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


# -----------------------------------------------------------------------------
# report
# -----------------------------------------------------------------------------


def find_run_dirs(paths) -> tuple[list[Path], list[str]]:
    """Run directories (holding config.json or summary.json) below ``paths`` plus problems found."""
    runs, problems = [], []
    for root in map(Path, paths):
        if not root.is_dir():
            problems.append(f"{root}: not a directory")
            continue
        cands = sorted({p.parent for pat in ("config.json", "summary.json") for p in root.rglob(pat)})
        if not cands:
            problems.append(f"{root}: no run directories (config.json / summary.json) found")
        runs.extend(cands)
    return runs, problems


def collect_rows(run_dirs) -> tuple[list[dict], list[str]]:
    rows, problems = [], []
    for d in run_dirs:
        try:
            rec = load_run(d)
        except (FileNotFoundError, json.JSONDecodeError) as exc:
            problems.append(str(exc))
            continue
        c = rec.config
        gate_value = c["cell"]["cell"]
        rows.append({"run": str(d), "cell": gate_value, "task": c["task"], "seed": c["seed"],
                     "lr": c["lr"], "batch": c["batch"], "depth": c["depth"],
                     "status": rec.summary.get("status"), "final": rec.final_metric,
                     "best": rec.summary.get("best_metric")})
    return rows, problems


def group_rows(rows: list[dict], key: str = "cell") -> list[dict]:
    groups: dict = {}
    for r in rows:
        groups.setdefault((r[key], r["task"]), []).append(r)
    out = []
    for (value, task), rs in sorted(groups.items(), key=lambda kv: str(kv[0])):
        ok = [r for r in rs if r["status"] == STATUS_COMPLETED]
        fm, fq1, fq3 = median_iqr([r["final"] for r in ok])
        bm, bq1, bq3 = median_iqr([r["best"] for r in ok])
        out.append({"value": str(value), "task": task, "runs": len(rs), "failed": len(rs) - len(ok),
                    "final_median": fm, "final_q1": fq1, "final_q3": fq3,
                    "best_median": bm, "best_q1": bq1, "best_q3": bq3})
    return out


def _fmt(x) -> str:
    return "n/a" if x is None or x != x else f"{x:.3f}"


def markdown_table(groups: list[dict], key: str = "cell") -> str:
    lines = [f"| {key} | task | runs | failed | final median | final IQR | best median | best IQR |",
             "|---|---|---|---|---|---|---|---|"]
    for g in groups:
        lines.append(f"| {g['value']} | {g.get('task', '')} | {g['runs']} | {g['failed']} | {_fmt(g['final_median'])} "
                     f"| [{_fmt(g['final_q1'])}, {_fmt(g['final_q3'])}] | {_fmt(g['best_median'])} "
                     f"| [{_fmt(g['best_q1'])}, {_fmt(g['best_q3'])}] |")
    return "\n".join(lines)


def csv_table(groups: list[dict]) -> str:
    buf = io.StringIO()
    cols = ["value", "task", "runs", "failed", "final_median", "final_q1", "final_q3",
            "best_median", "best_q1", "best_q3"]
    w = csv.DictWriter(buf, fieldnames=cols, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    w.writerows(groups)
    return buf.getvalue()


def _gate_of(cell: str) -> str:
    return cell.split("_", 1)[1] if cell.startswith("complex_") else cell


def isolation_matrix(groups: list[dict]) -> str | None:
    """2x2 table (C2 rows, C3 columns) of final-metric medians for complex gate groups."""
    cells: dict = {}
    for g in groups:
        gate = _gate_of(g["value"])
        if not g["value"].startswith("complex_") or gate not in ISOLATION_MATRIX:
            continue
        cells.setdefault(ISOLATION_MATRIX[gate], []).append(
            f"{gate} {_fmt(g['final_median'])} [{_fmt(g['final_q1'])}, {_fmt(g['final_q3'])}]")
    if not cells:
        return None
    lines = ["| | C3 ✓ | C3 ✗ |", "|---|---|---|"]
    for row in ("C2 ✓", "C2 ✗"):
        entries = [", ".join(cells.get((row, col), [])) or "n/a" for col in ("C3 ✓", "C3 ✗")]
        lines.append(f"| {row} | {entries[0]} | {entries[1]} |")
    return "\n".join(lines)


def varying_key(rows: list[dict]) -> str:
    """The sweep axis recovered from the artifacts: the first field that differs across runs."""
    for key in ("cell", "lr", "batch", "depth"):
        if len({r[key] for r in rows}) > 1:
            return key
    return "cell"


def build_report(paths) -> tuple[str, str, list[str], int]:
    """Markdown and CSV text for the runs below ``paths``, the problems found and the group count."""
    run_dirs, problems = find_run_dirs(paths)
    rows, more = collect_rows(run_dirs)
    problems += more
    key = varying_key(rows) if rows else "cell"
    groups = group_rows(rows, key)
    md = ["# Run report", "", markdown_table(groups, key)]
    matrix = isolation_matrix(groups)
    if key == "cell" and matrix and len({_gate_of(g["value"]) for g in groups} & set(ISOLATION_MATRIX)) > 1:
        md += ["", "## Gate isolation matrix (final metric, median [IQR])", "", matrix]
    if problems:
        md += ["", "## Missing or unreadable artifacts", ""] + [f"- {p}" for p in problems]
    return "\n".join(md) + "\n", csv_table(groups), problems, len(groups)


def cmd_report(args) -> int:
    md, csv_text, problems, n_groups = build_report(args.dirs)
    for p in problems:
        _err(p)
    if not n_groups:
        _err("no runs found")
        return EXIT_RUNTIME
    out = Path(args.out) if args.out else Path(args.dirs[0])
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.md").write_text(md)
    (out / "report.csv").write_text(csv_text)
    print(md)
    return EXIT_RUNTIME if problems else EXIT_OK


# -----------------------------------------------------------------------------
# parser
# -----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pctlab",
                                 description="Phase-coherent complex attention: data, training and audits.")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="write a dataset of generated samples")
    g.add_argument("task", choices=tasks.TASK_NAMES)
    g.add_argument("--n", type=int, default=1000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out")
    _add_task_flags(g)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train one configuration over one or more seeds")
    _add_train_flags(t)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sweep", help="independent runs over one axis")
    _add_train_flags(s)
    s.add_argument("--axis", choices=SWEEP_AXES)
    s.add_argument("--values", help="comma-separated axis values")
    s.add_argument("--stuck-seed-protocol", action="store_true")
    s.set_defaults(func=cmd_sweep)

    v = sub.add_parser("verify", help="audit coherence invariants of cells")
    which = v.add_mutually_exclusive_group(required=True)
    which.add_argument("--cell", choices=CELL_NAMES)
    which.add_argument("--all", action="store_true")
    v.add_argument("--dim", type=int, default=16)
    v.add_argument("--heads", type=int, default=2)
    v.add_argument("--n-tokens", type=int, default=12)
    v.add_argument("--gate-d", type=int, default=128)
    v.add_argument("--gate-n", type=int, default=1021)
    v.add_argument("--seeds", type=int, default=1)
    v.add_argument("--json", help="write the report JSON here instead of stdout")
    v.set_defaults(func=cmd_verify)

    r = sub.add_parser("report", help="median/IQR tables from run or sweep directories")
    r.add_argument("dirs", nargs="+")
    r.add_argument("--out", help="where report.md/report.csv go (default: first directory)")
    r.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError, TypeError) as exc:
        _err(str(exc))
        return EXIT_RUNTIME
    except OSError as exc:
        _err(str(exc))
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

"""AdamW training with warmup + cosine schedule, clipping, sweeps and run artifacts.

A run directory holds ``config.json`` (resolved config), ``metrics.jsonl`` (one
object per evaluation with keys ``step, loss, metric, lr, wall_ms``) and
``summary.json`` (``status, best_metric, best_eval_loss, elapsed``).
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .cells import CELLS, CellConfig
from .stack import StackConfig, build_stack, flatten_params, params_to_arrays, stack_forward
from .tasks import compute_metric, get_task, make_batch, resolve_params

TRAIN_STREAM = 0
EVAL_STREAM = 1
STATUS_COMPLETED = "completed"
STATUS_NAN = "nan"
STATUS_FAILED = "failed"


class RunExistsError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    cell: CellConfig = field(default_factory=lambda: CellConfig(dim=64, heads=4, dim_head=16))
    task: str = "copy"
    task_params: dict = field(default_factory=dict)
    depth: int = 4
    ff_mult: int = 4
    batch: int = 32
    micro_batch: int = 0  # 0 = no gradient accumulation
    lr: float = 3e-3
    warmup_steps: int = 200
    total_steps: int = 2000
    weight_decay: float = 1e-2
    clip_norm: float = 1.0
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    eval_every: int = 200
    eval_n: int = 512
    eval_batch: int = 64
    precision: str = "f32"
    norm_eps: float = 1e-6
    save_weights: bool = False

    def __post_init__(self):
        if isinstance(self.cell, dict):
            self.cell = CellConfig(**self.cell)
        self.betas = tuple(self.betas)
        self.task_params = resolve_params(self.task, self.task_params)
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.micro_batch and (self.micro_batch < 1 or self.batch % self.micro_batch):
            raise ValueError("micro_batch must divide batch")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ValueError("warmup_steps must lie in [0, total_steps]")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be > 0")
        if self.eval_every < 1 or self.eval_n < 1 or self.eval_batch < 1:
            raise ValueError("eval_every, eval_n and eval_batch must be >= 1")
        if self.precision not in ("f32", "f64"):
            raise ValueError("precision must be 'f32' or 'f64'")
        seq = get_task(self.task).seq_len(self.task_params)
        if self.cell.seq_len != seq:
            self.cell = replace(self.cell, seq_len=seq)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        d = dict(d)
        if "cell" in d and isinstance(d["cell"], dict):
            ck = {f.name for f in fields(CellConfig)}
            bad = set(d["cell"]) - ck
            if bad:
                raise ValueError(f"unknown cell config keys: {sorted(bad)}")
        return cls(**d)

    def stack_config(self) -> StackConfig:
        return StackConfig(cell=self.cell, io=get_task(self.task).io(self.task_params), depth=self.depth,
                           ff_mult=self.ff_mult, norm_eps=self.norm_eps)


@dataclass
class RunRecord:
    config: dict
    metrics: list
    summary: dict
    run_dir: str | None = None
    params: dict | None = None

    @property
    def final_metric(self) -> float:
        return self.metrics[-1]["metric"] if self.metrics else float("nan")


# -----------------------------------------------------------------------------
# optimiser pieces
# -----------------------------------------------------------------------------


def lr_at(step: int, cfg) -> float:
    """Linear warmup from 0 to ``cfg.lr`` then cosine decay to 0 at ``total_steps``."""
    lr, warm, total = cfg.lr, cfg.warmup_steps, cfg.total_steps
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    if warm > 0 and step < warm:
        return lr * step / warm
    if total == warm:
        return lr
    progress = (step - warm) / (total - warm)
    return lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def global_norm(grads: dict) -> float:
    return math.sqrt(math.fsum(float(np.vdot(g, g)) for g in grads.values()))


def clip_gradients(grads: dict, max_norm: float = 1.0) -> tuple[dict, float]:
    """Rescale all gradients together so their global L2 norm is at most ``max_norm``."""
    if max_norm <= 0:
        raise ValueError("max_norm must be > 0")
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


def init_adam_state() -> dict:
    return {"t": 0, "m": {}, "v": {}}


def adamw_step(params: dict, grads: dict, state: dict, lr_t: float, wd: float,
               betas=(0.9, 0.999), eps: float = 1e-8) -> dict:
    """In-place AdamW on arrays: decoupled decay ``p -= lr*wd*p``, then a bias-corrected Adam step."""
    b1, b2 = betas
    state["t"] += 1
    t = state["t"]
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for k, p in params.items():
        g = grads[k]
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {k}")
        m = state["m"].get(k)
        if m is None:
            m = state["m"][k] = np.zeros_like(p)
            state["v"][k] = np.zeros_like(p)
        v = state["v"][k]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        if wd:
            p -= lr_t * wd * p
        p -= lr_t * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


# -----------------------------------------------------------------------------
# training
# -----------------------------------------------------------------------------


def _loss(scfg: StackConfig, params, batch) -> tuple[T.Tensor, np.ndarray]:
    logits = stack_forward(scfg, params, batch.inputs)
    if scfg.io.loss == "bce":
        loss = T.bce_with_logits(logits, batch.target)
    elif scfg.io.readout == "pool":
        loss = T.cross_entropy(logits, batch.target)
    else:
        loss = T.cross_entropy(logits, batch.target, batch.loss_mask)
    return loss, logits.data


def evaluate(cfg: TrainConfig, scfg: StackConfig, params) -> tuple[float, float]:
    """Mean loss and metric over the held-out stream (never seen in training)."""
    losses, hits, total = [], 0.0, 0
    with T.no_grad():
        for start in range(0, cfg.eval_n, cfg.eval_batch):
            n = min(cfg.eval_batch, cfg.eval_n - start)
            b = make_batch(cfg.task, cfg.task_params, cfg.seed, EVAL_STREAM, start, n)
            loss, logits = _loss(scfg, params, b)
            losses.append(float(loss.data) * n)
            hits += compute_metric(logits, b.target, b.loss_mask, scfg.io.loss) * n
            total += n
    return sum(losses) / total, hits / total


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def run_training(cfg: TrainConfig, run_dir=None, force: bool = False, log=None) -> RunRecord:
    """Train one model; deterministic given the config (including the seed)."""
    run_path = Path(run_dir) if run_dir is not None else None
    if run_path is not None:
        done = run_path / "summary.json"
        if done.exists() and not force:
            status = json.loads(done.read_text()).get("status")
            if status == STATUS_COMPLETED:
                raise RunExistsError(f"{run_path} already holds a completed run (use force)")
        run_path.mkdir(parents=True, exist_ok=True)
        _write_json(run_path / "config.json", cfg.to_dict())
        (run_path / "metrics.jsonl").write_text("")

    t0 = time.perf_counter()
    metrics: list[dict] = []
    status, error = STATUS_COMPLETED, None
    with T.precision(cfg.precision):
        scfg = cfg.stack_config()
        params = build_stack(scfg, np.random.default_rng([cfg.seed, 7]))
        flat = flatten_params(params)
        arrays = {k: t.data for k, t in flat.items()}
        state = init_adam_state()
        micro = cfg.micro_batch or cfg.batch
        n_micro = cfg.batch // micro

        def record(step: int, lr_t: float) -> None:
            loss, metric = evaluate(cfg, scfg, params)
            row = {"step": step, "loss": loss, "metric": metric, "lr": lr_t,
                   "wall_ms": (time.perf_counter() - t0) * 1000.0}
            metrics.append(row)
            if run_path is not None:
                with open(run_path / "metrics.jsonl", "a") as fh:
                    fh.write(json.dumps(row, sort_keys=True) + "\n")
            if log:
                log(f"step {step:5d} eval_loss {loss:.4f} metric {metric:.4f} lr {lr_t:.2e}")
            if not math.isfinite(loss):
                raise NonFiniteError(f"non-finite eval loss at step {step}")

        try:
            for step in range(cfg.total_steps):
                lr_t = lr_at(step + 1, cfg)
                grads = {k: np.zeros_like(a) for k, a in arrays.items()}
                for j in range(n_micro):
                    start = step * cfg.batch + j * micro
                    b = make_batch(cfg.task, cfg.task_params, cfg.seed, TRAIN_STREAM, start, micro)
                    for t in flat.values():
                        t.grad = None
                    loss, _ = _loss(scfg, params, b)
                    if not math.isfinite(float(loss.data)):
                        raise NonFiniteError(f"non-finite training loss at step {step + 1}")
                    loss.backward()
                    for k, t in flat.items():
                        if t.grad is not None:
                            grads[k] += t.grad / n_micro
                grads, _ = clip_gradients(grads, cfg.clip_norm)
                adamw_step(arrays, grads, state, lr_t, cfg.weight_decay, cfg.betas, cfg.adam_eps)
                if (step + 1) % cfg.eval_every == 0 or step + 1 == cfg.total_steps:
                    record(step + 1, lr_t)
        except NonFiniteError as exc:
            status, error = STATUS_NAN, str(exc)

    finite = [m for m in metrics if math.isfinite(m["loss"])]
    summary = {
        "status": status,
        "best_metric": max((m["metric"] for m in metrics), default=None),
        "best_eval_loss": min((m["loss"] for m in finite), default=None),
        "elapsed": time.perf_counter() - t0,
    }
    if error:
        summary["error"] = error
    if run_path is not None:
        if cfg.save_weights:
            np.savez(run_path / "weights.npz", **params_to_arrays(params))
        _write_json(run_path / "summary.json", summary)
    return RunRecord(cfg.to_dict(), metrics, summary, str(run_path) if run_path else None, params)


def load_run(run_dir) -> RunRecord:
    p = Path(run_dir)
    missing = [n for n in ("config.json", "metrics.jsonl", "summary.json") if not (p / n).exists()]
    if missing:
        raise FileNotFoundError(f"{p}: missing {', '.join(missing)}")
    metrics = [json.loads(line) for line in (p / "metrics.jsonl").read_text().splitlines() if line.strip()]
    return RunRecord(json.loads((p / "config.json").read_text()), metrics,
                     json.loads((p / "summary.json").read_text()), str(p))


# -----------------------------------------------------------------------------
# sweeps
# -----------------------------------------------------------------------------

SWEEP_AXES = ("seed", "lr", "batch", "gate", "depth")
STUCK_MARGIN = 0.05
STUCK_EXTEND_TO = 10


def median_iqr(values) -> tuple[float, float, float]:
    """Median and the 25th/75th percentiles (linear interpolation)."""
    v = np.asarray([x for x in values if x is not None and math.isfinite(x)], dtype=float)
    if v.size == 0:
        return float("nan"), float("nan"), float("nan")
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    return float(med), float(q1), float(q3)


def _gate_cell(base: CellConfig, value: str) -> str:
    if value in CELLS:
        return value
    name = f"{base.substrate}_{value}"
    if name not in CELLS:
        raise ValueError(f"no {base.substrate} cell with gate {value!r}")
    return name


def apply_axis(cfg: TrainConfig, axis: str, value) -> TrainConfig:
    if axis == "seed":
        return replace(cfg, seed=int(value))
    if axis == "lr":
        return replace(cfg, lr=float(value))
    if axis == "batch":
        return replace(cfg, batch=int(value), micro_batch=0)
    if axis == "depth":
        return replace(cfg, depth=int(value))
    if axis == "gate":
        return replace(cfg, cell=replace(cfg.cell, cell=_gate_cell(cfg.cell, str(value))))
    raise ValueError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")


def run_id(cfg: TrainConfig, axis: str, value) -> str:
    tag = f"{axis}={value}" if axis != "seed" else "seed"
    return f"{cfg.cell.cell}-{cfg.task}-{tag}-s{cfg.seed}".replace("/", "_")


def aggregate(records: list[RunRecord], axis: str) -> list[dict]:
    """One row per axis value: run count, failures and median/IQR of final and best metric."""
    groups: dict = {}
    for r in records:
        groups.setdefault(str(r.config.get("_axis_value")), []).append(r)
    rows = []
    for value, rs in groups.items():
        ok = [r for r in rs if r.summary.get("status") == STATUS_COMPLETED]
        fm, fq1, fq3 = median_iqr([r.final_metric for r in ok])
        bm, bq1, bq3 = median_iqr([r.summary.get("best_metric") for r in ok])
        rows.append({"axis": axis, "value": value, "cell": rs[0].config["cell"]["cell"], "task": rs[0].config["task"],
                     "runs": len(rs), "failed": len(rs) - len(ok),
                     "final_median": fm, "final_q1": fq1, "final_q3": fq3,
                     "best_median": bm, "best_q1": bq1, "best_q3": bq3})
    return rows


def is_stuck(record: RunRecord, chance: float, margin: float = STUCK_MARGIN) -> bool:
    return record.summary.get("status") != STATUS_COMPLETED or record.final_metric <= chance + margin


def run_sweep(base: TrainConfig, axis: str, values, seeds=None, out_dir=None, force: bool = False,
              stuck_seed_protocol: bool = False, log=None) -> tuple[list[RunRecord], list[dict]]:
    """Independent runs over ``values`` of ``axis`` (times ``seeds``), plus an aggregate table.

    A run that raises is recorded as failed and the sweep continues. With
    ``stuck_seed_protocol`` a value whose seeds mostly (>= 2/3) end at chance is
    extended to ``STUCK_EXTEND_TO`` seeds.
    """
    values = list(values)
    if not values:
        raise ValueError("sweep needs at least one axis value")
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")
    seeds = [base.seed] if axis == "seed" or not seeds else list(seeds)
    out = Path(out_dir) if out_dir is not None else None
    records: list[RunRecord] = []
    chance = get_task(base.task).chance(base.task_params)

    def one(value, seed):
        cfg = apply_axis(base, axis, value)
        if axis != "seed":
            cfg = replace(cfg, seed=int(seed))
        rdir = out / run_id(cfg, axis, value) if out is not None else None
        try:
            rec = run_training(cfg, rdir, force=force, log=log)
        except RunExistsError:
            rec = load_run(rdir)
            if rec.config != cfg.to_dict():
                raise RunExistsError(f"{rdir} holds a completed run with a different config") from None
        except Exception as exc:  # recorded and skipped so the sweep continues
            rec = RunRecord(cfg.to_dict(), [], {"status": STATUS_FAILED, "best_metric": None,
                                                "best_eval_loss": None, "elapsed": 0.0,
                                                "error": repr(exc)},
                            str(rdir) if rdir else None)
            if rdir is not None:
                rdir.mkdir(parents=True, exist_ok=True)
                _write_json(rdir / "config.json", cfg.to_dict())
                (rdir / "metrics.jsonl").write_text("")
                _write_json(rdir / "summary.json", rec.summary)
        rec.config["_axis_value"] = value
        records.append(rec)
        return rec

    for value in values:
        group = [one(value, s) for s in seeds]
        if stuck_seed_protocol and axis != "seed":
            if sum(is_stuck(r, chance) for r in group) * 3 >= 2 * len(group) and len(group) < STUCK_EXTEND_TO:
                extra = range(max(seeds) + 1, max(seeds) + 1 + STUCK_EXTEND_TO - len(group))
                for s in extra:
                    one(value, s)
    table = aggregate(records, axis)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "sweep.json", {"axis": axis, "values": [str(v) for v in values],
                                         "seeds": seeds, "base": base.to_dict()})
        _write_json(out / "aggregate.json", table)
    return records, table

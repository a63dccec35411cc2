"""Numerical checks of phase coherence: L1 equivariance and locality, cascade
stability probes, Doeblin/Dobrushin contraction and whole-cell audits.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import gates
from . import tensor as T
from .cells import CELLS, CellConfig, _complex_qkv, cell_forward, cell_gates, init_cell
from .layers import cweight
from .stack import StackConfig, TaskIO, build_stack, stack_body, stack_features
from .tensor import ComplexTensor, Tensor

# -----------------------------------------------------------------------------
# phase operators
# -----------------------------------------------------------------------------


def _as_complex_array(x) -> np.ndarray:
    return x.numpy() if isinstance(x, ComplexTensor) else np.asarray(x, dtype=complex)


def apply_global_phase(x, phi: float):
    """Multiply every token by ``exp(i phi)``; keeps the input type."""
    if isinstance(x, ComplexTensor):
        return x.rotate(np.full(x.shape[-1:], phi))
    return np.asarray(x) * np.exp(1j * phi)


def apply_per_token_phase(x, eps):
    """Multiply token ``i`` (axis -2) by ``exp(i eps_i)``."""
    eps = np.asarray(eps, dtype=float)
    n = x.shape[-2]
    if eps.shape != (n,):
        raise ValueError(f"need one phase per token ({n}), got shape {eps.shape}")
    if isinstance(x, ComplexTensor):
        return x.rotate(np.broadcast_to(eps[:, None], x.shape[-2:]))
    return np.asarray(x) * np.exp(1j * eps)[:, None]


@dataclass
class PhasePerturbation:
    epsilon: np.ndarray
    mean: float
    residual: np.ndarray

    @classmethod
    def decompose(cls, epsilon) -> "PhasePerturbation":
        e = np.asarray(epsilon, dtype=float)
        m = float(e.mean())
        return cls(e, m, e - m)


def zero_mean_phases(n: int, magnitude: float, rng: np.random.Generator) -> np.ndarray:
    """Zero-sum phase vector with ``max|eps| = magnitude``."""
    if n < 2:
        raise ValueError("a zero-mean perturbation needs at least two tokens")
    e = rng.normal(size=n)
    e -= e.mean()
    return e * (magnitude / np.abs(e).max())


def _rel_diff(a: np.ndarray, b: np.ndarray, ref: np.ndarray) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(ref), 1e-12))


# -----------------------------------------------------------------------------
# L1 checks
# -----------------------------------------------------------------------------


def check_l1a(fn, x, phis) -> float:
    """``max_phi |F(R x) - R F(x)| / |F(x)|`` for a map ``fn`` on complex sequences."""
    with T.no_grad():
        base = _as_complex_array(fn(x))
        worst = 0.0
        for phi in phis:
            lhs = _as_complex_array(fn(apply_global_phase(x, phi)))
            worst = max(worst, _rel_diff(lhs, base * np.exp(1j * phi), base))
    return worst


def _perturb_token(x, k: int, magnitude: float, rng):
    arr = x.numpy() if isinstance(x, ComplexTensor) else np.array(x.data, copy=True)
    arr = np.array(arr, copy=True)
    shape = arr.shape[-1:]
    if np.iscomplexobj(arr):
        d = rng.normal(size=shape) + 1j * rng.normal(size=shape)
    else:
        d = rng.normal(size=shape)
    arr[..., k, :] += magnitude * d / np.linalg.norm(d)
    return ComplexTensor.from_numpy(arr) if isinstance(x, ComplexTensor) else Tensor(arr)


def check_l1b(cfg: CellConfig, params: dict, x, perturb_magnitude: float = 1e-1,
              rng: np.random.Generator | None = None) -> float:
    """Largest change of ``alpha_ij`` when a third token ``x_k`` (``k`` not in ``{i, j}``) moves."""
    n = x.shape[-2]
    if n < 3:
        raise ValueError("check_l1b needs N >= 3")
    rng = rng or np.random.default_rng(0)
    with T.no_grad():
        base = cell_gates(cfg, params, x).data
        worst = 0.0
        for k in range(n):
            alt = cell_gates(cfg, params, _perturb_token(x, k, perturb_magnitude, rng)).data
            keep = np.ones((n, n), dtype=bool)
            keep[k, :] = False
            keep[:, k] = False
            worst = max(worst, float(np.abs(alt - base)[..., keep].max()))
    return worst


def gate_row_sums(cfg: CellConfig, params: dict, x) -> np.ndarray:
    with T.no_grad():
        return cell_gates(cfg, params, x).data.sum(axis=-1)


# negative control: breaks equivariance by reading out only Re(v)


def broken_cell_forward(cfg: CellConfig, p: dict, x: ComplexTensor) -> ComplexTensor:
    """Gate on ``Im<q,k>`` and aggregate ``Re(v)`` only; not phase-equivariant."""
    q = x @ cweight(p, "wq")
    k = x @ cweight(p, "wk")
    v = x @ cweight(p, "wv")
    qn, kn = T.l2_normalize_rows(q), T.l2_normalize_rows(k)
    _, im = T.hermitian_scores(qn, kn)
    alpha = (im * cfg.score_scale + gates.init_bias(cfg.seq_len)).sigmoid()
    return ComplexTensor(alpha @ v.re) @ cweight(p, "wo")


# -----------------------------------------------------------------------------
# Doeblin / Dobrushin
# -----------------------------------------------------------------------------


def row_stochasticize(alpha, eps: float = 0.0) -> np.ndarray:
    """``P_ij = alpha_ij / max(sum_k alpha_ik, eps)`` over the last axis."""
    a = np.asarray(alpha, dtype=float)
    if np.any(a < 0):
        raise ValueError("gate values must be nonnegative")
    s = a.sum(axis=-1, keepdims=True)
    if eps == 0.0 and np.any(s == 0):
        raise ValueError("all-zero gate row cannot be normalised with eps=0")
    return a / np.maximum(s, eps)


def _check_stochastic(P: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    P = np.asarray(P, dtype=float)
    if P.ndim != 2 or P.shape[0] != P.shape[1]:
        raise ValueError("expected a square matrix")
    if np.any(P < -tol) or np.any(np.abs(P.sum(axis=1) - 1.0) > tol):
        raise ValueError("matrix is not row-stochastic")
    return P


def doeblin_coefficient(P) -> float:
    """``mu_D = sum_j min_i P_ij``: the largest common mass every row dominates."""
    P = _check_stochastic(P)
    return min(1.0, math.fsum(P.min(axis=0)))


def dobrushin_coefficient(P) -> float:
    """``max_{i,i'} (1/2)|P_i - P_i'|_1``: the TV contraction on zero-mass signed measures."""
    P = _check_stochastic(P)
    diff = np.abs(P[:, None, :] - P[None, :, :]).sum(axis=-1)
    return float(0.5 * diff.max())


def zero_mean_opnorm(P, norm: str = "l2") -> float:
    """Contraction of ``P`` restricted to the zero-mean subspace.

    ``l2``: largest singular value of ``Q P Q`` with ``Q = I - 11^T/N``.
    ``tv``: the Dobrushin coefficient (exact operator norm in total variation).
    """
    P = _check_stochastic(P)
    if norm == "tv":
        return dobrushin_coefficient(P)
    if norm != "l2":
        raise ValueError("norm must be 'l2' or 'tv'")
    n = P.shape[0]
    Q = np.eye(n) - np.full((n, n), 1.0 / n)
    return float(np.linalg.svd(Q @ P @ Q, compute_uv=False)[0])


def tv_contraction_probe(P, trials: int = 64, rng: np.random.Generator | None = None) -> float:
    """Largest observed ``|mu P|_1 / |mu|_1`` over random zero-mass ``mu`` (lower bound on the TV norm)."""
    P = _check_stochastic(P)
    rng = rng or np.random.default_rng(0)
    mu = rng.normal(size=(trials, P.shape[0]))
    mu -= mu.mean(axis=1, keepdims=True)
    return float((np.abs(mu @ P).sum(axis=1) / np.abs(mu).sum(axis=1)).max())


def random_stochastic(n: int, rng: np.random.Generator, concentration: float = 1.0) -> np.ndarray:
    return rng.dirichlet(np.full(n, concentration), size=n)


# -----------------------------------------------------------------------------
# eta and diffuseness
# -----------------------------------------------------------------------------


def eta_matrix(qn, kn, convention: str = "first") -> np.ndarray:
    """``eta_ij = -Im<qn_i, kn_j>``; ``convention`` picks which argument is conjugated."""
    q, k = _as_complex_array(qn), _as_complex_array(kn)
    if convention == "first":
        inner = q.conj() @ k.T
    elif convention == "second":
        inner = q @ k.conj().T
    else:
        raise ValueError("convention must be 'first' or 'second'")
    return -inner.imag


def init_diffuseness(cfg: CellConfig, n_tokens: int | None = None, trials: int = 8,
                     rng: np.random.Generator | None = None) -> dict:
    """``N * min_ij P_ij`` of freshly initialised gates on Gaussian inputs, per head and trial."""
    rng = rng or np.random.default_rng(0)
    n = n_tokens or cfg.seq_len
    cfg = replace(cfg, seq_len=n)
    vals = []
    with T.no_grad():
        for _ in range(trials):
            p = init_cell(cfg, rng)
            x = _random_input(cfg, n, rng)
            alpha = cell_gates(cfg, p, x).data
            for a in alpha.reshape(-1, n, n):
                if a.min() >= 0 and np.all(a.sum(axis=-1) > 0):
                    vals.append(n * float(row_stochasticize(a, 1e-300).min()))
    if not vals:
        return {"min": None, "median": None, "samples": 0}
    vals = np.array(vals)
    return {"min": float(vals.min()), "median": float(np.median(vals)), "samples": int(vals.size)}


def _random_input(cfg: CellConfig, n: int, rng):
    if cfg.substrate == "complex":
        return ComplexTensor.from_numpy((rng.normal(size=(n, cfg.dim)) + 1j * rng.normal(size=(n, cfg.dim)))
                                        / np.sqrt(2))
    return Tensor(rng.normal(size=(n, cfg.dim)))


# -----------------------------------------------------------------------------
# cascade probe
# -----------------------------------------------------------------------------


def probe_stack_config(cell: CellConfig, depth: int) -> StackConfig:
    io = TaskIO("complex", channels=cell.dim, n_classes=2)
    return StackConfig(cell=cell, io=io, depth=depth)


def cascade_probe(cell: CellConfig, depths=(2, 4, 8, 16), delta: float = 1e-3, trials: int = 5,
                  seed: int = 0) -> dict:
    """Relative output change per unit zero-mean phase perturbation, per depth.

    ``ratio(L) = median_trials |F_L(P(eps) X) - F_L(X)| / (delta |F_L(X)|)`` for
    freshly initialised stacks; ``F_L`` is the blocks plus final norm. The same
    perturbation directions are reused at ``delta/2`` to report the relative
    change of the ratio (small means first-order regime).
    """
    if cell.substrate != "complex":
        raise ValueError("cascade_probe needs a complex cell")
    out: dict = {"delta": delta, "ratios": {}, "half_delta_ratios": {}, "half_delta_change": {},
                 "label": "init-regime proxy"}
    with T.no_grad():
        for L in depths:
            rng = np.random.default_rng([seed, L])
            scfg = probe_stack_config(cell, L)
            params = build_stack(scfg, rng)
            x = _random_input(cell, cell.seq_len, rng)
            base = _as_complex_array(stack_body(scfg, params, x))
            full, half = [], []
            for _ in range(trials):
                e = zero_mean_phases(cell.seq_len, 1.0, rng)
                for mag, acc in ((delta, full), (delta / 2, half)):
                    y = _as_complex_array(stack_body(scfg, params, apply_per_token_phase(x, e * mag)))
                    acc.append(np.linalg.norm(y - base) / (mag * np.linalg.norm(base)))
            r, rh = float(np.median(full)), float(np.median(half))
            out["ratios"][L] = r
            out["half_delta_ratios"][L] = rh
            out["half_delta_change"][L] = abs(rh - r) / r if r > 0 else 0.0
    ds = sorted(out["ratios"])
    out["growth"] = out["ratios"][ds[-1]] / out["ratios"][ds[0]] if out["ratios"][ds[0]] > 0 else float("inf")
    out["slope"] = float(np.polyfit(ds, [out["ratios"][L] for L in ds], 1)[0]) if len(ds) > 1 else 0.0
    return out


def stack_l1a(cell: CellConfig, depth: int = 2, phis=None, seed: int = 0) -> float:
    """Global-phase residual of a whole stack with linear complex input embedding."""
    rng = np.random.default_rng(seed)
    scfg = probe_stack_config(cell, depth)
    params = build_stack(scfg, rng)
    x = _random_input(cell, cell.seq_len, rng)
    phis = rng.uniform(0, 2 * np.pi, 8) if phis is None else phis
    return check_l1a(lambda z: stack_features(scfg, params, z), x.numpy(), phis)


# -----------------------------------------------------------------------------
# audit
# -----------------------------------------------------------------------------

AUDIT_GATE_D = 128
AUDIT_GATE_N = 1021
L1A_TOL = 1e-9
L1B_PASS_TOL = 1e-12
L1B_FAIL_MIN = 1e-8
CASCADE_MAX_GROWTH = 3.0
CASCADE_MAX_HALVING_CHANGE = 0.10

_CELL_GATE_KIND = {"softmax": "softmax_abs"}


def cell_gate_kind(cell: str) -> str:
    g = CELLS[cell][1]
    return _CELL_GATE_KIND.get(g, g)


def expected_verdict(cell: str) -> dict:
    """Verdicts the audit should reproduce for each cell."""
    kind = cell_gate_kind(cell)
    substrate = CELLS[cell][0]
    table = {
        "sigmoid": ("satisfied", "satisfied"), "tanh1": ("satisfied", "satisfied"),
        "softplus": ("partial", "satisfied"), "cubic": ("violated", "satisfied"),
        "clamped_relu": ("satisfied", "violated"), "relu": ("partial", "violated"),
        "screen": ("satisfied", "partial"), "softmax_abs": ("satisfied", "satisfied"),
    }
    c2, c3 = table[kind]
    return {"c1": True, "c2": c2, "c3": c3, "c4": kind != "softmax_abs",
            "l1a": True if substrate == "complex" else None,
            "l1b": kind != "softmax_abs"}


@dataclass
class CoherenceReport:
    cell: str
    l1a_residual: float | None
    l1b_max_delta: float
    cascade_ratios: dict
    cascade_half_delta_change: dict
    doeblin_mu: float | None
    dobrushin: float | None
    zero_mean_opnorm: float | None
    gate_verdict: dict
    eta_matrix_norm: float | None
    diffuseness: dict
    checks: dict = field(default_factory=dict)
    label: str = "init-regime proxy"

    @property
    def passed(self) -> bool:
        return all(c["pass"] for c in self.checks.values())

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cascade_ratios"] = {str(k): v for k, v in self.cascade_ratios.items()}
        d["cascade_half_delta_change"] = {str(k): v for k, v in self.cascade_half_delta_change.items()}
        d["passed"] = self.passed
        return d


def audit_cell_config(cell: str, dim: int = 16, heads: int = 2, n_tokens: int = 12) -> CellConfig:
    return CellConfig(cell=cell, dim=dim, heads=heads, dim_head=dim // heads, seq_len=n_tokens)


def full_audit(cell: str, seeds=(0,), dim: int = 16, heads: int = 2, n_tokens: int = 12,
               gate_d: int = AUDIT_GATE_D, gate_n: int = AUDIT_GATE_N, cascade_depths=(2, 4, 8, 16),
               cascade_trials: int = 3, l1a_samples: int = 8) -> CoherenceReport:
    """Run every check on one cell and compare against :func:`expected_verdict`."""
    if cell not in CELLS:
        raise ValueError(f"unknown cell {cell!r}")
    cfg = audit_cell_config(cell, dim, heads, n_tokens)
    exp = expected_verdict(cell)
    l1a = l1b = 0.0
    mus, dobs, ops, etas = [], [], [], []
    with T.precision("f64"):
        for seed in seeds:
            rng = np.random.default_rng([seed, 11])
            p = init_cell(cfg, rng)
            x = _random_input(cfg, n_tokens, rng)
            if cfg.substrate == "complex":
                l1a = max(l1a, check_l1a(lambda z: cell_forward(cfg, p, z), x,
                                         rng.uniform(0, 2 * np.pi, l1a_samples)))
                with T.no_grad():
                    q, k, _ = _complex_qkv(cfg, p, x)
                    qn, kn = T.l2_normalize_rows(q).numpy(), T.l2_normalize_rows(k).numpy()
                etas.append(max(float(np.abs(eta_matrix(qn[h], kn[h])).max()) for h in range(cfg.heads)))
            l1b = max(l1b, check_l1b(cfg, p, x, 1e-1, rng))
            with T.no_grad():
                alpha = cell_gates(cfg, p, x).data
            for a in alpha.reshape(-1, n_tokens, n_tokens):
                # signed gates (cubic) and dead rows (relu family) have no stochastic form
                if a.min() < 0 or not np.all(a.sum(axis=-1) > 0):
                    continue
                P = row_stochasticize(a, 1e-300)
                mus.append(doeblin_coefficient(P))
                dobs.append(dobrushin_coefficient(P))
                ops.append(zero_mean_opnorm(P))
        cascade = {"ratios": {}, "half_delta_change": {}}
        if cfg.substrate == "complex" and cascade_depths:
            cascade = cascade_probe(cfg, cascade_depths, trials=cascade_trials, seed=seeds[0])
        diff = init_diffuseness(cfg, n_tokens, trials=2, rng=np.random.default_rng(seeds[0]))

    kind = cell_gate_kind(cell)
    verdict = gates.classify_gate(gates.GateSpec(kind), gate_d, gate_n)
    vd = verdict.as_dict()
    checks = {}
    for key in ("c1", "c2", "c3", "c4"):
        checks[key] = {"expected": exp[key], "observed": vd[key], "pass": vd[key] == exp[key]}
    if exp["l1a"] is not None:
        checks["l1a"] = {"expected": f"<= {L1A_TOL:g}", "observed": l1a, "pass": l1a <= L1A_TOL}
    if exp["l1b"]:
        checks["l1b"] = {"expected": f"<= {L1B_PASS_TOL:g}", "observed": l1b, "pass": l1b <= L1B_PASS_TOL}
    else:
        checks["l1b"] = {"expected": f"> {L1B_FAIL_MIN:g} (coupled)", "observed": l1b, "pass": l1b > L1B_FAIL_MIN}
    if mus:
        checks["doeblin"] = {"expected": "dobrushin - (1 - mu_D) <= 1e-10",
                             "observed": max(d - (1 - m) for d, m in zip(dobs, mus)),
                             "pass": all(o <= 1 - m + 1e-10 for o, m in zip(dobs, mus))}
    if cell == "complex_sigmoid" and cascade["ratios"]:
        g = cascade["growth"]
        h = max(cascade["half_delta_change"].values())
        checks["cascade_growth"] = {"expected": f"<= {CASCADE_MAX_GROWTH:g}", "observed": g,
                                    "pass": g <= CASCADE_MAX_GROWTH}
        checks["cascade_first_order"] = {"expected": f"<= {CASCADE_MAX_HALVING_CHANGE:g}", "observed": h,
                                         "pass": h <= CASCADE_MAX_HALVING_CHANGE}
    return CoherenceReport(
        cell=cell, l1a_residual=l1a if cfg.substrate == "complex" else None, l1b_max_delta=l1b,
        cascade_ratios=cascade["ratios"], cascade_half_delta_change=cascade["half_delta_change"],
        doeblin_mu=_median(mus), dobrushin=_median(dobs), zero_mean_opnorm=_median(ops), gate_verdict=vd,
        eta_matrix_norm=max(etas) if etas else None, diffuseness=diff, checks=checks)


def _median(v) -> float | None:
    return float(np.median(v)) if len(v) else None


def _mark(v) -> str:
    return {"satisfied": "✓", "partial": "~", "violated": "✗", True: "✓", False: "✗"}.get(v, str(v))


def condition_table(reports: list[CoherenceReport]) -> str:
    """Markdown table of C1-C4 verdicts, bounds and L1 outcomes."""
    lines = ["| cell | C1 | C2 | M (init bias) | M (b=0) | C3 | C4 | L1a | L1b | audit |",
             "|---|---|---|---|---|---|---|---|---|---|"]
    for r in reports:
        v = r.gate_verdict
        l1a = "n/a" if r.l1a_residual is None else f"{r.l1a_residual:.1e}"
        lines.append(f"| {r.cell} | {_mark(v['c1'])} | {_mark(v['c2'])} | {v['M']:.4g} | {v['M_unbiased']:.4g} "
                     f"| {_mark(v['c3'])} | {_mark(v['c4'])} | {l1a} | {r.l1b_max_delta:.1e} "
                     f"| {'pass' if r.passed else 'FAIL'} |")
    return "\n".join(lines)

"""Scalar gates on cosine scores and their C1-C4 condition audit.

A gate ``f`` is applied to ``z = s + b`` where ``s`` is the (scaled) cosine score
and ``b`` the learnable bias. Elementwise kinds are evaluated here directly;
``screen`` and ``softmax_abs`` are row-level constructions that live in
:mod:`pctlab.cells`, but their condition metadata is kept here so that every
cell can be audited through one function.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

ELEMENTWISE_KINDS = ("sigmoid", "tanh1", "softplus", "cubic", "clamped_relu", "relu")
ROW_KINDS = ("screen", "softmax_abs")
GATE_KINDS = ELEMENTWISE_KINDS + ROW_KINDS

# default M threshold separating bounded/partial gates from magnitude-violating ones
M_THRESHOLD = 8.0
GRAD_FLOOR = 0.0
GRID_POINTS = 20001


@dataclass
class GateSpec:
    kind: str
    bias: float = 0.0
    threshold: float = 0.0  # screen only, in cosine units

    def __post_init__(self):
        if self.kind not in GATE_KINDS:
            raise ValueError(f"unknown gate kind {self.kind!r}; expected one of {GATE_KINDS}")


@dataclass
class GateConditionVerdict:
    kind: str
    c1: bool
    c2: str
    M: float
    M_unbiased: float
    c3: str
    c4: bool
    operating_range: tuple[float, float]
    bias: float

    def as_dict(self) -> dict:
        return {
            "kind": self.kind, "c1": self.c1, "c2": self.c2, "M": self.M,
            "M_unbiased": self.M_unbiased, "c3": self.c3, "c4": self.c4,
            "operating_range": list(self.operating_range), "bias": self.bias,
        }


def init_bias(seq_len: int) -> float:
    """Bias initialisation ``-log N`` shared by all elementwise gates."""
    if seq_len < 1:
        raise ValueError("sequence length must be >= 1")
    return -math.log(seq_len)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _sech2(z):
    # 1 - tanh^2 cancels to 0 for |z| > ~19; 1/cosh^2 keeps the tail
    c = np.cosh(np.minimum(np.abs(z), 350.0))
    return 1.0 / (c * c)


def gate_fn(kind: str, z):
    """``f(z)`` for an elementwise kind; ``z`` already includes the bias."""
    z = np.asarray(z, dtype=float) if not isinstance(z, np.ndarray) else z
    if kind == "sigmoid":
        return _sigmoid(z)
    if kind == "tanh1":
        return np.tanh(z) + 1.0
    if kind == "softplus":
        return np.logaddexp(0.0, z)
    if kind == "cubic":
        return z + z * z * z / 6.0
    if kind == "clamped_relu":
        return np.clip(z, 0.0, 1.0)
    if kind == "relu":
        return np.maximum(z, 0.0)
    raise ValueError(f"{kind!r} is not an elementwise gate")


def gate_dfn(kind: str, z):
    """Analytic ``f'(z)``; right-hand derivative at kinks."""
    z = np.asarray(z, dtype=float) if not isinstance(z, np.ndarray) else z
    if kind == "sigmoid":
        s = _sigmoid(z)
        return s * _sigmoid(-z)
    if kind == "tanh1":
        return _sech2(z)
    if kind == "softplus":
        return _sigmoid(z)
    if kind == "cubic":
        return 1.0 + z * z / 2.0
    if kind == "clamped_relu":
        return ((z >= 0.0) & (z < 1.0)).astype(z.dtype)
    if kind == "relu":
        return (z >= 0.0).astype(z.dtype)
    raise ValueError(f"{kind!r} is not an elementwise gate")


def gate_eval(spec: GateSpec, s):
    return gate_fn(spec.kind, np.asarray(s, dtype=float) + spec.bias)


def gate_grad(spec: GateSpec, s):
    return gate_dfn(spec.kind, np.asarray(s, dtype=float) + spec.bias)


def screen_fn(s, threshold: float):
    """Squared hinge of the cosine score, before the magnitude factor and TanhNorm."""
    return np.maximum(np.asarray(s, dtype=float) - threshold, 0.0) ** 2


def screen_dfn(s, threshold: float):
    return 2.0 * np.maximum(np.asarray(s, dtype=float) - threshold, 0.0)


# kinds whose output stays bounded on the whole real line
_BOUNDED_ON_R = {"sigmoid": True, "tanh1": True, "softplus": False, "cubic": False,
                 "clamped_relu": True, "relu": False, "screen": True, "softmax_abs": True}
# points where f' jumps
_KINKS = {"clamped_relu": (0.0, 1.0), "relu": (0.0,)}


def classify_gate(spec: GateSpec, d: int, N: int, *, m_threshold: float = M_THRESHOLD,
                  grad_floor: float = GRAD_FLOOR, scale: float = 1.0,
                  use_init_bias: bool = True) -> GateConditionVerdict:
    """Audit a gate against C1-C4 in operating-range form.

    The operating range of the score is ``[-sqrt(d), sqrt(d)] * scale``. With
    ``use_init_bias`` the bias is ``-log N`` (the initialisation); otherwise
    ``spec.bias`` is used. ``M_unbiased`` is the same bound at ``b = 0``.

    C2: ``violated`` if ``M > m_threshold``; otherwise ``satisfied`` when the gate
    is bounded on the whole real line and ``partial`` when only the operating
    range keeps it bounded.
    C3: a zero-derivative subinterval inside the range is ``violated`` when the
    derivative also jumps there (hard cutoff) and ``partial`` when it is
    continuous (smooth threshold); otherwise ``satisfied``.
    """
    if d < 1 or N < 2:
        raise ValueError("classify_gate needs d >= 1 and N >= 2")
    kind = spec.kind
    half = math.sqrt(d) * scale
    lo, hi = -half, half

    if kind == "softmax_abs":
        # row weights live in (0, 1]; the row normaliser couples tokens
        return GateConditionVerdict(kind, True, "satisfied", 1.0, 1.0, "satisfied", False, (lo, hi), 0.0)

    if kind == "screen":
        # score is the unscaled cosine in [-1, 1]; TanhNorm bounds the output by 1
        s = np.linspace(-1.0, 1.0, GRID_POINTS)
        df = screen_dfn(s, spec.threshold)
        zero_run = _has_zero_run(df, grad_floor)
        c3 = "partial" if zero_run else "satisfied"
        m = float(np.tanh(screen_fn(1.0, spec.threshold)))
        return GateConditionVerdict(kind, True, "satisfied", m, m, c3, True, (-1.0, 1.0), spec.threshold)

    bias = init_bias(N) if use_init_bias else spec.bias
    s = np.linspace(lo, hi, GRID_POINTS)
    z = s + bias
    M = float(np.max(np.abs(gate_fn(kind, z))))
    M0 = float(np.max(np.abs(gate_fn(kind, s))))

    if M > m_threshold:
        c2 = "violated"
    else:
        c2 = "satisfied" if _BOUNDED_ON_R[kind] else "partial"

    df = gate_dfn(kind, z)
    kink_inside = any(z[0] < k < z[-1] for k in _KINKS.get(kind, ()))
    if _has_zero_run(df, grad_floor):
        c3 = "violated" if kink_inside else "partial"
    else:
        c3 = "satisfied" if not kink_inside else "partial"

    return GateConditionVerdict(kind, True, c2, M, M0, c3, True, (lo, hi), bias)


def _has_zero_run(df: np.ndarray, floor: float) -> bool:
    """True if ``|f'| <= floor`` on at least two adjacent grid points (a subinterval)."""
    dead = np.abs(df) <= floor
    return bool(np.any(dead[1:] & dead[:-1]))

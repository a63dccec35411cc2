"""Attention cells: the six comparison cells plus five complex counterexample gates.

Every cell maps a ``(..., N, dim)`` sequence to a sequence of the same shape.
Complex cells consume :class:`~pctlab.tensor.ComplexTensor`, real cells
consume :class:`~pctlab.tensor.Tensor`. Heads get independent Q/K/V slices and
gate parameters; their outputs are concatenated before the output projection.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from functools import partial

import numpy as np

from . import gates
from .layers import cweight, complex_rope, const, init_complex, init_real, modrelu, real_rope
from .tensor import (ComplexTensor, Tensor, complex_matmul, l2_normalize_rows, normalized_gate_attention,
                     real_inner_scores, softmax)

CELLS = {
    "real_softmax": ("real", "softmax"),
    "real_sigmoid": ("real", "sigmoid"),
    "real_screen": ("real", "screen"),
    "complex_softmax": ("complex", "softmax_abs"),
    "complex_sigmoid": ("complex", "sigmoid"),
    "complex_screen": ("complex", "screen"),
    "complex_tanh1": ("complex", "tanh1"),
    "complex_softplus": ("complex", "softplus"),
    "complex_cubic": ("complex", "cubic"),
    "complex_clamped_relu": ("complex", "clamped_relu"),
    "complex_relu": ("complex", "relu"),
}
CELL_NAMES = tuple(CELLS)
COUNTEREXAMPLE_CELLS = ("complex_tanh1", "complex_softplus", "complex_cubic",
                        "complex_clamped_relu", "complex_relu")
ELEMENTWISE_CELLS = tuple(n for n, (_, g) in CELLS.items() if g != "softmax" and g != "softmax_abs")

NORM_EPS = 1e-12


@dataclass
class CellConfig:
    cell: str = "complex_sigmoid"
    dim: int = 128
    heads: int = 4
    dim_head: int = 32
    seq_len: int = 1024  # N used for the -log N bias init
    rope: bool = True
    rope_base: float = 10000.0
    screen_threshold: float = 0.0
    modrelu_bias: float = 0.0

    def __post_init__(self):
        if self.cell not in CELLS:
            raise ValueError(f"unknown cell {self.cell!r}; expected one of {CELL_NAMES}")
        if self.dim != self.heads * self.dim_head:
            raise ValueError(f"dim ({self.dim}) must equal heads*dim_head ({self.heads}*{self.dim_head})")
        if self.rope and self.dim_head % 2:
            raise ValueError("dim_head must be even when RoPE is on")
        if self.seq_len < 1:
            raise ValueError("seq_len must be >= 1")

    @property
    def substrate(self) -> str:
        return CELLS[self.cell][0]

    @property
    def gate(self) -> str:
        return CELLS[self.cell][1]

    @property
    def score_scale(self) -> float:
        return math.sqrt(self.dim_head)

    def to_dict(self) -> dict:
        return asdict(self)


def default_cell_config(cell: str, **overrides) -> CellConfig:
    """Parameter-fair defaults: complex 128 = 4x32, real 184 = 4x46."""
    substrate = CELLS[cell][0] if cell in CELLS else "complex"
    base = dict(dim=128, heads=4, dim_head=32) if substrate == "complex" else dict(dim=184, heads=4, dim_head=46)
    base.update(overrides)
    return CellConfig(cell=cell, **base)


def init_cell(cfg: CellConfig, rng: np.random.Generator) -> dict:
    p: dict = {}
    d, hd = cfg.dim, cfg.heads * cfg.dim_head
    init = init_complex if cfg.substrate == "complex" else init_real
    for name in ("wq", "wk", "wv"):
        init(p, name, d, hd, rng)
    init(p, "wo", hd, d, rng)
    if cfg.gate in gates.ELEMENTWISE_KINDS:
        const(p, "bias", gates.init_bias(cfg.seq_len), (cfg.heads, 1, 1))
    if cfg.gate == "screen":
        const(p, "threshold", cfg.screen_threshold, (cfg.heads, 1, 1))
        if cfg.substrate == "complex":
            const(p, "beta", cfg.modrelu_bias, (hd,))
    return p


def _split_heads(x, heads: int):
    *lead, n, hd = x.shape
    return x.reshape(*lead, n, heads, hd // heads).swapaxes(-3, -2)


def _merge_heads(x):
    *lead, h, n, dh = x.shape
    return x.swapaxes(-3, -2).reshape(*lead, n, h * dh)


def _complex_qkv(cfg: CellConfig, p: dict, x: ComplexTensor):
    q = _split_heads(x @ cweight(p, "wq"), cfg.heads)
    k = _split_heads(x @ cweight(p, "wk"), cfg.heads)
    v = _split_heads(x @ cweight(p, "wv"), cfg.heads)
    if cfg.rope:
        q, k = complex_rope(q, cfg.rope_base), complex_rope(k, cfg.rope_base)
    return q, k, v


def _cosine(qn: ComplexTensor, kn: ComplexTensor) -> Tensor:
    """``Re<qn_i, kn_j>`` for all pairs (phase-invariant, convention-free)."""
    return real_inner_scores(qn, kn)


def _complex_gates(cfg: CellConfig, p: dict, q: ComplexTensor, k: ComplexTensor) -> Tensor:
    qn, kn = l2_normalize_rows(q, NORM_EPS), l2_normalize_rows(k, NORM_EPS)
    kind = cfg.gate
    if kind in gates.ELEMENTWISE_KINDS:
        z = _cosine(qn, kn) * cfg.score_scale + p["bias"]
        if kind == "sigmoid":
            return z.sigmoid()
        return z.apply(partial(gates.gate_fn, kind), partial(gates.gate_dfn, kind))
    if kind == "screen":
        r2 = q.abs2().sum(axis=-1, keepdims=True) * k.abs2().sum(axis=-1, keepdims=True).swapaxes(-1, -2)
        hinge = (_cosine(qn, kn) - p["threshold"]).relu()
        return (r2 * hinge * hinge).tanh()
    if kind == "softmax_abs":
        kre, kim = kn.re.swapaxes(-1, -2), kn.im.swapaxes(-1, -2)
        re = qn.re @ kre + qn.im @ kim
        im = qn.re @ kim - qn.im @ kre
        mag = (re * re + im * im + NORM_EPS).sqrt()
        return softmax(mag * cfg.score_scale, axis=-1)
    raise ValueError(f"gate {kind!r} has no complex cell")


def _real_gates(cfg: CellConfig, p: dict, q: Tensor, k: Tensor) -> Tensor:
    s = (q @ k.swapaxes(-1, -2)) * (1.0 / cfg.score_scale)
    if cfg.gate == "softmax":
        return softmax(s, axis=-1)
    if cfg.gate == "sigmoid":
        return (s + p["bias"]).sigmoid()
    if cfg.gate == "screen":
        hinge = (s - p["threshold"]).relu()
        return (hinge * hinge).tanh()
    raise ValueError(f"gate {cfg.gate!r} has no real cell")


def _real_qkv(cfg: CellConfig, p: dict, x: Tensor):
    q = _split_heads(x @ p["wq"], cfg.heads)
    k = _split_heads(x @ p["wk"], cfg.heads)
    v = _split_heads(x @ p["wv"], cfg.heads)
    if cfg.rope:
        q, k = real_rope(q, cfg.rope_base), real_rope(k, cfg.rope_base)
    return q, k, v


def cell_gates(cfg: CellConfig, p: dict, x) -> Tensor:
    """Gate matrix ``alpha`` of shape ``(..., heads, N, N)`` (post-TanhNorm for screen)."""
    _check_input(cfg, x)
    if cfg.substrate == "complex":
        q, k, _ = _complex_qkv(cfg, p, x)
        return _complex_gates(cfg, p, q, k)
    q, k, _ = _real_qkv(cfg, p, x)
    return _real_gates(cfg, p, q, k)


def cell_forward(cfg: CellConfig, p: dict, x, return_gates: bool = False):
    """Apply the attention cell named by ``cfg.cell`` to ``x``."""
    _check_input(cfg, x)
    if cfg.substrate == "complex":
        q, k, v = _complex_qkv(cfg, p, x)
        if cfg.gate in gates.ELEMENTWISE_KINDS:
            u, alpha_data = normalized_gate_attention(
                q, k, v, p["bias"], cfg.score_scale, partial(gates.gate_fn, cfg.gate),
                partial(gates.gate_dfn, cfg.gate), NORM_EPS, sigmoid=cfg.gate == "sigmoid")
            alpha = Tensor(alpha_data)
        else:
            alpha = _complex_gates(cfg, p, q, k)
            u = complex_matmul(alpha, v)
        u = _merge_heads(u)
        if cfg.gate == "screen":
            u = modrelu(u, p["beta"])
        out = u @ cweight(p, "wo")
    else:
        q, k, v = _real_qkv(cfg, p, x)
        alpha = _real_gates(cfg, p, q, k)
        out = _merge_heads(alpha @ v) @ p["wo"]
    return (out, alpha) if return_gates else out


def _check_input(cfg: CellConfig, x) -> None:
    want = ComplexTensor if cfg.substrate == "complex" else Tensor
    if not isinstance(x, want):
        raise TypeError(f"{cfg.cell} expects a {want.__name__}, got {type(x).__name__}")
    if x.ndim < 2 or x.shape[-1] != cfg.dim:
        raise ValueError(f"{cfg.cell} expects (..., N, {cfg.dim}) input, got {x.shape}")
    if x.shape[-2] < 1:
        raise ValueError("sequence must contain at least one token")


# named entry points, one per cell family


def pct_forward(cfg: CellConfig, p: dict, x: ComplexTensor):
    if cfg.cell != "complex_sigmoid":
        raise ValueError("pct_forward needs cell='complex_sigmoid'")
    return cell_forward(cfg, p, x)


def complex_screen_forward(cfg: CellConfig, p: dict, x: ComplexTensor):
    if cfg.cell != "complex_screen":
        raise ValueError("complex_screen_forward needs cell='complex_screen'")
    return cell_forward(cfg, p, x)


def complex_softmax_forward(cfg: CellConfig, p: dict, x: ComplexTensor):
    if cfg.cell != "complex_softmax":
        raise ValueError("complex_softmax_forward needs cell='complex_softmax'")
    return cell_forward(cfg, p, x)


def counterexample_forward(cfg: CellConfig, p: dict, x: ComplexTensor):
    if cfg.cell not in COUNTEREXAMPLE_CELLS:
        raise ValueError(f"{cfg.cell!r} is not a counterexample cell")
    return cell_forward(cfg, p, x)


def real_forward(cfg: CellConfig, p: dict, x: Tensor):
    if cfg.substrate != "real":
        raise ValueError(f"{cfg.cell!r} is not a real cell")
    return cell_forward(cfg, p, x)

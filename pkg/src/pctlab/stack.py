"""Pre-norm residual stacks of attention cells with embedding and readout.

``x <- x + cell(norm(x)); x <- x + ffn(norm(x))`` per block, then a final norm.
Complex features are read out by concatenating (re, im) and applying a real
linear map, so logits are always real.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .cells import CellConfig, cell_forward, init_cell
from .layers import (complex_rmsnorm, const, cweight, ffn_forward, init_complex, init_ffn,
                     init_real, real_rmsnorm)
from .tensor import ComplexTensor, Tensor, concat

INPUT_KINDS = ("tokens", "complex", "real")
READOUTS = ("token", "pool")


@dataclass
class TaskIO:
    """How a task feeds the stack and reads logits out of it.

    ``input_kind``: ``tokens`` (integer ids, needs ``vocab``), ``complex``
    (``(..., N, channels)`` complex features) or ``real`` (real features).
    ``readout``: ``token`` gives logits at every position, ``pool`` averages
    features over the sequence first.
    """

    input_kind: str = "tokens"
    vocab: int = 0
    channels: int = 0
    n_classes: int = 2
    readout: str = "token"
    loss: str = "ce"

    def __post_init__(self):
        if self.input_kind not in INPUT_KINDS:
            raise ValueError(f"input_kind must be one of {INPUT_KINDS}")
        if self.readout not in READOUTS:
            raise ValueError(f"readout must be one of {READOUTS}")
        if self.loss not in ("ce", "bce"):
            raise ValueError("loss must be 'ce' or 'bce'")
        if self.input_kind == "tokens" and self.vocab < 1:
            raise ValueError("token input needs vocab >= 1")
        if self.input_kind != "tokens" and self.channels < 1:
            raise ValueError("feature input needs channels >= 1")
        if self.n_classes < 1:
            raise ValueError("n_classes must be >= 1")


@dataclass
class StackConfig:
    cell: CellConfig
    io: TaskIO = field(default_factory=TaskIO)
    depth: int = 4
    ff_mult: int = 4
    norm_eps: float = 1e-6
    modrelu_bias: float = 0.0

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.ff_mult < 1:
            raise ValueError("ff_mult must be >= 1")

    @property
    def substrate(self) -> str:
        return self.cell.substrate

    def to_dict(self) -> dict:
        return asdict(self)


def build_stack(cfg: StackConfig, rng: np.random.Generator) -> dict:
    """Initialise all parameters of a stack as a nested dict of leaf tensors."""
    d, sub, io = cfg.cell.dim, cfg.substrate, cfg.io
    params: dict = {"embed": {}, "blocks": [], "final_norm": {}, "readout": {}}
    emb = params["embed"]
    if io.input_kind == "tokens":
        if sub == "complex":
            std = np.sqrt(0.5)
            emb["table.re"] = Tensor(rng.normal(0, std, (io.vocab, d)), requires_grad=True)
            emb["table.im"] = Tensor(rng.normal(0, std, (io.vocab, d)), requires_grad=True)
        else:
            emb["table"] = Tensor(rng.normal(0, 1.0, (io.vocab, d)), requires_grad=True)
    else:
        fan_in = _feature_width(cfg)
        (init_complex if sub == "complex" else init_real)(emb, "w", fan_in, d, rng)
    for _ in range(cfg.depth):
        blk = {"norm1": {}, "attn": init_cell(cfg.cell, rng), "norm2": {}, "ffn": {}}
        const(blk["norm1"], "gain", 1.0, (d,))
        const(blk["norm2"], "gain", 1.0, (d,))
        init_ffn(blk["ffn"], sub, d, cfg.ff_mult, rng, cfg.modrelu_bias)
        params["blocks"].append(blk)
    const(params["final_norm"], "gain", 1.0, (d,))
    width = 2 * d if sub == "complex" else d
    init_real(params["readout"], "w", width, io.n_classes, rng)
    const(params["readout"], "b", 0.0, (io.n_classes,))
    return params


def _feature_width(cfg: StackConfig) -> int:
    # real cells see complex features as stacked (re, im) channels
    if cfg.io.input_kind == "complex" and cfg.substrate == "real":
        return 2 * cfg.io.channels
    return cfg.io.channels


def embed(cfg: StackConfig, params: dict, inputs):
    """Map raw task inputs to the ``(..., N, dim)`` sequence the blocks consume."""
    io, emb, sub = cfg.io, params["embed"], cfg.substrate
    if io.input_kind == "tokens":
        ids = np.asarray(inputs)
        if ids.dtype.kind not in "iu":
            raise TypeError("token input must be an integer array")
        if ids.size and (ids.min() < 0 or ids.max() >= io.vocab):
            raise ValueError(f"token ids must lie in [0, {io.vocab})")
        if sub == "complex":
            return ComplexTensor(emb["table.re"][ids], emb["table.im"][ids])
        return emb["table"][ids]
    if io.input_kind == "complex":
        z = inputs if isinstance(inputs, ComplexTensor) else ComplexTensor.from_numpy(np.asarray(inputs))
        if sub == "complex":
            return z @ cweight(emb, "w")
        return concat([z.re, z.im], axis=-1) @ emb["w"]
    x = inputs if isinstance(inputs, Tensor) else Tensor(np.asarray(inputs, dtype=float))
    if sub == "complex":
        return ComplexTensor(x) @ cweight(emb, "w")
    return x @ emb["w"]


def _norm(cfg: StackConfig, x, gain):
    if cfg.substrate == "complex":
        return complex_rmsnorm(x, gain, cfg.norm_eps)
    return real_rmsnorm(x, gain, cfg.norm_eps)


def stack_body(cfg: StackConfig, params: dict, x, return_gates: bool = False):
    """Residual blocks plus final norm on an already embedded sequence."""
    gates_out = []
    for blk in params["blocks"]:
        h = _norm(cfg, x, blk["norm1"]["gain"])
        if return_gates:
            a, g = cell_forward(cfg.cell, blk["attn"], h, return_gates=True)
            gates_out.append(g)
        else:
            a = cell_forward(cfg.cell, blk["attn"], h)
        x = x + a
        x = x + ffn_forward(blk["ffn"], _norm(cfg, x, blk["norm2"]["gain"]), cfg.substrate)
    x = _norm(cfg, x, params["final_norm"]["gain"])
    return (x, gates_out) if return_gates else x


def stack_features(cfg: StackConfig, params: dict, inputs):
    """Pre-readout features (complex for complex stacks)."""
    return stack_body(cfg, params, embed(cfg, params, inputs))


def readout(cfg: StackConfig, params: dict, feats) -> Tensor:
    r = concat([feats.re, feats.im], axis=-1) if isinstance(feats, ComplexTensor) else feats
    if cfg.io.readout == "pool":
        r = r.mean(axis=-2)
    return r @ params["readout"]["w"] + params["readout"]["b"]


def stack_forward(cfg: StackConfig, params: dict, inputs) -> Tensor:
    """Real logits: ``(..., N, C)`` for token readout, ``(..., C)`` for pooled."""
    return readout(cfg, params, stack_features(cfg, params, inputs))


def flatten_params(params, prefix: str = "") -> dict[str, Tensor]:
    """Dotted-name view of a nested parameter tree (shares the leaf tensors)."""
    out: dict[str, Tensor] = {}
    if isinstance(params, Tensor):
        out[prefix] = params
    elif isinstance(params, dict):
        for k, v in params.items():
            out.update(flatten_params(v, f"{prefix}.{k}" if prefix else str(k)))
    elif isinstance(params, (list, tuple)):
        for i, v in enumerate(params):
            out.update(flatten_params(v, f"{prefix}.{i}" if prefix else str(i)))
    else:
        raise TypeError(f"unexpected parameter node {type(params).__name__} at {prefix!r}")
    return out


def count_params(params) -> int:
    """Number of stored real scalars (a complex weight counts twice)."""
    return int(sum(t.size for t in flatten_params(params).values()))


def params_to_arrays(params) -> dict[str, np.ndarray]:
    return {k: t.data for k, t in flatten_params(params).items()}


def load_arrays(params, arrays: dict) -> None:
    flat = flatten_params(params)
    missing = set(flat) - set(arrays)
    if missing:
        raise KeyError(f"missing weights: {sorted(missing)[:5]}")
    for k, t in flat.items():
        a = np.asarray(arrays[k])
        if a.shape != t.shape:
            raise ValueError(f"shape mismatch for {k}: {a.shape} vs {t.shape}")
        t.data = a.astype(t.data.dtype)

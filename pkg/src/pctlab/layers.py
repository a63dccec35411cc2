"""Non-attention building blocks: RMSNorm, RoPE, modReLU, FFN and weight init.

Parameters are plain nested dicts of :class:`~pctlab.tensor.Tensor`; a complex
weight ``w`` is stored as the two real leaves ``w.re`` and ``w.im``.
"""

from __future__ import annotations

import numpy as np

from .tensor import ComplexTensor, Tensor, as_tensor, complex_rmsnorm_fused, modrelu_fused


def cweight(params: dict, name: str) -> ComplexTensor:
    return ComplexTensor(params[name + ".re"], params[name + ".im"])


def init_complex(params: dict, name: str, fan_in: int, fan_out: int, rng: np.random.Generator) -> None:
    """Independent re/im Gaussians with variance 1/(2*fan_in), so E|w|^2 = 1/fan_in."""
    std = np.sqrt(1.0 / (2.0 * fan_in))
    params[name + ".re"] = Tensor(rng.normal(0.0, std, (fan_in, fan_out)), requires_grad=True)
    params[name + ".im"] = Tensor(rng.normal(0.0, std, (fan_in, fan_out)), requires_grad=True)


def init_real(params: dict, name: str, fan_in: int, fan_out: int, rng: np.random.Generator) -> None:
    params[name] = Tensor(rng.normal(0.0, np.sqrt(1.0 / fan_in), (fan_in, fan_out)), requires_grad=True)


def const(params: dict, name: str, value, shape=()) -> None:
    params[name] = Tensor(np.full(shape, value, dtype=float), requires_grad=True)


def complex_rmsnorm(x: ComplexTensor, gain: Tensor | None = None, eps: float = 1e-12) -> ComplexTensor:
    """``x / sqrt(mean_m |x_m|^2 + eps)`` per token, times a real per-channel gain."""
    if gain is None:
        gain = Tensor(np.ones(x.shape[-1]))
    return complex_rmsnorm_fused(x, gain, eps)


def real_rmsnorm(x: Tensor, gain: Tensor | None = None, eps: float = 1e-12) -> Tensor:
    rms = ((x * x).mean(axis=-1, keepdims=True) + eps).sqrt()
    y = x / rms
    return y if gain is None else y * gain


def rope_angles(n: int, dim_head: int, base: float = 10000.0, offset: int = 0) -> np.ndarray:
    """``(n, dim_head)`` angles ``p * base**(-m/dim_head)`` for the complex lift."""
    pos = np.arange(offset, offset + n, dtype=float)[:, None]
    freq = base ** (-np.arange(dim_head, dtype=float) / dim_head)
    return pos * freq[None, :]


def complex_rope(x: ComplexTensor, base: float = 10000.0, positions: np.ndarray | None = None) -> ComplexTensor:
    """Rotate coordinate m of the token at position p by ``exp(i p w_m)``.

    ``x`` is ``(..., N, d)``; positions default to ``0..N-1``.
    """
    n, d = x.shape[-2], x.shape[-1]
    if positions is None:
        theta = rope_angles(n, d, base)
    else:
        theta = np.asarray(positions, dtype=float)[:, None] * base ** (-np.arange(d) / d)[None, :]
    return x.rotate(theta)


def real_rope(x: Tensor, base: float = 10000.0) -> Tensor:
    """Standard pairwise rotary embedding on consecutive coordinate pairs."""
    n, d = x.shape[-2], x.shape[-1]
    if d % 2:
        raise ValueError("real RoPE needs an even head dimension")
    theta = np.arange(n, dtype=float)[:, None] * base ** (-np.arange(0, d, 2) / d)[None, :]
    dtype = x.data.dtype
    cos = np.repeat(np.cos(theta), 2, axis=-1).astype(dtype)
    sin = np.repeat(np.sin(theta), 2, axis=-1).astype(dtype)
    # rotate_half: (x0, x1) -> (-x1, x0) on each pair
    perm = np.arange(d).reshape(-1, 2)[:, ::-1].reshape(-1)
    sign = np.tile(np.array([-1.0, 1.0], dtype=dtype), d // 2)
    return x * cos + x[..., perm] * (sign * sin)


def modrelu(z: ComplexTensor, beta, eps: float = 1e-12) -> ComplexTensor:
    """``z * max(|z| + beta, 0) / |z|``: shrinks the modulus, keeps the phase."""
    return modrelu_fused(z, as_tensor(beta), eps)


def init_ffn(params: dict, substrate: str, dim: int, ff_mult: int, rng: np.random.Generator,
             modrelu_bias: float = 0.0) -> None:
    hidden = ff_mult * dim
    if substrate == "complex":
        init_complex(params, "w1", dim, hidden, rng)
        init_complex(params, "w2", hidden, dim, rng)
        const(params, "beta", modrelu_bias, (hidden,))
    else:
        init_real(params, "w1", dim, hidden, rng)
        init_real(params, "w2", hidden, dim, rng)


def ffn_forward(params: dict, x, substrate: str):
    """Complex: ``W2 modReLU(W1 x)``; real: ``W2 relu(W1 x)^2``."""
    if substrate == "complex":
        h = modrelu(x @ cweight(params, "w1"), params["beta"])
        return h @ cweight(params, "w2")
    h = (x @ params["w1"]).relu()
    return (h * h) @ params["w2"]

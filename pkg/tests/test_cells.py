import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pctlab import tensor as T
from pctlab.cells import (CELL_NAMES, COUNTEREXAMPLE_CELLS, CellConfig, _complex_gates, _complex_qkv, cell_forward,
                          cell_gates, complex_screen_forward, complex_softmax_forward, counterexample_forward,
                          default_cell_config, init_cell, pct_forward, real_forward)
from pctlab.tensor import ComplexTensor, Tensor

from conftest import crandn


def C(z):
    return ComplexTensor.from_numpy(np.asarray(z, dtype=complex))


def identity_cell(cell, dim=1, **kw):
    cfg = CellConfig(cell, dim=dim, heads=1, dim_head=dim, seq_len=1, rope=False, **kw)
    p = init_cell(cfg, np.random.default_rng(0))
    for w in ("wq", "wk", "wv", "wo"):
        if cfg.substrate == "complex":
            p[w + ".re"].data[...] = np.eye(dim)
            p[w + ".im"].data[...] = 0.0
        else:
            p[w].data[...] = np.eye(dim)
    return cfg, p


def random_setup(cell, rng, n=16, dim=32, heads=4):
    cfg = CellConfig(cell, dim=dim, heads=heads, dim_head=dim // heads, seq_len=n)
    p = init_cell(cfg, rng)
    x = C(crandn(rng, n, dim)) if cfg.substrate == "complex" else Tensor(rng.normal(size=(n, dim)))
    return cfg, p, x


# configuration

def test_default_configs_are_parameter_fair():
    c, r = default_cell_config("complex_sigmoid"), default_cell_config("real_softmax")
    assert (c.dim, c.heads, c.dim_head) == (128, 4, 32)
    assert (r.dim, r.heads, r.dim_head) == (184, 4, 46)


def test_config_validation():
    with pytest.raises(ValueError):
        CellConfig("complex_sigmoid", dim=10, heads=4, dim_head=4)
    with pytest.raises(ValueError):
        CellConfig("complex_sigmoid", dim=12, heads=4, dim_head=3)
    with pytest.raises(ValueError):
        CellConfig("complex_gelu")
    assert CellConfig("complex_sigmoid", dim=12, heads=4, dim_head=3, rope=False).score_scale == math.sqrt(3)


def test_wrong_input_type_or_width(rng):
    cfg, p, x = random_setup("complex_sigmoid", rng)
    with pytest.raises(TypeError):
        cell_forward(cfg, p, Tensor(np.ones((4, 32))))
    with pytest.raises(ValueError):
        cell_forward(cfg, p, C(np.ones((4, 8))))


# PCT

def test_pct_hand_evaluation():
    cfg, p = identity_cell("complex_sigmoid")
    out = pct_forward(cfg, p, C([[1 + 0j]])).numpy()
    assert np.allclose(out, [[1 / (1 + math.exp(-1))]], atol=1e-10)


def test_pct_global_phase(rng):
    cfg, p, x = random_setup("complex_sigmoid", rng)
    rot = np.exp(1j * np.pi / 2)
    lhs = pct_forward(cfg, p, C(x.numpy() * rot)).numpy()
    rhs = rot * pct_forward(cfg, p, x).numpy()
    assert np.max(np.abs(lhs - rhs)) < 1e-10


def test_pct_rows_do_not_sum_to_one(rng):
    cfg, p, x = random_setup("complex_sigmoid", rng)
    dev = np.abs(cell_gates(cfg, p, x).data.sum(axis=-1) - 1)
    assert np.median(dev) > 0.01 and np.mean(dev > 0.01) >= 0.9


def test_fused_path_matches_reference(rng):
    for cell in ("complex_sigmoid",) + COUNTEREXAMPLE_CELLS:
        cfg, p, x = random_setup(cell, rng)
        out, alpha = cell_forward(cfg, p, x, return_gates=True)
        q, k, v = _complex_qkv(cfg, p, x)
        ref = _complex_gates(cfg, p, q, k).data
        assert np.max(np.abs(alpha.data - ref)) < 1e-12, cell


@given(seed=st.integers(0, 10**6))
def test_scores_bounded_by_sqrt_dim_head(seed):
    rng = np.random.default_rng(seed)
    cfg, p, x = random_setup("complex_sigmoid", rng, n=6, dim=8, heads=2)
    p["bias"].data[...] = 0.0
    a = cell_gates(cfg, p, x).data
    s = np.log(a) - np.log1p(-a)
    assert np.all(np.abs(s) <= math.sqrt(cfg.dim_head) + 1e-9)


# complex_screen

def test_screen_fully_screened_gives_zero():
    cfg, p = identity_cell("complex_screen", dim=2)
    p["threshold"].data[...] = 1.5
    out = complex_screen_forward(cfg, p, C([[1 + 1j, 0.5j]])).numpy()
    assert np.all(out == 0)


def test_screen_single_pair_hand_evaluation():
    cfg, p = identity_cell("complex_screen")
    p["threshold"].data[...] = 0.5
    g = cell_gates(cfg, p, C([[1 + 0j]])).data
    assert np.allclose(g, math.tanh(0.25), atol=1e-10)
    assert abs(math.tanh(0.25) - 0.2449) < 1e-4


def test_screen_global_phase(rng):
    cfg, p, x = random_setup("complex_screen", rng)
    p["beta"].data[...] = -0.05
    phi = 1.234
    lhs = complex_screen_forward(cfg, p, C(x.numpy() * np.exp(1j * phi))).numpy()
    rhs = np.exp(1j * phi) * complex_screen_forward(cfg, p, x).numpy()
    assert np.max(np.abs(lhs - rhs)) < 1e-10


# complex_softmax

def test_softmax_singleton(rng):
    cfg = CellConfig("complex_softmax", dim=4, heads=1, dim_head=4, seq_len=1)
    p = init_cell(cfg, rng)
    x = C(crandn(rng, 1, 4))
    out, alpha = cell_forward(cfg, p, x, return_gates=True)
    assert np.allclose(alpha.data, 1)
    wv = p["wv.re"].data + 1j * p["wv.im"].data
    wo = p["wo.re"].data + 1j * p["wo.im"].data
    assert np.allclose(out.numpy(), x.numpy() @ wv @ wo, atol=1e-12)


def test_softmax_rows_sum_to_one(rng):
    cfg, p, x = random_setup("complex_softmax", rng)
    assert np.max(np.abs(cell_gates(cfg, p, x).data.sum(-1) - 1)) < 1e-12


def test_softmax_couples_tokens(rng):
    cfg, p, x = random_setup("complex_softmax", rng, n=8)
    base = cell_gates(cfg, p, x).data
    z = x.numpy().copy()
    z[5] += 0.5 * crandn(rng, cfg.dim)
    alt = cell_gates(cfg, p, C(z)).data
    assert np.abs(alt - base)[..., :4, :4].max() > 1e-6
    complex_softmax_forward(cfg, p, x)


# real baselines

def test_real_softmax_singleton(rng):
    cfg = CellConfig("real_softmax", dim=8, heads=2, dim_head=4, seq_len=1)
    p = init_cell(cfg, rng)
    assert np.allclose(cell_gates(cfg, p, Tensor(rng.normal(size=(1, 8)))).data, 1)


def test_real_sigmoid_zero_scores(rng):
    n = 10
    cfg = CellConfig("real_sigmoid", dim=8, heads=2, dim_head=4, seq_len=n)
    p = init_cell(cfg, rng)
    p["wq"].data[...] = 0.0
    a = cell_gates(cfg, p, Tensor(rng.normal(size=(n, 8)))).data
    assert np.allclose(a, 1 / (1 + n), atol=1e-15)


def test_real_screen_above_all_scores(rng):
    cfg = CellConfig("real_screen", dim=8, heads=2, dim_head=4, seq_len=6)
    p = init_cell(cfg, rng)
    p["threshold"].data[...] = 1e6
    out = real_forward(cfg, p, Tensor(rng.normal(size=(6, 8)))).data
    assert np.all(out == 0)


# counterexamples

def test_relu_all_negative_gives_zero(rng):
    cfg, p, x = random_setup("complex_relu", rng)
    p["bias"].data[...] = -100.0
    assert np.all(counterexample_forward(cfg, p, x).numpy() == 0)


def test_softplus_and_sigmoid_differ_but_keep_phase(rng):
    outs = []
    for cell in ("complex_sigmoid", "complex_softplus"):
        cfg, p, x = random_setup(cell, np.random.default_rng(7))
        phi = 2.1
        base = cell_forward(cfg, p, x).numpy()
        rot = cell_forward(cfg, p, C(x.numpy() * np.exp(1j * phi))).numpy()
        assert np.max(np.abs(rot - np.exp(1j * phi) * base)) < 1e-10
        outs.append(base)
    assert np.max(np.abs(outs[0] - outs[1])) > 1e-3


def test_cubic_amplifies_at_range_edge(rng):
    cfg, p = identity_cell("complex_cubic", dim=128)
    p["bias"].data[...] = 0.0
    x = crandn(rng, 1, 128)
    out = counterexample_forward(cfg, p, C(x)).numpy()
    gain = math.sqrt(128) + 128 ** 1.5 / 6
    assert np.allclose(out, gain * x, rtol=1e-9)


def test_counterexample_guard(rng):
    cfg, p, x = random_setup("complex_sigmoid", rng)
    with pytest.raises(ValueError):
        counterexample_forward(cfg, p, x)


# gradients

@pytest.mark.parametrize("cell", CELL_NAMES)
def test_cell_gradients(cell, rng):
    cfg = CellConfig(cell, dim=8, heads=2, dim_head=4, seq_len=5)
    p = init_cell(cfg, rng)
    if cfg.substrate == "complex":
        x = C(crandn(rng, 5, 8))
        w = C(crandn(rng, 5, 8))
        loss = lambda: (cell_forward(cfg, p, x) * w).re.sum()
    else:
        x = Tensor(rng.normal(size=(5, 8)))
        w = Tensor(rng.normal(size=(5, 8)))
        loss = lambda: (cell_forward(cfg, p, x) * w).sum()
    if "threshold" in p:
        p["threshold"].data[...] = -0.3
    errs = T.gradient_check(loss, p, max_coords=12, rng=rng)
    assert max(errs.values()) < 1e-4, errs

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pctlab import tensor as T
from pctlab.cells import CellConfig, default_cell_config
from pctlab.layers import complex_rmsnorm, complex_rope, ffn_forward, init_ffn, modrelu, real_rmsnorm, real_rope
from pctlab.stack import (StackConfig, TaskIO, build_stack, count_params, flatten_params, load_arrays,
                          params_to_arrays, stack_features, stack_forward)
from pctlab.tensor import ComplexTensor, Tensor, hermitian_inner

from conftest import crandn


def C(z):
    return ComplexTensor.from_numpy(np.asarray(z, dtype=complex))


# RMSNorm

def test_rmsnorm_unit_magnitude_unchanged(rng):
    x = np.exp(1j * rng.uniform(0, 2 * np.pi, (3, 6)))
    assert np.max(np.abs(complex_rmsnorm(C(x)).numpy() - x)) < 1e-12


@given(seed=st.integers(0, 10**6), phi=st.floats(0, 2 * np.pi))
def test_rmsnorm_phase_equivariant(seed, phi):
    x = crandn(np.random.default_rng(seed), 4, 5)
    rot = np.exp(1j * phi)
    assert np.max(np.abs(complex_rmsnorm(C(x * rot)).numpy() - rot * complex_rmsnorm(C(x)).numpy())) < 1e-12


def test_rmsnorm_three_four():
    assert np.isclose(abs(complex_rmsnorm(C([[3 + 4j]])).numpy()[0, 0]), 1.0)


def test_rmsnorm_keeps_coordinate_phase(rng):
    x = crandn(rng, 3, 4)
    y = complex_rmsnorm(C(x), Tensor(rng.uniform(0.5, 2, 4))).numpy()
    assert np.allclose(np.angle(y), np.angle(x))


def test_real_rmsnorm(rng):
    y = real_rmsnorm(Tensor(rng.normal(size=(3, 8)))).data
    assert np.allclose((y * y).mean(-1), 1.0)


# RoPE

def test_rope_position_zero_identity(rng):
    x = crandn(rng, 1, 8)
    assert np.array_equal(complex_rope(C(x)).numpy(), x)


def test_rope_relative(rng):
    q, k = crandn(rng, 8), crandn(rng, 8)

    def score(p, pp):
        qr = complex_rope(C(q[None]), positions=[p])
        kr = complex_rope(C(k[None]), positions=[pp])
        return hermitian_inner(qr, kr).numpy()[0]

    assert abs(score(3, 5) - score(10, 12)) < 1e-10


def test_rope_commutes_with_global_phase(rng):
    x = crandn(rng, 5, 8)
    rot = np.exp(0.77j)
    assert np.max(np.abs(complex_rope(C(x * rot)).numpy() - rot * complex_rope(C(x)).numpy())) < 1e-12


def test_real_rope_relative(rng):
    q, k = rng.normal(size=8), rng.normal(size=8)
    n = 13
    qr = real_rope(Tensor(np.tile(q, (n, 1)))).data
    kr = real_rope(Tensor(np.tile(k, (n, 1)))).data
    assert abs(qr[3] @ kr[5] - qr[10] @ kr[12]) < 1e-10
    with pytest.raises(ValueError):
        real_rope(Tensor(np.ones((2, 3))))


# FFN and modReLU

def test_ffn_zero_input_zero_output(rng):
    p = {}
    init_ffn(p, "complex", 4, 4, rng)
    assert np.all(ffn_forward(p, C(np.zeros((2, 4))), "complex").numpy() == 0)


def test_modrelu_preserves_phase(rng):
    z = crandn(rng, 50)
    beta = -0.3
    out = modrelu(C(z), beta).numpy()
    live = np.abs(z) + beta > 0
    assert np.max(np.abs(np.angle(out[live]) - np.angle(z[live]))) < 1e-12
    assert np.all(out[~live] == 0)


def test_real_relu_squared():
    p = {"w1": Tensor(np.eye(2)), "w2": Tensor(np.eye(2))}
    assert np.allclose(ffn_forward(p, Tensor(np.array([[-2.0, 3.0]])), "real").data, [[0.0, 9.0]])


# stack

def token_stack(cell, dim=8, heads=2, depth=2, vocab=7, n_classes=5, **kw):
    cc = CellConfig(cell, dim=dim, heads=heads, dim_head=dim // heads, seq_len=6)
    return StackConfig(cell=cc, io=TaskIO("tokens", vocab=vocab, n_classes=n_classes), depth=depth, **kw)


def test_isolation_architecture_builds():
    cfg = StackConfig(cell=default_cell_config("complex_sigmoid"), io=TaskIO("tokens", vocab=17, n_classes=16),
                      depth=4, ff_mult=4)
    p = build_stack(cfg, np.random.default_rng(0))
    assert len(p["blocks"]) == 4
    assert count_params(p) > 0
    assert p["blocks"][0]["ffn"]["w1.re"].shape == (128, 512)


def test_parameter_fairness():
    io = TaskIO("tokens", vocab=17, n_classes=16)
    nc = count_params(build_stack(StackConfig(default_cell_config("complex_sigmoid"), io), np.random.default_rng(0)))
    nr = count_params(build_stack(StackConfig(default_cell_config("real_sigmoid"), io), np.random.default_rng(0)))
    assert abs(nr - nc) / nc <= 0.05


def test_minimal_stack_runs():
    cc = CellConfig("complex_sigmoid", dim=2, heads=1, dim_head=2, seq_len=3)
    cfg = StackConfig(cell=cc, io=TaskIO("tokens", vocab=4, n_classes=3), depth=1)
    out = stack_forward(cfg, build_stack(cfg, np.random.default_rng(0)), np.array([[0, 1, 3]]))
    assert out.shape == (1, 3, 3) and np.all(np.isfinite(out.data))


def test_complex_init_variance():
    cfg = token_stack("complex_sigmoid", dim=64, heads=4, depth=1)
    w = build_stack(cfg, np.random.default_rng(0))["blocks"][0]["ffn"]["w1.re"].data
    assert abs(w.var() * 2 * 64 - 1) < 0.05


def test_bias_initialised_to_minus_log_n():
    cfg = token_stack("complex_sigmoid")
    b = build_stack(cfg, np.random.default_rng(0))["blocks"][1]["attn"]["bias"].data
    assert b.shape == (2, 1, 1) and np.allclose(b, -np.log(6))


def test_stack_phase_equivariant_features(rng):
    cc = CellConfig("complex_sigmoid", dim=8, heads=2, dim_head=4, seq_len=10)
    cfg = StackConfig(cell=cc, io=TaskIO("complex", channels=3, n_classes=2), depth=3)
    p = build_stack(cfg, rng)
    x = crandn(rng, 10, 3)
    rot = np.exp(2.5j)
    lhs = stack_features(cfg, p, x * rot).numpy()
    rhs = rot * stack_features(cfg, p, x).numpy()
    assert np.max(np.abs(lhs - rhs)) / np.max(np.abs(rhs)) < 1e-8


@pytest.mark.parametrize("cell", ["complex_sigmoid", "real_softmax"])
def test_stack_gradients(cell, rng):
    cfg = token_stack(cell, depth=2)
    p = build_stack(cfg, rng)
    ids = rng.integers(0, 7, (2, 6))
    tgt = rng.integers(0, 5, (2, 6))
    loss = lambda: T.cross_entropy(stack_forward(cfg, p, ids), tgt)
    errs = T.gradient_check(loss, flatten_params(p), max_coords=6, rng=rng)
    assert max(errs.values()) < 1e-4


def test_pool_readout_and_feature_inputs(rng):
    cc = CellConfig("real_sigmoid", dim=8, heads=2, dim_head=4, seq_len=5)
    cfg = StackConfig(cell=cc, io=TaskIO("complex", channels=2, n_classes=4, readout="pool"), depth=1)
    out = stack_forward(cfg, build_stack(cfg, rng), crandn(rng, 3, 5, 2))
    assert out.shape == (3, 4)


def test_bad_token_ids(rng):
    cfg = token_stack("complex_sigmoid")
    p = build_stack(cfg, rng)
    with pytest.raises(ValueError):
        stack_forward(cfg, p, np.array([[0, 9]]))
    with pytest.raises(TypeError):
        stack_forward(cfg, p, np.array([[0.5]]))


def test_weights_roundtrip(rng):
    cfg = token_stack("complex_sigmoid")
    p = build_stack(cfg, rng)
    arrays = {k: v.copy() for k, v in params_to_arrays(p).items()}
    q = build_stack(cfg, np.random.default_rng(99))
    load_arrays(q, arrays)
    ids = rng.integers(0, 7, (1, 6))
    assert np.array_equal(stack_forward(cfg, p, ids).data, stack_forward(cfg, q, ids).data)


def test_config_validation():
    cc = CellConfig("complex_sigmoid", dim=8, heads=2, dim_head=4)
    with pytest.raises(ValueError):
        StackConfig(cell=cc, depth=0)
    with pytest.raises(ValueError):
        TaskIO("tokens", vocab=0)
    with pytest.raises(ValueError):
        TaskIO("complex", channels=1, readout="last")

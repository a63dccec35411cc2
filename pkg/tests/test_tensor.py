import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pctlab import tensor as T
from pctlab.tensor import ComplexTensor, Tensor, complex_matmul, fft2, hermitian_inner, l2_normalize_rows

from conftest import crandn


def C(z, grad=False):
    return ComplexTensor.from_numpy(np.asarray(z, dtype=complex), requires_grad=grad)


# complex_matmul

def test_matmul_identity():
    assert np.allclose((C([[1]]) @ C([[1]])).numpy(), [[1 + 0j]])


def test_matmul_i_times_i():
    assert np.allclose((C([[1j]]) @ C([[1j]])).numpy(), [[-1 + 0j]])


def test_matmul_matches_real_block_matrix(rng):
    a, b = crandn(rng, 3, 3), crandn(rng, 3, 3)
    block = lambda z: np.block([[z.real, -z.imag], [z.imag, z.real]])
    got = (C(a) @ C(b)).numpy()
    ref = block(a) @ block(b)
    assert np.max(np.abs(block(got) - ref)) < 1e-12


@given(m=st.integers(1, 5), k=st.integers(1, 5), p=st.integers(1, 5), seed=st.integers(0, 10**6))
def test_matmul_block_property(m, k, p, seed):
    rng = np.random.default_rng(seed)
    a, b = crandn(rng, m, k), crandn(rng, k, p)
    assert np.max(np.abs((C(a) @ C(b)).numpy() - a @ b)) < 1e-12


def test_matmul_batched_and_real_left_operand(rng):
    a, b = crandn(rng, 2, 4, 3), crandn(rng, 3, 5)
    assert np.allclose((C(a) @ C(b)).numpy(), a @ b, atol=1e-12)
    r = rng.normal(size=(2, 4, 4))
    assert np.allclose(complex_matmul(Tensor(r), C(a)).numpy(), r @ a, atol=1e-12)


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError):
        C(np.ones((2, 3))) @ C(np.ones((2, 3)))


def test_matmul_gradients_both_operands(rng):
    a, b = C(crandn(rng, 3, 4), True), C(crandn(rng, 4, 2), True)
    params = {"a.re": a.re, "a.im": a.im, "b.re": b.re, "b.im": b.im}
    w = Tensor(rng.normal(size=(3, 2)))
    loss = lambda: ((a @ b).abs2() * w).sum()
    assert max(T.gradient_check(loss, params).values()) < 1e-6


# hermitian_inner

@pytest.mark.parametrize("a,b,want", [
    ([1, 0], [1, 0], 1 + 0j),
    ([1j], [1j], 1 + 0j),
    ([1 + 1j, 2], [0, 1 - 1j], 2 - 2j),
])
def test_hermitian_inner_examples(a, b, want):
    assert np.allclose(hermitian_inner(C(a), C(b)).numpy(), want)


def test_hermitian_inner_conventions_conjugate(rng):
    a, b = C(crandn(rng, 6)), C(crandn(rng, 6))
    first = hermitian_inner(a, b).numpy()
    second = hermitian_inner(a, b, convention="second").numpy()
    assert np.isclose(first, np.conj(second))
    assert np.isclose(first, np.vdot(a.numpy(), b.numpy()))


def test_hermitian_inner_length_mismatch():
    with pytest.raises(ValueError):
        hermitian_inner(C([1, 2]), C([1]))


# l2_normalize_rows

def test_normalize_345():
    out = l2_normalize_rows(C([[3 + 4j, 0]]), eps=1e-30).numpy()
    assert np.allclose(out, [[0.6 + 0.8j, 0]], atol=1e-15)


def test_normalize_zero_row_is_finite():
    out = l2_normalize_rows(C(np.zeros((2, 3)))).numpy()
    assert np.all(np.isfinite(out)) and np.all(out == 0)


@given(seed=st.integers(0, 10**6), scale=st.floats(1.0, 1e3))
def test_normalize_unit_norm(seed, scale):
    rng = np.random.default_rng(seed)
    x = crandn(rng, 4, 7)
    x *= scale / np.linalg.norm(x, axis=1, keepdims=True)
    norms = np.linalg.norm(l2_normalize_rows(C(x)).numpy(), axis=1)
    assert np.all(np.abs(norms - 1) < 1e-9)


@given(seed=st.integers(0, 10**6), phi=st.floats(0, 2 * np.pi))
def test_normalize_phase_equivariant(seed, phi):
    rng = np.random.default_rng(seed)
    x = crandn(rng, 5, 4)
    rot = np.exp(1j * phi)
    lhs = l2_normalize_rows(C(x * rot)).numpy()
    rhs = rot * l2_normalize_rows(C(x)).numpy()
    assert np.max(np.abs(lhs - rhs)) < 1e-12


def test_normalize_rejects_nonpositive_eps():
    with pytest.raises(ValueError):
        l2_normalize_rows(C([[1]]), eps=0.0)


# backward

def test_backward_re_of_product():
    w = C([1 + 0j])
    x = C([0.3 - 0.7j], grad=True)
    (w * x).re.sum().backward()
    assert np.allclose(x.re.grad, 1) and np.allclose(x.im.grad, 0)


def test_backward_abs2():
    w = C([0.4 - 1.3j], grad=True)
    w.abs2().sum().backward()
    assert np.allclose(w.re.grad, 0.8) and np.allclose(w.im.grad, -2.6)


def test_backward_needs_scalar():
    t = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        (t * 2).backward()


def test_detached_gets_no_grad():
    a = Tensor(np.ones(3), requires_grad=True)
    b = a.detach()
    (a * b).sum().backward()
    assert b.grad is None and np.allclose(a.grad, 1)


def test_shared_node_visited_once():
    a = Tensor(np.array([2.0]), requires_grad=True)
    b = a * a
    (b + b).sum().backward()
    assert np.allclose(a.grad, 8.0)


OPS = {
    "exp": lambda x: x.exp(), "tanh": lambda x: x.tanh(), "sigmoid": lambda x: x.sigmoid(),
    "sqrt": lambda x: (x * x + 1).sqrt(), "log": lambda x: (x * x + 1).log(),
    "softmax": lambda x: T.softmax(x, axis=-1), "log_softmax": lambda x: T.log_softmax(x),
    "relu": lambda x: (x + 0.05).relu(), "div": lambda x: x / (x * x + 2),
    "transpose": lambda x: x.transpose(1, 0) @ x, "mean": lambda x: x.mean(axis=0, keepdims=True) * x,
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_real_op_gradients(name, rng):
    x = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
    w = rng.normal(size=(3, 3))
    err = T.gradient_check(lambda: (OPS[name](x) * Tensor(w)).sum(), {"x": x})
    assert err["x"] < 1e-6


def test_fused_complex_ops_gradients(rng):
    x = C(crandn(rng, 2, 5, 6), True)
    gain = Tensor(rng.normal(size=6), requires_grad=True)
    beta = Tensor(rng.normal(size=6) * 0.3, requires_grad=True)
    w = crandn(rng, 2, 5, 6)
    wt = C(w)

    def loss():
        y = T.modrelu_fused(T.complex_rmsnorm_fused(x, gain, 1e-6), beta, 1e-12)
        return (y * wt).re.sum()

    errs = T.gradient_check(loss, {"x.re": x.re, "x.im": x.im, "gain": gain, "beta": beta})
    assert max(errs.values()) < 1e-6


def test_cross_entropy_masked_matches_manual(rng):
    logits = rng.normal(size=(2, 4, 5))
    tgt = rng.integers(0, 5, (2, 4))
    mask = np.array([[1, 0, 1, 0], [0, 0, 1, 1]], dtype=float)
    got = T.cross_entropy(Tensor(logits), tgt, mask).item()
    lp = logits - np.log(np.exp(logits).sum(-1, keepdims=True))
    nll = -np.take_along_axis(lp, tgt[..., None], -1)[..., 0]
    assert np.isclose(got, (nll * mask).sum() / mask.sum())


def test_precision_switch():
    with T.precision("f32"):
        assert Tensor(np.ones(2)).data.dtype == np.float32
    assert Tensor(np.ones(2)).data.dtype == np.float64
    with pytest.raises(ValueError):
        T.set_precision("f16")


# fft2

def test_fft2_ones():
    assert np.allclose(fft2(np.ones((2, 2))).numpy(), [[4, 0], [0, 0]])


def test_fft2_delta():
    x = np.zeros((4, 4))
    x[0, 0] = 1
    assert np.allclose(fft2(x).numpy(), np.ones((4, 4)))


def test_fft2_roundtrip(rng):
    x = rng.normal(size=(8, 8))
    assert np.max(np.abs(np.fft.ifft2(fft2(x).numpy()) - x)) < 1e-10


def test_fft2_rejects_non_square():
    with pytest.raises(ValueError):
        fft2(np.ones((2, 3)))


def test_forward_is_deterministic(rng):
    a, b = crandn(rng, 6, 6), crandn(rng, 6, 6)
    r1 = (C(a) @ C(b)).numpy()
    r2 = (C(a) @ C(b)).numpy()
    assert np.array_equal(r1, r2)

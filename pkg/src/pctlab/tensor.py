"""Dense numpy tensors with reverse-mode autodiff.

Everything is differentiated over real scalars. A complex value is carried as a
pair of real tensors (:class:`ComplexTensor`), so the gradient of a real loss
with respect to ``(re, im)`` is exactly the steepest-descent direction that
Wirtinger calculus would give, without needing a complex AD calculus.

Every result tensor keeps references to its parents and a backward closure;
together these nodes form the tape that :meth:`Tensor.backward` replays in
reverse topological order.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_DTYPES = {"f32": np.float32, "f64": np.float64}
_dtype = np.float64
_grad_enabled = True
_debug = False


def set_precision(precision: str) -> None:
    """Select the float width used for every tensor created afterwards."""
    global _dtype
    try:
        _dtype = _DTYPES[precision]
    except KeyError:
        raise ValueError(f"precision must be one of {sorted(_DTYPES)}, got {precision!r}") from None


def get_dtype():
    return _dtype


@contextlib.contextmanager
def precision(name: str):
    prev = _dtype
    set_precision(name)
    try:
        yield
    finally:
        globals()["_dtype"] = prev


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def set_debug(flag: bool) -> None:
    """In debug mode every op checks its output for NaN/Inf."""
    global _debug
    _debug = bool(flag)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _result(data, parents: tuple, backward) -> "Tensor":
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data)
    out.grad = None
    rg = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = rg
    out._parents = parents if rg else ()
    out._backward = backward if rg else None
    if _debug and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite value produced in forward pass")
    return out


def as_tensor(x) -> "Tensor":
    return x if isinstance(x, Tensor) else Tensor(x)


class Tensor:
    """A real array node on the autodiff tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=_dtype) if not isinstance(data, np.ndarray) or data.dtype != _dtype else data
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # -- backward -------------------------------------------------------------

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf that requires grad."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            raise RuntimeError("loss does not depend on any tensor that requires grad")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                g = np.array(g, dtype=node.data.dtype)
                node.grad = g if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                k = id(p)
                grads[k] = grads[k] + pg if k in grads else pg

    # -- arithmetic -----------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        a, b = self.shape, other.shape
        return _result(self.data + other.data, (self, other),
                       lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)))

    __radd__ = __add__

    def __sub__(self, other):
        other = as_tensor(other)
        a, b = self.shape, other.shape
        return _result(self.data - other.data, (self, other),
                       lambda g: (_unbroadcast(g, a), _unbroadcast(-g, b)))

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __mul__(self, other):
        other = as_tensor(other)
        x, y = self.data, other.data

        def backward(g):
            return (_unbroadcast(g * y, x.shape) if self.requires_grad else None,
                    _unbroadcast(g * x, y.shape) if other.requires_grad else None)

        return _result(x * y, (self, other), backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        x, y = self.data, other.data
        out = x / y

        def backward(g):
            return (_unbroadcast(g / y, x.shape) if self.requires_grad else None,
                    _unbroadcast(-g * out / y, y.shape) if other.requires_grad else None)

        return _result(out, (self, other), backward)

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __neg__(self):
        return _result(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, p: float):
        if isinstance(p, Tensor):
            raise TypeError("only constant exponents are supported")
        x = self.data
        return _result(x ** p, (self,), lambda g: (g * p * x ** (p - 1),))

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(as_tensor(other), self)

    def __getitem__(self, idx):
        shape, dtype = self.shape, self.data.dtype
        basic = _is_basic_index(idx)

        def backward(g):
            z = np.zeros(shape, dtype=dtype)
            if basic:
                z[idx] = g
            else:
                np.add.at(z, idx, g)
            return (z,)

        return _result(self.data[idx], (self,), backward)

    # -- reductions and shape -------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        shape = self.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape),)

        return _result(self.data.sum(axis=axis, keepdims=keepdims), (self,), backward)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return _result(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = tuple(np.argsort(axes))
        return _result(self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),))

    def swapaxes(self, a: int, b: int):
        return _result(np.swapaxes(self.data, a, b), (self,), lambda g: (np.swapaxes(g, a, b),))

    @property
    def T(self):
        return self.swapaxes(-1, -2)

    # -- elementwise ----------------------------------------------------------

    def exp(self):
        out = np.exp(self.data)
        return _result(out, (self,), lambda g: (g * out,))

    def log(self):
        x = self.data
        return _result(np.log(x), (self,), lambda g: (g / x,))

    def sqrt(self):
        out = np.sqrt(self.data)
        return _result(out, (self,), lambda g: (g * 0.5 / out,))

    def tanh(self):
        out = np.tanh(self.data)
        return _result(out, (self,), lambda g: (g * (1.0 - out * out),))

    def sigmoid(self):
        out = _sigmoid(self.data)
        return _result(out, (self,), lambda g: (g * out * (1.0 - out),))

    def relu(self):
        x = self.data
        return _result(np.maximum(x, 0), (self,), lambda g: (g * (x > 0),))

    def apply(self, f: Callable[[np.ndarray], np.ndarray], df: Callable[[np.ndarray], np.ndarray]):
        """Elementwise ``f`` with analytic derivative ``df``; both map arrays to arrays."""
        x = self.data
        out = np.asarray(f(x), dtype=x.dtype)
        return _result(out, (self,), lambda g: (g * df(x),))


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    x, y = a.data, b.data
    if x.shape[-1] != y.shape[-2 if y.ndim > 1 else 0]:
        raise ValueError(f"matmul dimension mismatch: {x.shape} @ {y.shape}")

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(y, -1, -2), x.shape)
        if b.requires_grad:
            if y.ndim == 2 and x.ndim > 2:
                gb = x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(x, -1, -2) @ g, y.shape)
        return ga, gb

    return _result(x @ y, (a, b), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                   lambda g: tuple(np.split(g, cuts, axis=axis)))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _result(out, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def cross_entropy(logits: Tensor, targets: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean negative log-likelihood over the positions where ``mask`` is true.

    ``logits`` has shape ``(..., C)``; ``targets`` holds class indices with shape ``(...)``.
    """
    targets = np.asarray(targets)
    if mask is None:
        mask = np.ones(targets.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise ValueError("cross_entropy: empty loss mask")
    lp = log_softmax(logits, axis=-1)
    safe = np.where(mask, targets, 0)
    onehot = np.zeros(lp.shape, dtype=lp.data.dtype)
    np.put_along_axis(onehot, safe[..., None], 1.0, axis=-1)
    onehot *= mask[..., None]
    return -(lp * Tensor(onehot)).sum() * (1.0 / count)


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy, computed stably from logits."""
    x = logits.data
    y = np.asarray(targets, dtype=x.dtype)
    loss = np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))
    n = x.size
    out = np.asarray(loss.mean(), dtype=x.dtype)
    return _result(out, (logits,), lambda g: (g * (_sigmoid(x) - y) / n,))


# -----------------------------------------------------------------------------
# complex values as (re, im) pairs
# -----------------------------------------------------------------------------


class ComplexTensor:
    """Complex array carried as two real tensors of identical shape."""

    __slots__ = ("re", "im")

    def __init__(self, re, im=None):
        self.re = as_tensor(re)
        self.im = as_tensor(np.zeros(self.re.shape)) if im is None else as_tensor(im)
        if self.re.shape != self.im.shape:
            raise ValueError(f"re/im shape mismatch: {self.re.shape} vs {self.im.shape}")

    @classmethod
    def from_numpy(cls, z, requires_grad: bool = False) -> "ComplexTensor":
        z = np.asarray(z)
        return cls(Tensor(z.real, requires_grad), Tensor(np.imag(z), requires_grad))

    def numpy(self) -> np.ndarray:
        return self.re.data + 1j * self.im.data

    def __repr__(self):
        return f"ComplexTensor(shape={self.shape})"

    @property
    def shape(self) -> tuple:
        return self.re.shape

    @property
    def ndim(self) -> int:
        return self.re.ndim

    @property
    def requires_grad(self) -> bool:
        return self.re.requires_grad or self.im.requires_grad

    def __add__(self, other):
        if isinstance(other, ComplexTensor):
            return ComplexTensor(self.re + other.re, self.im + other.im)
        if isinstance(other, complex):
            return ComplexTensor(self.re + other.real, self.im + other.imag)
        return ComplexTensor(self.re + other, self.im)

    __radd__ = __add__

    def __sub__(self, other):
        return self + (-other)

    def __neg__(self):
        return ComplexTensor(-self.re, -self.im)

    def __mul__(self, other):
        if isinstance(other, ComplexTensor):
            return ComplexTensor(self.re * other.re - self.im * other.im,
                                 self.re * other.im + self.im * other.re)
        if isinstance(other, complex):
            a, b = other.real, other.imag
            return ComplexTensor(self.re * a - self.im * b, self.re * b + self.im * a)
        return ComplexTensor(self.re * other, self.im * other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (ComplexTensor, complex)):
            raise TypeError("division by a complex value is not supported; divide by a real tensor")
        return ComplexTensor(self.re / other, self.im / other)

    def __matmul__(self, other):
        return complex_matmul(self, other)

    def __rmatmul__(self, other):
        return complex_matmul(other, self)

    def __getitem__(self, idx):
        return ComplexTensor(self.re[idx], self.im[idx])

    def conj(self) -> "ComplexTensor":
        return ComplexTensor(self.re, -self.im)

    def abs2(self) -> Tensor:
        return self.re * self.re + self.im * self.im

    def abs(self, eps: float = 0.0) -> Tensor:
        return (self.abs2() + eps).sqrt() if eps else self.abs2().sqrt()

    def sum(self, axis=None, keepdims: bool = False):
        return ComplexTensor(self.re.sum(axis, keepdims), self.im.sum(axis, keepdims))

    def reshape(self, *shape):
        return ComplexTensor(self.re.reshape(*shape), self.im.reshape(*shape))

    def transpose(self, *axes):
        return ComplexTensor(self.re.transpose(*axes), self.im.transpose(*axes))

    def swapaxes(self, a: int, b: int):
        return ComplexTensor(self.re.swapaxes(a, b), self.im.swapaxes(a, b))

    def rotate(self, theta) -> "ComplexTensor":
        """Multiply by the constant unit phase ``exp(i*theta)`` (broadcast)."""
        c = np.cos(theta).astype(self.re.data.dtype)
        s = np.sin(theta).astype(self.re.data.dtype)
        return ComplexTensor(self.re * c - self.im * s, self.re * s + self.im * c)

    def detach(self) -> "ComplexTensor":
        return ComplexTensor(self.re.detach(), self.im.detach())


def complex_matmul(a, b) -> ComplexTensor:
    """Product of complex (or one real, one complex) operands over the last two axes."""
    if isinstance(a, ComplexTensor) and isinstance(b, ComplexTensor):
        if b.ndim == 2 and a.shape[-1] == b.shape[0]:
            return _complex_linear(a, b)
        return ComplexTensor(a.re @ b.re - a.im @ b.im, a.re @ b.im + a.im @ b.re)
    if isinstance(b, ComplexTensor):
        a = as_tensor(a)
        if a.shape[-1] != b.shape[-2]:
            raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
        return _real_times_complex(a, b)
    if isinstance(a, ComplexTensor):
        b = as_tensor(b)
        return ComplexTensor(a.re @ b, a.im @ b)
    raise TypeError("complex_matmul needs at least one ComplexTensor")


class _PairGrad:
    """Gradient for a node whose two children are the re and im parts."""

    __slots__ = ("re", "im")

    def __init__(self, re=None, im=None):
        self.re, self.im = re, im

    def __add__(self, other):
        return _PairGrad(_add_opt(self.re, other.re), _add_opt(self.im, other.im))


def _add_opt(a, b):
    if a is None:
        return b
    return a if b is None else a + b


def complex_result(re: np.ndarray, im: np.ndarray, parents: tuple, backward) -> ComplexTensor:
    """Wrap a fused op with complex output.

    ``backward(g_re, g_im)`` returns one gradient (or None) per parent; a part
    that received no gradient is passed as zeros.
    """
    joint = Tensor.__new__(Tensor)
    joint.data = np.empty(0, dtype=re.dtype)
    joint.grad = None
    joint.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
    joint._parents = parents if joint.requires_grad else ()

    def joint_backward(pg):
        gr = np.zeros_like(re) if pg.re is None else pg.re
        gi = np.zeros_like(im) if pg.im is None else pg.im
        return backward(gr, gi)

    joint._backward = joint_backward if joint.requires_grad else None
    out_re = _result(re, (joint,), lambda g: (_PairGrad(g, None),))
    out_im = _result(im, (joint,), lambda g: (_PairGrad(None, g),))
    return ComplexTensor(out_re, out_im)


def _complex_linear(a: ComplexTensor, w: ComplexTensor) -> ComplexTensor:
    """``a @ w`` for a 2-D complex ``w`` as one real matmul against the block matrix."""
    k, p = w.shape
    x = np.concatenate([a.re.data, a.im.data], axis=-1)
    wr, wi = w.re.data, w.im.data
    wb = np.block([[wr, wi], [-wi, wr]])
    lead = x.shape[:-1]
    y = (x.reshape(-1, 2 * k) @ wb).reshape(*lead, 2 * p)

    def backward(gr, gi):
        g = np.concatenate([gr, gi], axis=-1).reshape(-1, 2 * p)
        gx = gw = None
        if a.requires_grad:
            gx = (g @ wb.T).reshape(*lead, 2 * k)
        if w.requires_grad:
            gw = x.reshape(-1, 2 * k).T @ g
        return (None if gx is None else gx[..., :k], None if gx is None else gx[..., k:],
                None if gw is None else gw[:k, :p] + gw[k:, p:],
                None if gw is None else gw[:k, p:] - gw[k:, :p])

    return complex_result(y[..., :p], y[..., p:], (a.re, a.im, w.re, w.im), backward)


def _real_times_complex(a: Tensor, b: ComplexTensor) -> ComplexTensor:
    p = b.shape[-1]
    v = np.concatenate([b.re.data, b.im.data], axis=-1)
    x = a.data
    y = x @ v

    def backward(gr, gi):
        g = np.concatenate([gr, gi], axis=-1)
        ga = gv = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(v, -1, -2), x.shape)
        if b.requires_grad:
            gv = _unbroadcast(np.swapaxes(x, -1, -2) @ g, v.shape)
        return (ga, None if gv is None else gv[..., :p], None if gv is None else gv[..., p:])

    return complex_result(y[..., :p], y[..., p:], (a, b.re, b.im), backward)


def real_inner_scores(q: ComplexTensor, k: ComplexTensor) -> Tensor:
    """All-pairs ``Re<q_i, k_j>`` (convention-free) as one fused matmul, ``(..., N, M)``."""
    d = q.shape[-1]
    qc = np.concatenate([q.re.data, q.im.data], axis=-1)
    kc = np.concatenate([k.re.data, k.im.data], axis=-1)

    def backward(g):
        gq = g @ kc if q.requires_grad else None
        gk = np.swapaxes(g, -1, -2) @ qc if k.requires_grad else None
        return (None if gq is None else _unbroadcast(gq[..., :d], q.shape),
                None if gq is None else _unbroadcast(gq[..., d:], q.shape),
                None if gk is None else _unbroadcast(gk[..., :d], k.shape),
                None if gk is None else _unbroadcast(gk[..., d:], k.shape))

    return _result(qc @ np.swapaxes(kc, -1, -2), (q.re, q.im, k.re, k.im), backward)


def complex_concat(parts: Sequence[ComplexTensor], axis: int = -1) -> ComplexTensor:
    return ComplexTensor(concat([p.re for p in parts], axis), concat([p.im for p in parts], axis))


def hermitian_inner(a: ComplexTensor, b: ComplexTensor, convention: str = "first") -> ComplexTensor:
    """Sum over the last axis of ``conj(a) * b`` (or ``a * conj(b)`` with ``convention="second"``)."""
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(f"hermitian_inner length mismatch: {a.shape[-1]} vs {b.shape[-1]}")
    if convention == "first":
        prod = a.conj() * b
    elif convention == "second":
        prod = a * b.conj()
    else:
        raise ValueError(f"unknown convention {convention!r}")
    return prod.sum(axis=-1)


def hermitian_scores(q: ComplexTensor, k: ComplexTensor) -> tuple[Tensor, Tensor]:
    """All-pairs ``<q_i, k_j>`` with the first argument conjugated, as (re, im) matrices.

    ``q`` is ``(..., N, d)`` and ``k`` is ``(..., M, d)``; results are ``(..., N, M)``.
    """
    kre, kim = k.re.swapaxes(-1, -2), k.im.swapaxes(-1, -2)
    re = q.re @ kre + q.im @ kim
    im = q.re @ kim - q.im @ kre
    return re, im


def l2_normalize_rows(x: ComplexTensor, eps: float = 1e-12) -> ComplexTensor:
    """Divide each row (last axis) by ``sqrt(sum |x|^2 + eps)``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    norm = (x.abs2().sum(axis=-1, keepdims=True) + eps).sqrt()
    return x / norm


def fft2(x) -> ComplexTensor:
    """Unnormalised 2-D DFT of a square real matrix (data only, no gradient)."""
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != x.shape[1] or x.shape[0] < 1:
        raise ValueError(f"fft2 expects a non-empty square matrix, got shape {x.shape}")
    return ComplexTensor.from_numpy(np.fft.fft2(x))


# -----------------------------------------------------------------------------
# finite-difference oracle
# -----------------------------------------------------------------------------


def numerical_gradient(loss_fn: Callable[[], Tensor], t: Tensor, h_rel: float = 1e-5,
                       coords: Iterable[tuple] | None = None) -> dict[tuple, float]:
    """Central differences of ``loss_fn()`` w.r.t. selected entries of ``t`` (mutated in place, then restored)."""
    out = {}
    coords = list(np.ndindex(t.shape)) if coords is None else list(coords)
    with no_grad():
        for c in coords:
            x0 = t.data[c]
            h = h_rel * max(1.0, abs(float(x0)))
            t.data[c] = x0 + h
            fp = float(loss_fn().data)
            t.data[c] = x0 - h
            fm = float(loss_fn().data)
            t.data[c] = x0
            out[c] = (fp - fm) / (2 * h)
    return out


def gradient_check(loss_fn: Callable[[], Tensor], params: dict[str, Tensor], h_rel: float = 1e-5,
                   max_coords: int | None = None, rng: np.random.Generator | None = None) -> dict[str, float]:
    """Relative error between autodiff and central-difference gradients, per parameter.

    The error for a parameter is ``max|analytic - numeric| / max(max|numeric|, 1e-10)``
    over the checked entries. With ``max_coords`` a random subset of entries is checked.
    """
    for p in params.values():
        p.grad = None
    loss_fn().backward()
    analytic = {k: (np.zeros(p.shape) if p.grad is None else p.grad.copy()) for k, p in params.items()}
    rng = rng or np.random.default_rng(0)
    errors = {}
    for name, p in params.items():
        coords = list(np.ndindex(p.shape))
        if max_coords is not None and len(coords) > max_coords:
            pick = rng.choice(len(coords), size=max_coords, replace=False)
            coords = [coords[i] for i in sorted(pick)]
        num = numerical_gradient(loss_fn, p, h_rel, coords)
        a = np.array([analytic[name][c] for c in coords])
        n = np.array([num[c] for c in coords])
        errors[name] = float(np.max(np.abs(a - n)) / max(float(np.max(np.abs(n))), 1e-10))
    return errors


# -----------------------------------------------------------------------------
# fused kernels with hand-written backward (hot paths of the complex stack)
# -----------------------------------------------------------------------------


def complex_rmsnorm_fused(x: ComplexTensor, gain: Tensor, eps: float) -> ComplexTensor:
    """``gain * x / sqrt(mean |x|^2 + eps)`` over the last axis."""
    xr, xi, w = x.re.data, x.im.data, gain.data
    d = xr.shape[-1]
    r = 1.0 / np.sqrt((xr * xr + xi * xi).mean(axis=-1, keepdims=True) + eps)
    yr, yi = xr * r, xi * r

    def backward(gr, gi):
        # d y / d x for y = x * r(x), r = (mean|x|^2 + eps)^(-1/2)
        hr, hi = gr * w, gi * w
        dot = (hr * yr + hi * yi).sum(axis=-1, keepdims=True) / d
        gxr = r * (hr - yr * dot)
        gxi = r * (hi - yi * dot)
        gw = _unbroadcast(gr * yr + gi * yi, w.shape) if gain.requires_grad else None
        return gxr, gxi, gw

    return complex_result(yr * w, yi * w, (x.re, x.im, gain), backward)


def modrelu_fused(z: ComplexTensor, beta: Tensor, eps: float) -> ComplexTensor:
    """``z * max(|z| + beta, 0) / |z|`` with ``|z| = sqrt(re^2 + im^2 + eps)``."""
    zr, zi, b = z.re.data, z.im.data, beta.data
    mag = np.sqrt(zr * zr + zi * zi + eps)
    act = mag + b
    on = act > 0
    s = np.where(on, act, 0) / mag

    def backward(gr, gi):
        proj = gr * zr + gi * zi
        t = proj * (on - s) / (mag * mag)
        gb = _unbroadcast(proj * on / mag, b.shape) if beta.requires_grad else None
        return gr * s + t * zr, gi * s + t * zi, gb

    return complex_result(zr * s, zi * s, (z.re, z.im, beta), backward)


def normalized_gate_attention(q: ComplexTensor, k: ComplexTensor, v: ComplexTensor, bias: Tensor,
                              scale: float, f, df=None, eps: float = 1e-12,
                              sigmoid: bool = False) -> tuple[ComplexTensor, np.ndarray]:
    """Elementwise-gated attention on unit-normalised complex rows.

    ``alpha = f(scale * Re<q_i/|q_i|, k_j/|k_j|> + bias)`` and ``u = alpha @ v``.
    Inputs are ``(..., N, d)``; ``bias`` broadcasts against ``(..., N, N)``.
    With ``sigmoid=True`` ``f``/``df`` are ignored. Returns ``(u, alpha data)``.
    """
    d = q.shape[-1]
    qc = np.concatenate([q.re.data, q.im.data], axis=-1)
    kc = np.concatenate([k.re.data, k.im.data], axis=-1)
    vc = np.concatenate([v.re.data, v.im.data], axis=-1)
    nq = np.sqrt((qc * qc).sum(axis=-1, keepdims=True) + eps)
    nk = np.sqrt((kc * kc).sum(axis=-1, keepdims=True) + eps)
    qn, kn = qc / nq, kc / nk
    z = (qn @ np.swapaxes(kn, -1, -2)) * scale + bias.data
    alpha = _sigmoid(z) if sigmoid else np.asarray(f(z), dtype=z.dtype)
    u = alpha @ vc

    def backward(gr, gi):
        g = np.concatenate([gr, gi], axis=-1)
        gv = _unbroadcast(np.swapaxes(alpha, -1, -2) @ g, vc.shape)
        ga = g @ np.swapaxes(vc, -1, -2)
        gz = ga * (alpha * (1.0 - alpha) if sigmoid else df(z))
        gb = _unbroadcast(gz, bias.shape) if bias.requires_grad else None
        gs = gz * scale
        gqn = gs @ kn
        gkn = np.swapaxes(gs, -1, -2) @ qn
        gq = (gqn - qn * (qn * gqn).sum(axis=-1, keepdims=True)) / nq
        gk = (gkn - kn * (kn * gkn).sum(axis=-1, keepdims=True)) / nk
        gq, gk = _unbroadcast(gq, qc.shape), _unbroadcast(gk, kc.shape)
        return (gq[..., :d], gq[..., d:], gk[..., :d], gk[..., d:], gv[..., :d], gv[..., d:], gb)

    out = complex_result(u[..., :d], u[..., d:], (q.re, q.im, k.re, k.im, v.re, v.im, bias), backward)
    return out, alpha

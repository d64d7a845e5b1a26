"""Minimal reverse-mode autodiff over numpy arrays.

Supports exactly the primitives the training losses need: affine ops, matmul,
tanh/softplus, norms, reductions, sqrt/log/exp, matrix inverse, Cholesky
factors, extreme symmetric eigenvalues and the smallest positive singular
value. All ops broadcast over leading batch dimensions so a whole minibatch
is one graph. Anything outside this set raises UnsupportedPrimitiveError at
graph-construction time.
"""
from __future__ import annotations

from typing import Iterable, List, Sequence, Tuple

import numpy as np

from .errors import UnsupportedPrimitiveError

_EIG_TIE_JITTER = 1e-12
_SAFE_NORM_FLOOR = 1e-300


class Tensor:
    """A node in the computation graph. Wraps an ndarray value."""

    __slots__ = ("value", "requires_grad", "_parents", "_vjps", "grad")

    # keep numpy from hijacking mixed ndarray/Tensor arithmetic; reflected
    # operators below handle those cases, anything else fails loudly
    __array_ufunc__ = None

    def __init__(self, value, requires_grad: bool = False, parents=(), vjps=()):
        self.value = np.asarray(value, dtype=float)
        self.requires_grad = bool(requires_grad)
        self._parents: Tuple[Tensor, ...] = tuple(parents)
        self._vjps = tuple(vjps)
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def item(self) -> float:
        return float(self.value)

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return take(self, idx)

    # anything else is outside the supported primitive set
    def _unsupported(self, name):
        raise UnsupportedPrimitiveError(
            f"'{name}' is not a supported differentiable primitive"
        )

    def __mod__(self, other):
        self._unsupported("mod")

    def __floordiv__(self, other):
        self._unsupported("floordiv")

    def __abs__(self):
        return absolute(self)


def constant(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def parameter(value) -> Tensor:
    return Tensor(np.array(value, dtype=float), requires_grad=True)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tracked(*tensors: Tensor) -> bool:
    return any(t.requires_grad or t._parents for t in tensors)


def _make(value, parents, vjps) -> Tensor:
    if _tracked(*parents):
        return Tensor(value, parents=parents, vjps=vjps)
    return Tensor(value)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return _make(
        a.value + b.value,
        (a, b),
        (lambda g: _unbroadcast(g, a.value.shape), lambda g: _unbroadcast(g, b.value.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return _make(
        a.value - b.value,
        (a, b),
        (lambda g: _unbroadcast(g, a.value.shape), lambda g: _unbroadcast(-g, b.value.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return _make(
        a.value * b.value,
        (a, b),
        (
            lambda g: _unbroadcast(g * b.value, a.value.shape),
            lambda g: _unbroadcast(g * a.value, b.value.shape),
        ),
    )


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return _make(
        a.value / b.value,
        (a, b),
        (
            lambda g: _unbroadcast(g / b.value, a.value.shape),
            lambda g: _unbroadcast(-g * a.value / (b.value**2), b.value.shape),
        ),
    )


def power(a, p) -> Tensor:
    if isinstance(p, Tensor):
        raise UnsupportedPrimitiveError("only constant exponents are supported")
    a = _wrap(a)
    p = float(p)
    return _make(
        a.value**p,
        (a,),
        (lambda g: g * p * a.value ** (p - 1.0),),
    )


def tanh(a) -> Tensor:
    a = _wrap(a)
    t = np.tanh(a.value)
    return _make(t, (a,), (lambda g: g * (1.0 - t**2),))


def softplus(a) -> Tensor:
    a = _wrap(a)
    v = np.logaddexp(0.0, a.value)
    sig = 1.0 / (1.0 + np.exp(-a.value))
    return _make(v, (a,), (lambda g: g * sig,))


def exp(a) -> Tensor:
    a = _wrap(a)
    v = np.exp(a.value)
    return _make(v, (a,), (lambda g: g * v,))


def log(a) -> Tensor:
    a = _wrap(a)
    return _make(np.log(a.value), (a,), (lambda g: g / a.value,))


def sqrt(a) -> Tensor:
    a = _wrap(a)
    v = np.sqrt(a.value)
    return _make(v, (a,), (lambda g: g * 0.5 / np.maximum(v, _SAFE_NORM_FLOOR),))


def absolute(a) -> Tensor:
    a = _wrap(a)
    return _make(np.abs(a.value), (a,), (lambda g: g * np.sign(a.value),))


# -- shape / indexing --------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    return _make(
        a.value.reshape(shape), (a,), (lambda g: g.reshape(a.value.shape),)
    )


def take(a, idx) -> Tensor:
    a = _wrap(a)

    def vjp(g):
        out = np.zeros_like(a.value)
        np.add.at(out, idx, g)
        return out

    return _make(a.value[idx], (a,), (vjp,))


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    parts = [_wrap(p) for p in parts]
    sizes = [p.value.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        def vjp(g):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            return g[tuple(sl)]

        return vjp

    value = np.concatenate([p.value for p in parts], axis=axis)
    return _make(value, tuple(parts), tuple(make_vjp(i) for i in range(len(parts))))


def stack(parts: Sequence, axis: int = 0) -> Tensor:
    parts = [_wrap(p) for p in parts]

    def make_vjp(i):
        return lambda g: np.take(g, i, axis=axis)

    value = np.stack([p.value for p in parts], axis=axis)
    return _make(value, tuple(parts), tuple(make_vjp(i) for i in range(len(parts))))


def transpose_last(a) -> Tensor:
    a = _wrap(a)
    return _make(
        np.swapaxes(a.value, -1, -2), (a,), (lambda g: np.swapaxes(g, -1, -2),)
    )


# -- contractions ------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.value.ndim < 2 or b.value.ndim < 2:
        raise UnsupportedPrimitiveError("matmul requires ndim >= 2; use matvec/dot")
    value = a.value @ b.value

    def vjp_a(g):
        return _unbroadcast(g @ np.swapaxes(b.value, -1, -2), a.value.shape)

    def vjp_b(g):
        return _unbroadcast(np.swapaxes(a.value, -1, -2) @ g, b.value.shape)

    return _make(value, (a, b), (vjp_a, vjp_b))


def matvec(a, x) -> Tensor:
    """(..., m, n) @ (..., n) -> (..., m)."""
    a, x = _wrap(a), _wrap(x)
    value = np.einsum("...ij,...j->...i", a.value, x.value)

    def vjp_a(g):
        return _unbroadcast(g[..., :, None] * x.value[..., None, :], a.value.shape)

    def vjp_x(g):
        return _unbroadcast(
            np.einsum("...ij,...i->...j", a.value, g), x.value.shape
        )

    return _make(value, (a, x), (vjp_a, vjp_x))


def dot(a, b) -> Tensor:
    """(..., n) . (..., n) -> (...)."""
    a, b = _wrap(a), _wrap(b)
    value = np.einsum("...i,...i->...", a.value, b.value)

    def vjp_a(g):
        return _unbroadcast(g[..., None] * b.value, a.value.shape)

    def vjp_b(g):
        return _unbroadcast(g[..., None] * a.value, b.value.shape)

    return _make(value, (a, b), (vjp_a, vjp_b))


# -- reductions ----------------------------------------------------------------

def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    value = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, a.value.shape).copy()
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, a.value.shape).copy()

    return _make(value, (a,), (vjp,))


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    count = a.value.size if axis is None else a.value.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def amax(a, axis=None) -> Tensor:
    """Max reduction; the subgradient flows to the first attaining entry."""
    a = _wrap(a)
    if axis is None:
        flat_idx = int(np.argmax(a.value))
        idx = np.unravel_index(flat_idx, a.value.shape)
        value = a.value[idx]

        def vjp(g):
            out = np.zeros_like(a.value)
            out[idx] = g
            return out

        return _make(value, (a,), (vjp,))
    arg = np.argmax(a.value, axis=axis)
    value = np.take_along_axis(a.value, np.expand_dims(arg, axis), axis=axis).squeeze(axis)

    def vjp_axis(g):
        out = np.zeros_like(a.value)
        np.put_along_axis(
            out, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis
        )
        return out

    return _make(value, (a,), (vjp_axis,))


def norm2(a, axis: int = -1) -> Tensor:
    """Euclidean norm along `axis`, with a zero subgradient at the origin."""
    a = _wrap(a)
    value = np.linalg.norm(a.value, axis=axis)

    def vjp(g):
        denom = np.maximum(value, _SAFE_NORM_FLOOR)
        return np.expand_dims(g / denom, axis) * a.value

    return _make(value, (a,), (vjp,))


# -- matrix factorizations ------------------------------------------------------

def inverse(a) -> Tensor:
    a = _wrap(a)
    inv = np.linalg.inv(a.value)
    inv_t = np.swapaxes(inv, -1, -2)

    def vjp(g):
        return -inv_t @ g @ inv_t

    return _make(inv, (a,), (vjp,))


def cholesky_lower(a) -> Tensor:
    """Lower Cholesky factor C with a = C C^T (batched)."""
    a = _wrap(a)
    c = np.linalg.cholesky(a.value)
    c_t = np.swapaxes(c, -1, -2)

    def vjp(g):
        # standard Cholesky reverse rule (Murray 2016), for symmetric upstream
        phi = np.matmul(c_t, g)
        lower = np.tril(phi, -1)
        diag = np.zeros_like(phi)
        i = np.arange(phi.shape[-1])
        diag[..., i, i] = 0.5 * phi[..., i, i]
        p = lower + diag
        c_inv = np.linalg.inv(c)
        c_inv_t = np.swapaxes(c_inv, -1, -2)
        return 0.5 * (c_inv_t @ (p + np.swapaxes(p, -1, -2)) @ c_inv)

    return _make(c, (a,), (vjp,))


def _sym_eig_extreme(a, which: str) -> Tensor:
    a = _wrap(a)
    mats = 0.5 * (a.value + np.swapaxes(a.value, -1, -2))
    w, v = np.linalg.eigh(mats)
    pick = -1 if which == "max" else 0
    # tie breaking: nudge the matrix by a deterministic diagonal jitter and redo
    if mats.shape[-1] > 1:
        gap = np.abs(w[..., pick] - w[..., pick + (1 if which == "min" else -1)])
        if np.any(gap < _EIG_TIE_JITTER):
            n = mats.shape[-1]
            jitter = _EIG_TIE_JITTER * np.diag(np.arange(1, n + 1, dtype=float))
            w, v = np.linalg.eigh(mats + jitter)
    value = w[..., pick]
    vec = v[..., :, pick]

    def vjp(g):
        outer = vec[..., :, None] * vec[..., None, :]
        return g[..., None, None] * outer

    return _make(value, (a,), (vjp,))


def eig_max_sym(a) -> Tensor:
    """Largest eigenvalue of symmetric (..., n, n); gradient is the top eigenvector outer product."""
    return _sym_eig_extreme(a, "max")


def eig_min_sym(a) -> Tensor:
    """Smallest eigenvalue of symmetric (..., n, n)."""
    return _sym_eig_extreme(a, "min")


def min_positive_sv(a, zero_rtol: float = 1e-9) -> Tensor:
    """Smallest positive singular value of (..., m, n); gradient is u v^T for that pair."""
    a = _wrap(a)
    u, s, vt = np.linalg.svd(a.value, full_matrices=False)
    smax = s[..., :1]
    positive = s > zero_rtol * smax
    # index of the last positive singular value (ascending order is reversed in svd output)
    idx = positive.shape[-1] - 1 - np.argmax(positive[..., ::-1], axis=-1)
    value = np.take_along_axis(s, idx[..., None], axis=-1)[..., 0]
    u_k = np.take_along_axis(u, idx[..., None, None], axis=-1)[..., 0]
    v_k = np.take_along_axis(vt, idx[..., None, None], axis=-2)[..., 0, :]

    def vjp(g):
        return g[..., None, None] * (u_k[..., :, None] * v_k[..., None, :])

    return _make(value, (a,), (vjp,))


# -- graph execution ---------------------------------------------------------------

def _topo_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Reverse-mode gradient of a scalar loss; accumulates into `.grad` of graph leaves."""
    if loss.value.ndim != 0:
        raise UnsupportedPrimitiveError("backward requires a scalar loss")
    grads = {id(loss): np.ones(())}
    order = _topo_order(loss)
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g if node.grad is None else node.grad + g
        for parent, vjp in zip(node._parents, node._vjps):
            if not (parent.requires_grad or parent._parents):
                continue
            contrib = vjp(g)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + contrib
            else:
                grads[key] = contrib


def param_gradients(loss: Tensor, params: Iterable[Tensor]) -> List[np.ndarray]:
    """Gradients of a scalar loss with respect to each parameter tensor, in order."""
    params = list(params)
    for p in params:
        p.grad = None
    backward(loss)
    return [
        p.grad if p.grad is not None else np.zeros_like(p.value) for p in params
    ]

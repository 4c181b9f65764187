"""Small reverse-mode autodiff over numpy arrays.

``Tensor`` wraps a float64 array. Every operation records its parents and a
closure that pushes the output gradient back to them; :meth:`Tensor.backward`
runs those closures in reverse topological order. Broadcasting follows numpy
and is undone in the backward pass by summing over broadcast axes.
"""
from __future__ import annotations

import contextlib
import logging
import math
from typing import Callable, Dict, Iterable, List, Optional

import numpy as np

from .errors import ShapeError

logger = logging.getLogger(__name__)

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Forward passes inside the block build no graph."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._prev = ()
        self._backward = None
        self.name = name

    # -- graph plumbing ---------------------------------------------------

    @staticmethod
    def _make(data, parents, backward):
        out = Tensor(data)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._prev = parents
            out._backward = backward
        return out

    def _accum(self, g):
        if not self.requires_grad:
            return
        # Gradients are never updated in place, so an incoming array may be
        # stored as is even when it aliases another node's gradient.
        g = np.asarray(g, dtype=np.float64)
        if self.grad is None:
            self.grad = g if g.shape == self.data.shape else np.broadcast_to(g, self.data.shape)
        else:
            self.grad = self.grad + g

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed gradient needs a scalar")
            grad = np.ones_like(self.data)
        topo, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._prev:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._accum(grad)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def zero_grad(self):
        self.grad = None

    # -- conveniences -------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def has_nonfinite(self):
        return not np.all(np.isfinite(self.data))

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, pow_(other, -1.0))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return swap_last(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name=None):
    return Tensor(data, requires_grad=True, name=name)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as e:
        raise ShapeError(f"add: {a.shape} vs {b.shape}") from e

    def backward(g):
        a._accum(_unbroadcast(g, a.shape))
        b._accum(_unbroadcast(g, b.shape))

    return Tensor._make(out, (a, b), backward)


def neg(a):
    def backward(g):
        a._accum(-g)

    return Tensor._make(-a.data, (a,), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as e:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}") from e

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))

    return Tensor._make(out, (a, b), backward)


def pow_(a, p):
    out = a.data ** p

    def backward(g):
        a._accum(g * p * a.data ** (p - 1))

    return Tensor._make(out, (a,), backward)


def square(a):
    def backward(g):
        a._accum(2.0 * g * a.data)

    return Tensor._make(a.data * a.data, (a,), backward)


def exp(a):
    out = np.exp(a.data)

    def backward(g):
        a._accum(g * out)

    return Tensor._make(out, (a,), backward)


def log(a):
    def backward(g):
        a._accum(g / a.data)

    return Tensor._make(np.log(a.data), (a,), backward)


def tanh(a):
    out = np.tanh(a.data)

    def backward(g):
        a._accum(g * (1.0 - out * out))

    return Tensor._make(out, (a,), backward)


def leaky_relu(a, slope=0.01):
    pos = a.data > 0
    out = np.where(pos, a.data, slope * a.data)

    def backward(g):
        a._accum(np.where(pos, g, slope * g))

    return Tensor._make(out, (a,), backward)


def identity(a):
    return a


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum_(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accum(np.broadcast_to(g, a.shape))

    return Tensor._make(out, (a,), backward)


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis, keepdims), 1.0 / float(n))


def reshape(a, shape):
    def backward(g):
        a._accum(g.reshape(a.shape))

    return Tensor._make(a.data.reshape(shape), (a,), backward)


def transpose(a, axes):
    inv = np.argsort(axes)

    def backward(g):
        a._accum(g.transpose(inv))

    return Tensor._make(a.data.transpose(axes), (a,), backward)


def swap_last(a):
    def backward(g):
        a._accum(np.swapaxes(g, -1, -2))

    return Tensor._make(np.swapaxes(a.data, -1, -2), (a,), backward)


def getitem(a, idx):
    out = a.data[idx]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        a._accum(full)

    return Tensor._make(out, (a,), backward)


def concat(tensors: List[Tensor], axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {[t.shape for t in tensors]}") from e
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                t._accum(np.take(g, np.arange(lo, hi), axis=axis))

    return Tensor._make(out, tuple(tensors), backward)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    expanded = []
    for t in tensors:
        shape = list(t.shape)
        shape.insert(axis if axis >= 0 else len(shape) + 1 + axis, 1)
        expanded.append(reshape(t, tuple(shape)))
    return concat(expanded, axis=axis)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as e:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}") from e

    def backward(g):
        if a.requires_grad:
            if a.ndim == 2 and g.ndim > 2:
                # shared left operand: contract batch axes directly
                bf = np.broadcast_to(b.data, g.shape[:-2] + b.shape[-2:])
                ax = list(range(g.ndim - 2)) + [g.ndim - 1]
                ga = np.tensordot(g, bf, axes=(ax, ax))
            else:
                ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
            a._accum(ga)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                k = a.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
            b._accum(gb)

    return Tensor._make(out, (a, b), backward)


def softmax(a, axis=-1):
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        a._accum(out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return Tensor._make(out, (a,), backward)


def layer_norm(a, eps=1e-5):
    """Normalise over the last axis to zero mean and unit variance."""
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = xc * inv

    def backward(g):
        n = a.shape[-1]
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * out).mean(axis=-1, keepdims=True)
        a._accum(inv * (g - gm - out * gx))

    return Tensor._make(out, (a,), backward)


# ---------------------------------------------------------------------------
# 2D discrete Fourier transform on complex pairs


class ComplexTensor:
    """A complex array carried as separate real and imaginary tensors."""

    def __init__(self, re: Tensor, im: Optional[Tensor] = None):
        self.re = re
        self.im = im if im is not None else Tensor(np.zeros_like(re.data))

    @property
    def shape(self):
        return self.re.shape

    def numpy(self):
        return self.re.data + 1j * self.im.data


_DFT_CACHE: Dict[int, tuple] = {}


def dft_matrices(n):
    """Cosine and sine parts of the n-point DFT matrix ``F = C - iS``."""
    if n not in _DFT_CACHE:
        k = np.arange(n)
        ang = 2.0 * np.pi * np.outer(k, k) / n
        C, S = np.cos(ang), np.sin(ang)
        C.setflags(write=False)
        S.setflags(write=False)
        _DFT_CACHE[n] = (Tensor(C), Tensor(S))
    return _DFT_CACHE[n]


def _complex_sandwich(x: ComplexTensor, sign):
    """``F_rows x F_cols`` with ``F = C + sign*iS`` over the last two axes."""
    if x.re.ndim < 2:
        raise ShapeError("fft2 needs at least a 2-D input")
    Cr, Sr = dft_matrices(x.shape[-2])
    Cc, Sc = dft_matrices(x.shape[-1])
    xr, xi = x.re, x.im
    if sign < 0:
        ar = Cr @ xr + Sr @ xi
        ai = Cr @ xi - Sr @ xr
        yr = ar @ Cc + ai @ Sc
        yi = ai @ Cc - ar @ Sc
    else:
        ar = Cr @ xr - Sr @ xi
        ai = Cr @ xi + Sr @ xr
        yr = ar @ Cc - ai @ Sc
        yi = ai @ Cc + ar @ Sc
    return yr, yi


def fft2(x) -> ComplexTensor:
    """Direct (matrix) 2D DFT over the last two axes; any sizes."""
    if not isinstance(x, ComplexTensor):
        x = as_tensor(x)
        Cr, Sr = dft_matrices(x.shape[-2])
        Cc, Sc = dft_matrices(x.shape[-1])
        # real input: skip the zero imaginary half
        ar, ai = Cr @ x, neg(Sr @ x)
        return ComplexTensor(ar @ Cc + ai @ Sc, ai @ Cc - ar @ Sc)
    return ComplexTensor(*_complex_sandwich(x, -1))


def ifft2(x: ComplexTensor) -> ComplexTensor:
    yr, yi = _complex_sandwich(x, +1)
    scale = 1.0 / (x.shape[-2] * x.shape[-1])
    return ComplexTensor(yr * scale, yi * scale)


def ifft2_real(x: ComplexTensor) -> Tensor:
    """Real part of the inverse transform, skipping the imaginary output."""
    Cr, Sr = dft_matrices(x.shape[-2])
    Cc, Sc = dft_matrices(x.shape[-1])
    ar = Cr @ x.re - Sr @ x.im
    ai = Cr @ x.im + Sr @ x.re
    return (ar @ Cc - ai @ Sc) * (1.0 / (x.shape[-2] * x.shape[-1]))


def dft2(x: np.ndarray) -> np.ndarray:
    """numpy convenience: complex 2D DFT of an array via :func:`fft2`."""
    with no_grad():
        return fft2(Tensor(x)).numpy()


def idft2(y: np.ndarray) -> np.ndarray:
    with no_grad():
        return ifft2(ComplexTensor(Tensor(y.real), Tensor(y.imag))).numpy()


# ---------------------------------------------------------------------------
# optimiser


class Adam:
    """Adaptive-moment optimiser with bias correction.

    A step whose gradients contain non-finite values is skipped entirely and
    logged; the step counter does not advance.
    """

    def __init__(self, params: Dict[str, Tensor], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0
        self.skipped = 0

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self) -> bool:
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data))
                 for k, p in self.params.items()}
        if not all(np.all(np.isfinite(g)) for g in grads.values()):
            self.skipped += 1
            logger.warning("non-finite gradient at optimiser step %d; step skipped", self.t + 1)
            return False
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            g = grads[k]
            m = self.m[k]
            v = self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return True


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(fn: Callable[[], Tensor], params: Iterable[Tensor], step=1e-4,
               max_coords: Optional[int] = None, rng=None) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``fn`` recomputes the scalar output from the current values of
    ``params``. With ``max_coords`` only that many randomly chosen
    coordinates per parameter are probed.
    """
    params = list(params)
    for p in params:
        p.grad = None
    out = fn()
    out.backward()
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]
    rng = rng if rng is not None else np.random.default_rng(0)
    worst = 0.0
    with no_grad():
        for p, ga in zip(params, analytic):
            flat = p.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = rng.choice(flat.size, size=max_coords, replace=False)
            for i in coords:
                old = flat[i]
                flat[i] = old + step
                fp = float(fn().data)
                flat[i] = old - step
                fm = float(fn().data)
                flat[i] = old
                num = (fp - fm) / (2.0 * step)
                a = float(ga.reshape(-1)[i])
                err = abs(a - num) / max(abs(a), abs(num), 1e-8)
                if abs(a - num) < 1e-10:
                    err = 0.0
                worst = max(worst, err)
    return worst

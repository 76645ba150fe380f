"""Dense tensors with hand-written backward passes.

Every op builds its output eagerly and records a closure that pushes the
output gradient back to its inputs.  ``Tensor.backward`` walks the recorded
graph in reverse topological order.  There is no general broadcasting engine;
elementwise ops support the numpy broadcasting the model actually needs and
reduce gradients back to the input shape.

Forward values are float32.  Inside :func:`grad_check` (or under
``precision(np.float64)``) new tensors are created in float64 so finite
differences stay meaningful.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import _kernels


class DimensionError(ValueError):
    """Operand shapes do not agree."""


class ConfigurationError(ValueError):
    """An op or component was configured with values it cannot honour."""


_DTYPE = [np.float32]


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for newly created tensors."""
    _DTYPE.append(np.dtype(dtype).type)
    try:
        yield
    finally:
        _DTYPE.pop()


def default_dtype():
    return _DTYPE[-1]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        self.data = np.array(data, dtype=dtype or default_dtype())
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.name = name

    @classmethod
    def _result(cls, data, parents, backward):
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = any(p.requires_grad for p in parents)
        out.grad = None
        out._parents = tuple(parents) if out.requires_grad else ()
        out._backward = backward if out.requires_grad else None
        out.name = None
        return out

    # ------------------------------------------------------------ plumbing
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def _accumulate(self, g):
        if g.shape != self.data.shape:
            g = _unbroadcast(g, self.data.shape)
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad += g

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def backward(self, grad=None):
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            grad = np.ones_like(self.data)
        order = _topological(self)
        self._accumulate(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                # interior nodes are single-use; drop references so memory is released
                node._backward = None
                node._parents = ()
                node.grad = None if node is not self else node.grad

    # ------------------------------------------------------------ operators
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_lift(other, self), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _topological(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _lift(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def parameter(data, name=None):
    return Tensor(data, requires_grad=True, name=name)


# ------------------------------------------------------------------ elementwise


def add(a, b):
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return Tensor._result(a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(-g)

    return Tensor._result(a.data - b.data, (a, b), backward)


def mul(a, b):
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    return Tensor._result(a.data * b.data, (a, b), backward)


def div(a, b):
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    out = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g / b.data)
        if b.requires_grad:
            b._accumulate(-g * out / b.data)

    return Tensor._result(out, (a, b), backward)


def exp(x):
    out = np.exp(x.data)
    return Tensor._result(out, (x,), lambda g: x._accumulate(g * out))


def log(x):
    return Tensor._result(np.log(x.data), (x,), lambda g: x._accumulate(g / x.data))


def sqrt(x):
    out = np.sqrt(x.data)
    return Tensor._result(out, (x,), lambda g: x._accumulate(g * 0.5 / out))


def sigmoid(x):
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return Tensor._result(out, (x,), lambda g: x._accumulate(g * out * (1.0 - out)))


def tanh(x):
    out = np.tanh(x.data)
    return Tensor._result(out, (x,), lambda g: x._accumulate(g * (1.0 - out * out)))


def relu6(x):
    out = np.clip(x.data, 0.0, 6.0)
    mask = (x.data > 0.0) & (x.data < 6.0)
    return Tensor._result(out, (x,), lambda g: x._accumulate(g * mask))


def softplus(x):
    out = np.logaddexp(0.0, x.data).astype(x.dtype, copy=False)
    return Tensor._result(out, (x,), lambda g: x._accumulate(g * 0.5 * (1.0 + np.tanh(0.5 * x.data))))


ELEMENTWISE = {"sigmoid": sigmoid, "tanh": tanh, "relu6": relu6, "softplus": softplus}


def elementwise(x, fn):
    try:
        return ELEMENTWISE[fn](x)
    except KeyError:
        raise ConfigurationError(f"unknown elementwise function {fn!r}") from None


# ------------------------------------------------------------------ shape ops


def reshape(x, shape):
    old = x.shape
    return Tensor._result(x.data.reshape(shape), (x,), lambda g: x._accumulate(g.reshape(old)))


def transpose(x, axes):
    inv = np.argsort(axes)
    return Tensor._result(x.data.transpose(axes), (x,), lambda g: x._accumulate(g.transpose(inv)))


def getitem(x, idx):
    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        x._accumulate(full)

    return Tensor._result(x.data[idx], (x,), backward)


def concat(tensors: Sequence[Tensor], axis=0):
    tensors = [_lift(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, cuts, axis=axis)):
            if t.requires_grad:
                t._accumulate(piece)

    return Tensor._result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def stack(tensors: Sequence[Tensor], axis=0):
    tensors = list(tensors)

    def backward(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t._accumulate(np.take(g, i, axis=axis))

    return Tensor._result(np.stack([t.data for t in tensors], axis=axis), tensors, backward)


def sum_(x, axis=None, keepdims=False):
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g, shape))

    return Tensor._result(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward)


def mean(x, axis=None, keepdims=False):
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return sum_(x, axis, keepdims) * (1.0 / count)


# ------------------------------------------------------------------ linear algebra


def matmul(a, b):
    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            b._accumulate(np.swapaxes(a.data, -1, -2) @ g)

    return Tensor._result(a.data @ b.data, (a, b), backward)


def linear(x, W, b=None):
    """``y = x W^T + b`` over the last axis of ``x``."""
    if x.shape[-1] != W.shape[1]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {W.shape}")
    if b is not None and b.shape != (W.shape[0],):
        raise DimensionError(f"linear: bias {b.shape} does not match weight {W.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ W.data.T
    if b is not None:
        out = out + b.data

    def backward(g):
        g2 = g.reshape(-1, W.shape[0])
        if x.requires_grad:
            x._accumulate((g2 @ W.data).reshape(x.shape))
        if W.requires_grad:
            W._accumulate(g2.T @ x2)
        if b is not None and b.requires_grad:
            b._accumulate(g2.sum(axis=0))

    parents = (x, W) if b is None else (x, W, b)
    return Tensor._result(out.reshape(*lead, W.shape[0]), parents, backward)


def conv2d(x, K, b=None, padding=0, stride=1, groups=1):
    """Cross-correlation of ``x`` (C,H,W or N,C,H,W) with ``K`` (O, C/groups, k, k)."""
    o, cg, k, k2 = K.shape
    if k != k2 or k % 2 == 0:
        raise ConfigurationError(f"conv2d: kernel must be square with odd size, got {K.shape}")
    if padding < 0 or stride < 1:
        raise ConfigurationError(f"conv2d: invalid padding={padding} stride={stride}")
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4:
        raise DimensionError(f"conv2d: expected C×H×W or N×C×H×W input, got {x.shape}")
    c = xd.shape[1]
    if c % groups or o % groups or c // groups != cg:
        raise DimensionError(f"conv2d: input {x.shape} incompatible with kernel {K.shape} (groups={groups})")
    ho = (xd.shape[2] + 2 * padding - k) // stride + 1
    wo = (xd.shape[3] + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ConfigurationError(f"conv2d: empty output for input {x.shape} and kernel {K.shape}")
    out = _kernels.conv2d_forward(xd, K.data, stride, padding, groups)
    if b is not None:
        out = out + b.data[None, :, None, None]
    if single:
        out = out[0]

    def backward(g):
        g4 = g[None] if single else g
        gx, gk = _kernels.conv2d_backward(xd, K.data, g4, stride, padding, groups)
        if x.requires_grad:
            x._accumulate(gx[0] if single else gx)
        if K.requires_grad:
            K._accumulate(gk)
        if b is not None and b.requires_grad:
            b._accumulate(g4.sum(axis=(0, 2, 3)))

    parents = (x, K) if b is None else (x, K, b)
    return Tensor._result(out, parents, backward)


# ------------------------------------------------------------------ normalisers


def softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        x._accumulate(out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return Tensor._result(out, (x,), backward)


def layer_norm(x, gamma, beta, eps=1e-5):
    d = x.shape[-1]
    if d < 2:
        raise ConfigurationError("layer_norm needs at least two features")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).reshape(-1, d).sum(axis=0))
        if beta.requires_grad:
            beta._accumulate(g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
            x._accumulate(gx)

    return Tensor._result(out.astype(x.dtype, copy=False), (x, gamma, beta), backward)


def upsample_nearest(x, factor):
    """Replicate every pixel of a (..., H, W) tensor into a factor×factor block."""
    if factor < 1:
        raise ConfigurationError(f"upsample factor must be >= 1, got {factor}")
    if factor == 1:
        return x
    out = x.data.repeat(factor, axis=-2).repeat(factor, axis=-1)
    h, w = x.shape[-2:]

    def backward(g):
        gs = g.reshape(*g.shape[:-2], h, factor, w, factor).sum(axis=(-3, -1))
        x._accumulate(gs)

    return Tensor._result(out, (x,), backward)


def dropout(x, rate, rng=None, training=True):
    """Inverted dropout; identity when ``rate == 0`` or outside training."""
    if not training or rate <= 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ConfigurationError(f"dropout rate must lie in [0, 1), got {rate}")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return Tensor._result(x.data * keep, (x,), lambda g: x._accumulate(g * keep))


# ------------------------------------------------------------------ gradient check


@dataclass
class GradCheckReport:
    op_name: str
    max_rel_error: float
    per_input_errors: list = field(default_factory=list)
    passed: bool = False
    tol: float = 1e-4
    failure: str | None = None

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        extra = f" ({self.failure})" if self.failure else ""
        return f"{status} {self.op_name}: max_rel_error={self.max_rel_error:.3e} tol={self.tol:g}{extra}"


def rel_error(a, f):
    return np.abs(a - f) / np.maximum(np.maximum(np.abs(a), np.abs(f)), 1e-8)


def grad_check(
    op: Callable[..., Tensor],
    inputs: Sequence,
    tol: float = 1e-4,
    h: float = 1e-4,
    name: str | None = None,
    max_elements: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients of ``op`` with central finite differences.

    The output is reduced to a scalar as ``sum(out * R)`` with a fixed random
    ``R``; a plain sum would make normalising ops (softmax, layer norm) look
    trivially correct.  Inputs are copied to float64.  Only inputs with
    ``requires_grad`` are checked.  ``max_elements`` samples that many entries
    per input instead of sweeping all of them.
    """
    name = name or getattr(op, "__name__", "op")
    rng = np.random.default_rng(seed)
    with precision(np.float64):
        tensors = [
            Tensor(t.data if isinstance(t, Tensor) else t, requires_grad=getattr(t, "requires_grad", True))
            for t in inputs
        ]
        out = op(*tensors)
        weights = rng.standard_normal(out.shape)

        def scalar():
            return float((op(*tensors).data.astype(np.float64) * weights).sum())

        for t in tensors:
            t.zero_grad()
        out = op(*tensors)
        (out * Tensor(weights)).sum().backward()
        analytic = [None if t.grad is None else t.grad.copy() for t in tensors]

        errors = []
        failure = None
        for i, t in enumerate(tensors):
            if not t.requires_grad:
                continue
            a_full = analytic[i] if analytic[i] is not None else np.zeros_like(t.data)
            flat = t.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_elements is not None and flat.size > max_elements:
                idx = np.sort(rng.choice(flat.size, size=max_elements, replace=False))
            worst = 0.0
            for j in idx:
                orig = flat[j]
                flat[j] = orig + h
                fp = scalar()
                flat[j] = orig - h
                fm = scalar()
                flat[j] = orig
                num = (fp - fm) / (2.0 * h)
                ana = float(a_full.reshape(-1)[j])
                if not (math.isfinite(num) and math.isfinite(ana)):
                    failure = failure or f"non-finite gradient at input {i} element {j}"
                    worst = math.inf
                    continue
                err = float(rel_error(ana, num))
                if err > worst:
                    worst = err
                    if err >= tol and failure is None:
                        failure = f"input {i} element {int(j)}: analytic {ana:.6g} vs numeric {num:.6g}"
            errors.append(worst)
    max_err = max(errors) if errors else 0.0
    passed = failure is None and max_err < tol
    return GradCheckReport(name, max_err, errors, passed, tol, None if passed else failure)

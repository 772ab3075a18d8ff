"""Dense float64 tensors with reverse-mode automatic differentiation.

Just enough machinery to train the small convolutional and attention
networks in this package: elementwise arithmetic, matmul, strided 2-D
convolution / transposed convolution, the usual activations, reductions,
embedding lookup, and a straight-through estimator for quantized
bottlenecks.  Everything is float64 and numpy-backed; graphs are built
implicitly through parent links and freed when the tensors go away.

A Graph here is the implicit DAG hanging off a loss tensor.  ``backward``
walks it in reverse topological order exactly once, accumulating
gradients additively into ``Tensor.grad``.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operands with incompatible shapes."""


class NonScalarLossError(ValueError):
    """backward() called on a tensor that is not a scalar."""


class NonFiniteGradientError(FloatingPointError):
    """An optimizer saw a NaN/inf gradient."""


class Tensor:
    """A float64 array plus the bookkeeping needed for backprop."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar -------------------------------------------------
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def seeded_uniform(rng: np.random.Generator, shape: Sequence[int], fan_in: int,
                   name: str | None = None) -> Tensor:
    """Parameter initialized uniformly in +-1/sqrt(fan_in)."""
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return parameter(rng.uniform(-bound, bound, size=shape), name=name)


def _node(data: np.ndarray, parents: tuple[Tensor, ...],
          backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to the shape of the operand it belongs to."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} vs {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise and linear ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def bwd(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _node(a.data + b.data, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def bwd(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _node(a.data - b.data, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def bwd(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _node(a.data * b.data, (a, b), bwd)


def matmul(a, b) -> Tensor:
    """Matrix product; leading batch dimensions broadcast like np.matmul."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be >=2-D, got {a.shape} vs {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} vs {b.shape}")

    def bwd(g):
        _accum(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        _accum(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _node(np.matmul(a.data, b.data), (a, b), bwd)


def relu(t) -> Tensor:
    t = as_tensor(t)

    def bwd(g):
        _accum(t, g * (t.data > 0))

    return _node(np.maximum(t.data, 0.0), (t,), bwd)


def sigmoid(t) -> Tensor:
    t = as_tensor(t)
    y = 1.0 / (1.0 + np.exp(-t.data))

    def bwd(g):
        _accum(t, g * y * (1.0 - y))

    return _node(y, (t,), bwd)


def log(t) -> Tensor:
    t = as_tensor(t)

    def bwd(g):
        _accum(t, g / t.data)

    return _node(np.log(t.data), (t,), bwd)


def square(t) -> Tensor:
    t = as_tensor(t)

    def bwd(g):
        _accum(t, g * 2.0 * t.data)

    return _node(t.data * t.data, (t,), bwd)


def softmax(t, axis: int = -1) -> Tensor:
    t = as_tensor(t)
    shifted = t.data - t.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        _accum(t, (g - (g * y).sum(axis=axis, keepdims=True)) * y)

    return _node(y, (t,), bwd)


def layer_norm(t, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance (no affine)."""
    t = as_tensor(t)
    mu = t.data.mean(axis=-1, keepdims=True)
    var = ((t.data - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (t.data - mu) * inv

    def bwd(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        _accum(t, (g - gm - xhat * gx) * inv)

    return _node(xhat, (t,), bwd)


def tsum(t, axis=None) -> Tensor:
    t = as_tensor(t)

    def bwd(g):
        if axis is None:
            _accum(t, np.full_like(t.data, float(g)))
        else:
            _accum(t, np.broadcast_to(np.expand_dims(g, axis), t.shape).copy())

    return _node(t.data.sum(axis=axis), (t,), bwd)


def tmean(t, axis=None) -> Tensor:
    t = as_tensor(t)
    count = t.size if axis is None else t.shape[axis]

    def bwd(g):
        if axis is None:
            _accum(t, np.full_like(t.data, float(g) / count))
        else:
            _accum(t, np.broadcast_to(np.expand_dims(g, axis), t.shape) / count)

    return _node(t.data.mean(axis=axis), (t,), bwd)


def reshape(t, shape) -> Tensor:
    t = as_tensor(t)
    shape = tuple(shape)

    def bwd(g):
        _accum(t, g.reshape(t.shape))

    return _node(t.data.reshape(shape), (t,), bwd)


def transpose(t, axes) -> Tensor:
    t = as_tensor(t)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        _accum(t, g.transpose(inv))

    return _node(t.data.transpose(axes), (t,), bwd)


def gather_rows(table, idx) -> Tensor:
    """Look up rows of a 2-D table by integer index; backward scatter-adds."""
    table = as_tensor(table)
    idx = np.asarray(idx)
    if table.ndim != 2:
        raise ShapeError(f"gather_rows: table must be 2-D, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"gather_rows: index out of range for table {table.shape}")

    def bwd(g):
        if table.requires_grad:
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            np.add.at(table.grad, idx.ravel(), g.reshape(-1, table.shape[1]))

    return _node(table.data[idx], (table,), bwd)


def detach(t) -> Tensor:
    """Stop-gradient: same values, no history."""
    return Tensor(as_tensor(t).data)


def straight_through(z, z_q) -> Tensor:
    """Forward the quantized values, backprop as if quantization were identity.

    The output carries z_q's values bit-exactly; the backward pass copies the
    incoming gradient to ``z`` unchanged and contributes nothing to ``z_q``
    through this node.
    """
    z, z_q = as_tensor(z), as_tensor(z_q)
    if z.shape != z_q.shape:
        raise ShapeError(f"straight_through: shapes differ, {z.shape} vs {z_q.shape}")

    def bwd(g):
        _accum(z, g)

    return _node(z_q.data.copy(), (z,), bwd)


# ---------------------------------------------------------------------------
# 2-D convolution (NHWC), stride in {1,2}, zero padding
# ---------------------------------------------------------------------------

_MAX_KERNEL = 4


def _check_conv_args(stride: int, kh: int, kw: int) -> None:
    if stride not in (1, 2):
        raise ValueError(f"conv stride must be 1 or 2, got {stride}")
    if kh > _MAX_KERNEL or kw > _MAX_KERNEL:
        raise ValueError(f"conv kernel must be <= {_MAX_KERNEL}, got {kh}x{kw}")


def _conv2d_fwd(x: np.ndarray, w: np.ndarray, s: int, p: int) -> np.ndarray:
    n, h, wd, ci = x.shape
    kh, kw, _, co = w.shape
    ho = (h + 2 * p - kh) // s + 1
    wo = (wd + 2 * p - kw) // s + 1
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))) if p else x
    out = np.zeros((n, ho, wo, co))
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, i:i + s * ho:s, j:j + s * wo:s, :]
            out += patch @ w[i, j]
    return out


def _conv2d_dx(g: np.ndarray, w: np.ndarray, s: int, p: int,
               x_shape: tuple[int, ...]) -> np.ndarray:
    n, h, wd, ci = x_shape
    kh, kw, _, _ = w.shape
    ho, wo = g.shape[1], g.shape[2]
    gx = np.zeros((n, h + 2 * p, wd + 2 * p, ci))
    for i in range(kh):
        for j in range(kw):
            gx[:, i:i + s * ho:s, j:j + s * wo:s, :] += g @ w[i, j].T
    return gx[:, p:p + h, p:p + wd, :] if p else gx


def _conv2d_dw(x: np.ndarray, g: np.ndarray, s: int, p: int,
               w_shape: tuple[int, ...]) -> np.ndarray:
    kh, kw, ci, co = w_shape
    ho, wo = g.shape[1], g.shape[2]
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))) if p else x
    dw = np.zeros(w_shape)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, i:i + s * ho:s, j:j + s * wo:s, :]
            dw[i, j] = np.tensordot(patch, g, axes=([0, 1, 2], [0, 1, 2]))
    return dw


def conv2d(x, w, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution, layout NHWC, weight (kh, kw, cin, cout)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: need 4-D input/weight, got {x.shape} vs {w.shape}")
    if x.shape[3] != w.shape[2]:
        raise ShapeError(f"conv2d: channel mismatch, input {x.shape} vs weight {w.shape}")
    _check_conv_args(stride, w.shape[0], w.shape[1])

    def bwd(g):
        _accum(x, _conv2d_dx(g, w.data, stride, padding, x.shape))
        if w.requires_grad:
            if w.grad is None:
                w.grad = np.zeros_like(w.data)
            w.grad += _conv2d_dw(x.data, g, stride, padding, w.shape)

    return _node(_conv2d_fwd(x.data, w.data, stride, padding), (x, w), bwd)


def conv_transpose2d(x, w, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed 2-D convolution, weight (kh, kw, cout, cin).

    Output spatial extent is (H-1)*stride + kh - 2*padding, the exact mirror
    of conv2d with the same stride/padding/kernel.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv_transpose2d: need 4-D input/weight, got {x.shape} vs {w.shape}")
    if x.shape[3] != w.shape[3]:
        raise ShapeError(f"conv_transpose2d: channel mismatch, input {x.shape} vs weight {w.shape}")
    kh, kw, co, ci = w.shape
    _check_conv_args(stride, kh, kw)
    n, h, wd, _ = x.shape
    out_shape = (n, (h - 1) * stride + kh - 2 * padding,
                 (wd - 1) * stride + kw - 2 * padding, co)

    def bwd(g):
        _accum(x, _conv2d_fwd(g, w.data, stride, padding))
        if w.requires_grad:
            if w.grad is None:
                w.grad = np.zeros_like(w.data)
            w.grad += _conv2d_dw(g, x.data, stride, padding, w.shape)

    return _node(_conv2d_dx(x.data, w.data, stride, padding, out_shape), (x, w), bwd)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate .grad for every tensor the scalar loss depends on.

    Grads of all tensors reachable from the loss are reset first, so each
    call stands alone; within the call, gradients from shared subexpressions
    accumulate additively.
    """
    if loss.data.size != 1:
        raise NonScalarLossError(f"loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _toposort(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad if node.grad is not None else np.zeros_like(node.data))


def gradients(loss: Tensor, params: Iterable[Tensor]) -> dict[str, np.ndarray]:
    """Run backward and collect gradients keyed by parameter name."""
    backward(loss)
    out = {}
    for i, p in enumerate(params):
        key = p.name if p.name else f"param{i}"
        out[key] = p.grad if p.grad is not None else np.zeros_like(p.data)
    return out


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

class SGD:
    """Momentum SGD: v <- momentum*v + grad; p <- p - lr*v."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, momentum: float = 0.9):
        if lr <= 0:
            raise ValueError(f"lr must be > 0, got {lr}")
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must be in [0,1), got {momentum}")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self._vel = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            if not np.all(np.isfinite(p.grad)):
                raise NonFiniteGradientError(f"non-finite gradient for {p.name or f'param{i}'}")
            self._vel[i] = self.momentum * self._vel[i] + p.grad
            p.data -= self.lr * self._vel[i]

    def zero_grad(self) -> None:
        zero_grads(self.params)


class Adam:
    """Adam with bias correction; same interface as SGD."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ValueError(f"lr must be > 0, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]
        self._t = 0

    def step(self) -> None:
        self._t += 1
        b1, b2 = self.beta1, self.beta2
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            if not np.all(np.isfinite(p.grad)):
                raise NonFiniteGradientError(f"non-finite gradient for {p.name or f'param{i}'}")
            self._m[i] = b1 * self._m[i] + (1 - b1) * p.grad
            self._v[i] = b2 * self._v[i] + (1 - b2) * p.grad * p.grad
            mhat = self._m[i] / (1 - b1 ** self._t)
            vhat = self._v[i] / (1 - b2 ** self._t)
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self) -> None:
        zero_grads(self.params)


def make_optimizer(kind: str, params: Sequence[Tensor], lr: float, momentum: float = 0.9):
    if kind == "sgd":
        return SGD(params, lr=lr, momentum=momentum)
    if kind == "adam":
        return Adam(params, lr=lr)
    raise ValueError(f"unknown optimizer {kind!r} (expected 'sgd' or 'adam')")

"""Dense tensors with tape-based reverse-mode differentiation.

Everything the forecasting network computes goes through :class:`Tensor`.
Data are held as float64 numpy arrays; each operation that involves a
tensor with ``requires_grad`` records its parents and a closure mapping the
output gradient to input gradients.  :func:`backward` walks the recorded
graph in reverse topological order and frees it afterwards.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

ArrayLike = Union[np.ndarray, float, int, Sequence]

MASK_PENALTY = 1e9
LN_EPS = 1e-5

_check_finite = True


class ShapeError(ValueError):
    pass


class NonFiniteError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


@contextlib.contextmanager
def finite_checks(enabled: bool):
    """Toggle NaN/Inf checks at operation boundaries (loss checks stay on)."""
    global _check_finite
    previous = _check_finite
    _check_finite = enabled
    try:
        yield
    finally:
        _check_finite = previous


def _assert_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {what}")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_leaf", "_freed")

    def __init__(self, data: ArrayLike, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if _check_finite:
            _assert_finite(arr, "tensor data")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._leaf = True
        self._freed = False

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out._parents = ()
        out._backward = None
        out._leaf = True
        out._freed = False
        return out

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        backward(self)

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return mul(self, -1.0)
    def __pow__(self, p): return power(self, p)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, idx): return getitem(self, idx)

    def sum(self, axis=None, keepdims=False): return tsum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)
    def transpose(self, *axes): return transpose(self, axes[0] if len(axes) == 1 and isinstance(axes[0], (tuple, list)) else axes)


class Parameter(Tensor):
    """A named, trainable tensor.

    ``init_spec`` records how the values were initialised, e.g.
    ``{"kind": "xavier_uniform", "scale": 0.27}``.
    """

    __slots__ = ("name", "init_spec")

    def __init__(self, name: str, data: ArrayLike, init_spec: Optional[dict] = None):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.init_spec = dict(init_spec or {"kind": "given"})

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: tuple, backward_fn: Callable) -> Tensor:
    if _check_finite:
        _assert_finite(data, "operation output")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._freed = False
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward_fn
        out._leaf = False
    else:
        out._parents = ()
        out._backward = None
        out._leaf = True
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")

    def bw(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * a.data / b.data, b.shape)

    return _result(a.data / b.data, (a, b), bw)


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    return _result(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    return _result(y, (a,), lambda g: (g * y,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    y = np.sqrt(a.data)
    return _result(y, (a,), lambda g: (g * 0.5 / y,))


def tabs(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _result(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    factor = np.where(a.data > 0, 1.0, slope)
    return _result(a.data * factor, (a,), lambda g: (g * factor,))


def elu(a, alpha: float = 1.0) -> Tensor:
    a = as_tensor(a)
    neg = alpha * np.expm1(np.minimum(a.data, 0.0))
    y = np.where(a.data > 0, a.data, neg)
    dy = np.where(a.data > 0, 1.0, neg + alpha)
    return _result(y, (a,), lambda g: (g * dy,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _result(y, (a,), lambda g: (g * (1.0 - y * y),))


def dropout(a: Tensor, p: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    """Inverted dropout; identity when not training or ``p == 0``."""
    if not training or p <= 0.0:
        return a
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(a.shape, dtype=np.float32) >= p) * (1.0 / (1.0 - p))
    return _result(a.data * keep, (a,), lambda g: (g * keep,))


# ---------------------------------------------------------------- reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    y = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(y), (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return tsum(a, axis, keepdims) * (1.0 / count)


# ---------------------------------------------------------------- shape ops

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        y = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None
    return _result(y, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return transpose(a, axes)


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    y = a.data[idx]
    basic = _is_basic_index(idx)

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _result(np.array(y, dtype=np.float64), (a,), bw)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        y = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]} along axis {axis}") from None
    ax = axis % y.ndim
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _result(y, tuple(ts), bw)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        y = np.stack([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"stack: mismatched shapes {[t.shape for t in ts]}") from None
    ax = axis % y.ndim

    def bw(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(ts)))

    return _result(y, tuple(ts), bw)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """Batched matrix product over the trailing two axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands need rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} are not broadcastable") from None
    if _check_finite:
        _assert_finite(a.data, "matmul input")
        _assert_finite(b.data, "matmul input")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(a.data @ b.data, (a, b), bw)


def linear(x, weight, bias=None) -> Tensor:
    """Affine map ``x @ weight + bias`` along the trailing axis of ``x``."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2:
        raise ShapeError(f"linear: weight must be 2-D, got {weight.shape}")
    d_in, d_out = weight.shape
    if x.ndim < 1 or x.shape[-1] != d_in:
        raise ShapeError(f"linear: input {x.shape} does not end in d_in of weight {weight.shape}")
    parents = (x, weight)
    x2 = x.data.reshape(-1, d_in)
    y = (x2 @ weight.data).reshape(x.shape[:-1] + (d_out,))
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (d_out,):
            raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
        y = y + bias.data
        parents = parents + (bias,)

    def bw(g):
        g2 = g.reshape(-1, d_out)
        gx = (g2 @ weight.data.T).reshape(x.shape)
        gw = x2.T @ g2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _result(y, parents, bw)


linear_embed = linear


# ---------------------------------------------------------------- normalisation

def _check_mask(mask: np.ndarray) -> None:
    if not np.all((mask == 0) | (mask == 1)):
        raise ValueError("mask entries must be 0 or 1")


def masked_softmax(scores, mask=None, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` with positions where ``mask == 0`` forced to 0.

    Masking is additive: ``(mask - 1) * 1e9`` is added to the scores before a
    max-subtracted softmax, so masked entries underflow to exactly zero.
    """
    scores = as_tensor(scores)
    s = scores.data
    if mask is not None:
        m = mask.data if isinstance(mask, Tensor) else np.asarray(mask, dtype=np.float64)
        _check_mask(m)
        try:
            np.broadcast_shapes(m.shape, s.shape)
        except ValueError:
            raise ShapeError(f"masked_softmax: mask {np.shape(mask)} does not broadcast to scores {s.shape}") from None
        if m.ndim and np.any(np.broadcast_to(m, np.broadcast_shapes(m.shape, s.shape[-m.ndim:])).max(axis=axis) == 0):
            raise ValueError("masked_softmax: a row is entirely masked")
        s = s + (m - 1.0) * MASK_PENALTY
    z = s - s.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (scores,), bw)


def softmax(scores, axis: int = -1) -> Tensor:
    return masked_softmax(scores, None, axis)


def layer_norm(x, gain, bias, eps: float = LN_EPS) -> Tensor:
    """Normalise the trailing axis to zero mean / unit variance, then scale and shift."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1] if x.ndim else 0
    if d == 0:
        raise ShapeError("layer_norm: normalised axis has zero length")
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match axis of {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    y = xhat * gain.data + bias.data

    def bw(g):
        gx_hat = g * gain.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(x.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(y, (x, gain, bias), bw)


# ---------------------------------------------------------------- convolution

def conv2d(x, kernel) -> Tensor:
    """Time-only convolution with edge-replicated 'same' padding.

    ``x`` is ``(..., C_in, T)`` (typically stations x channels x time) and
    ``kernel`` is ``(C_out, C_in, 1, k_t)`` with odd ``k_t``; the station
    axis is never mixed.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if kernel.ndim != 4 or kernel.shape[2] != 1:
        raise ShapeError(f"conv2d: kernel must be C_out x C_in x 1 x k_t, got {kernel.shape}")
    c_out, c_in, _, k = kernel.shape
    if k % 2 == 0:
        raise ValueError(f"conv2d: kernel length {k} is even; only odd lengths keep time extent")
    if x.ndim < 2 or x.shape[-2] != c_in:
        raise ShapeError(f"conv2d: input {x.shape} has wrong channel count for kernel {kernel.shape}")
    T = x.shape[-1]
    pad = (k - 1) // 2
    xp = np.concatenate([np.repeat(x.data[..., :1], pad, axis=-1), x.data,
                         np.repeat(x.data[..., -1:], pad, axis=-1)], axis=-1)
    win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=-1)  # (..., C_in, T, k)
    lead = x.shape[:-2]
    cols = np.moveaxis(win, -3, -2).reshape(*lead, T, c_in * k)
    wmat = kernel.data.reshape(c_out, c_in * k)
    y = np.swapaxes(cols @ wmat.T, -1, -2)

    def bw(g):
        gt = np.swapaxes(g, -1, -2)  # (..., T, C_out)
        gw = (cols.reshape(-1, c_in * k).T @ gt.reshape(-1, c_out)).T.reshape(kernel.shape)
        gcols = (gt @ wmat).reshape(*lead, T, c_in, k)
        gxp = np.zeros(xp.shape)
        for d in range(k):
            gxp[..., d:d + T] += np.swapaxes(gcols[..., d], -1, -2)
        gx = gxp[..., pad:pad + T].copy()
        if pad:
            gx[..., 0] += gxp[..., :pad].sum(axis=-1)
            gx[..., -1] += gxp[..., pad + T:].sum(axis=-1)
        return gx, gw

    return _result(np.ascontiguousarray(y), (x, kernel), bw)


# ---------------------------------------------------------------- backward

def _toposort(root: Tensor) -> list:
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor, params: Optional[Iterable[Tensor]] = None) -> list:
    """Populate ``.grad`` on every leaf reachable from the scalar ``loss``.

    Gradients accumulate into existing ``.grad`` arrays.  Parameters passed in
    ``params`` that the loss does not depend on receive a zero gradient.  The
    graph is released afterwards, so a second call on the same loss raises.
    Returns the list of ``params`` (or the reached leaves).
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss._freed:
        raise GraphError("backward: graph already consumed; run a new forward pass")
    _assert_finite(loss.data, "loss")
    if not loss.requires_grad:
        raise GraphError("backward: loss does not depend on any tensor requiring grad")
    order = _toposort(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = []
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node._leaf:
            leaves.append(node)
            if g is not None:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if node._freed or node._backward is None:
            raise GraphError("backward: graph already consumed; run a new forward pass")
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    for node in order:
        if not node._leaf:
            node._parents = ()
            node._backward = None
            node._freed = True
    if params is None:
        return leaves
    params = list(params)
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
    return params


def finite_diff_gradcheck(f: Callable, x, step: float = 1e-5) -> float:
    """Largest relative disagreement between autodiff and central differences.

    ``f`` maps one tensor (or, if ``x`` is a sequence, several) to a scalar.
    The error per coordinate is ``|a - n| / max(1, |a|, |n|)``.
    """
    xs = [x] if isinstance(x, (Tensor, np.ndarray)) else list(x)
    base = [np.array(t.data if isinstance(t, Tensor) else t, dtype=np.float64) for t in xs]
    inputs = [Tensor(b.copy(), requires_grad=True) for b in base]
    out = f(*inputs)
    if out.size != 1:
        raise ShapeError(f"gradcheck: function output must be scalar, got shape {out.shape}")
    backward(out, inputs)
    worst = 0.0
    for i, b in enumerate(base):
        analytic = inputs[i].grad.reshape(-1)
        flat = b.reshape(-1)
        for j in range(flat.size):
            vals = []
            for sign in (1.0, -1.0):
                pert = [bb.copy() for bb in base]
                pf = pert[i].reshape(-1)
                pf[j] = flat[j] + sign * step
                vals.append(float(f(*[Tensor(p) for p in pert]).data))
            numeric = (vals[0] - vals[1]) / (2.0 * step)
            a = analytic[j]
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
    return worst

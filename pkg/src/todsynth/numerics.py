"""Dense tensors with define-by-run reverse-mode differentiation, plus AdamW.

Every op that touches a tensor with ``requires_grad`` records a node; the
recording index is global and monotone, so :func:`backward` can replay the
adjoints of the reachable sub-graph in exact reverse recording order.

Storage follows the dtype of the inputs (float32 by default). Gradient checks
run the same code on float64 tensors.
"""

from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field

import numpy as np

IGNORE_INDEX = 255
DEFAULT_DTYPE = np.float32

_seq = itertools.count()
_grad_enabled = [True]


class NumericalError(RuntimeError):
    """A non-finite value appeared; ``step`` records where, when known."""

    def __init__(self, msg, step=None):
        super().__init__(msg)
        self.step = step


class ShapeError(ValueError):
    pass


class EmptyLossError(ValueError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable recording inside the block (inference paths)."""
    _grad_enabled.append(False)
    try:
        yield
    finally:
        _grad_enabled.pop()


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._seq = -1

    # -- introspection -------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.data.shape[0]

    # -- operator sugar ------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def _const(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _record(out_data, parents, backward_fn):
    out = Tensor(out_data)
    if _grad_enabled[-1] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
        out._seq = next(_seq)
    return out


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise -------------------------------------------------------------
def _pair(a, b):
    if not isinstance(a, Tensor):
        a = _const(a, b) if isinstance(b, Tensor) else as_tensor(a)
    return a, _const(b, a)


def add(a, b):
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(a.data - b.data, (a, b), bw)


def mul(a, b):
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(a.data * b.data, (a, b), bw)


def div(a, b):
    a, b = _pair(a, b)

    def bw(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record(a.data / b.data, (a, b), bw)


def power(a, p):
    p = float(p)
    out = a.data ** p

    def bw(g):
        return (g * p * a.data ** (p - 1.0),)

    return _record(out.astype(a.dtype, copy=False), (a,), bw)


def exp(a):
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,))


def log(a):
    return _record(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a):
    out = np.sqrt(a.data)
    return _record(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a):
    out = np.tanh(a.data)
    return _record(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a):
    mask = a.data > 0
    return _record(a.data * mask, (a,), lambda g: (g * mask,))


def sigmoid(a):
    out = 1.0 / (1.0 + np.exp(-a.data))
    return _record(out.astype(a.dtype, copy=False), (a,), lambda g: (g * out * (1.0 - out),))


def silu(a):
    s = (1.0 / (1.0 + np.exp(-a.data))).astype(a.dtype, copy=False)
    out = a.data * s

    def bw(g):
        return (g * (s + a.data * s * (1.0 - s)),)

    return _record(out, (a,), bw)


def sin(a):
    return _record(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),))


def cos(a):
    return _record(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),))


# -- reductions and shape ----------------------------------------------------
def tsum(a, axis=None, keepdims=False):
    out = np.sum(a.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.dtype)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype),)

    return _record(out, (a,), bw)


def mean(a, axis=None, keepdims=False):
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[i] for i in axes]))
    out = np.mean(a.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.dtype)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).astype(a.dtype),)

    return _record(out, (a,), bw)


def reshape(a, shape):
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _record(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a, idx):
    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _record(a.data[idx], (a,), bw)


def concat(tensors, axis=0):
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _record(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw)


def split(a, sizes, axis=0):
    """Split ``a`` into consecutive chunks of the given extents along ``axis``."""
    out, start = [], 0
    for n in sizes:
        sl = [slice(None)] * a.ndim
        sl[axis] = slice(start, start + n)
        out.append(getitem(a, tuple(sl)))
        start += n
    return out


# -- linear algebra ----------------------------------------------------------
def matmul(a, b):
    """Matrix product with numpy batching rules; raises on inner-extent mismatch."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record(np.matmul(a.data, b.data), (a, b), bw)


def linear(x, w, b=None):
    y = matmul(x, w)
    return y if b is None else y + b


# -- softmax family ----------------------------------------------------------
def softmax(x, axis=-1):
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record(out, (x,), bw)


def log_softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _record(out, (x,), bw)


def cross_entropy(logits, labels, ignore_index=IGNORE_INDEX, reduction="mean", weights=None):
    """Mean negative log-likelihood of ``labels`` under row-softmax of ``logits`` (P x C).

    Positions labelled ``ignore_index`` contribute nothing. With
    ``reduction="none"`` the per-position losses are returned (0 at ignored
    positions) as a plain array, without recording. ``weights`` (length P)
    replaces the 1/n averaging by an explicit weighted sum.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    P, C = logits.shape
    valid = labels != ignore_index
    n = int(valid.sum())
    if reduction == "mean" and n == 0:
        raise EmptyLossError("cross_entropy: every position is ignored")
    lab = np.where(valid, labels, 0).astype(np.int64)
    if np.any(lab[valid] >= C) or np.any(lab[valid] < 0):
        raise ValueError(f"cross_entropy: label outside [0, {C})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    nll = -logp[np.arange(P), lab] * valid
    if reduction == "none":
        return nll
    if weights is None:
        w = valid / n
    else:
        w = np.asarray(weights, dtype=np.float64).reshape(-1) * valid
    out = np.asarray(np.sum(nll * w, dtype=np.float64), dtype=logits.dtype)

    def bw(g):
        p = np.exp(logp)
        p[np.arange(P), lab] -= 1.0
        return (p * (g * w[:, None]).astype(logits.dtype),)

    return _record(out, (logits,), bw)


def mse(pred, target):
    d = pred - _const(target, pred)
    return mean(d * d)


# -- convolution -------------------------------------------------------------
def conv2d(x, w, b=None, stride=1, padding=1):
    """2-D cross-correlation. ``x``: B x Cin x H x W, ``w``: Cout x Cin x kh x kw."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    B, Cin, H, W = x.shape
    Cout, _, kh, kw = w.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    out = np.zeros((B, Ho, Wo, Cout), dtype=np.result_type(x.dtype, w.dtype))
    windows = []
    for i in range(kh):
        for j in range(kw):
            win = xp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride]
            windows.append(win)
            out += np.einsum("bchw,oc->bhwo", win, w.data[:, :, i, j], optimize=True)
    out = out.transpose(0, 3, 1, 2)

    def bw(g):
        gx = np.zeros_like(xp)
        gw = np.zeros_like(w.data)
        gt = g.transpose(0, 2, 3, 1)
        k = 0
        for i in range(kh):
            for j in range(kw):
                gw[:, :, i, j] = np.einsum("bhwo,bchw->oc", gt, windows[k], optimize=True)
                gx[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += np.einsum(
                    "bhwo,oc->bchw", gt, w.data[:, :, i, j], optimize=True
                )
                k += 1
        if padding:
            gx = gx[:, :, padding:-padding, padding:-padding]
        return gx, gw

    y = _record(out, (x, w), bw)
    if b is not None:
        y = y + reshape(b, (1, -1, 1, 1))
    return y


def upsample2x(x):
    """Nearest-neighbour 2x spatial upsampling of a B x C x H x W tensor."""
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def bw(g):
        B, C, H, W = x.shape
        return (g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),)

    return _record(out, (x,), bw)


# -- backward ----------------------------------------------------------------
class Tape:
    """The recorded nodes reachable from a root, in recording order."""

    def __init__(self, root):
        nodes, seen, stack = [], set(), [root]
        while stack:
            t = stack.pop()
            if id(t) in seen or t._backward is None:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(t._parents)
        nodes.sort(key=lambda t: t._seq)
        self.nodes = nodes

    def __len__(self):
        return len(self.nodes)

    def backward(self, root, seed=None):
        grads = {id(root): np.ones_like(root.data) if seed is None else seed}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if not parent.requires_grad:
                    continue
                if parent._backward is None:
                    pg = np.asarray(pg, dtype=parent.dtype).reshape(parent.shape)
                    parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
                else:
                    prev = grads.get(id(parent))
                    grads[id(parent)] = pg if prev is None else prev + pg


def backward(loss):
    """Populate ``.grad`` on every ``requires_grad`` leaf reachable from scalar ``loss``."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward: loss is not on the tape")
    if loss._backward is None:
        loss.grad = np.ones_like(loss.data)
        return
    Tape(loss).backward(loss)


def grad_of(loss, wrt):
    """Gradients of ``loss`` with respect to each tensor in ``wrt`` (grads are reset first)."""
    for t in wrt:
        t.grad = None
    backward(loss)
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in wrt]


# -- optimizer ---------------------------------------------------------------
@dataclass
class AdamWState:
    lr: float = 1e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adamw_step(params, grads, state):
    """One AdamW update in place on ``params`` (decoupled weight decay)."""
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(grads) != len(params):
        raise ShapeError("adamw_step: params and grads differ in length")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"adamw_step: grad {g.shape} vs param {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if state.weight_decay:
            p.data *= 1.0 - state.lr * state.weight_decay
        p.data -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    return params, state


class AdamW:
    def __init__(self, params, lr=1e-3, weight_decay=0.01, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.state = AdamWState(lr=lr, weight_decay=weight_decay, beta1=betas[0], beta2=betas[1], eps=eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        adamw_step(self.params, [p.grad for p in self.params], self.state)


# -- numerical differentiation ----------------------------------------------
def finite_difference(f, x, h=1e-3, indices=None):
    """Central differences of scalar ``f()`` w.r.t. entries of array ``x`` (mutated then restored)."""
    flat = x.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    out = np.zeros(flat.size, dtype=np.float64)
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        fp = float(f())
        flat[i] = old - h
        fm = float(f())
        flat[i] = old
        out[i] = (fp - fm) / (2 * h)
    return out.reshape(x.shape)


def rel_error(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12))

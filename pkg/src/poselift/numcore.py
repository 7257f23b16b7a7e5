"""Small reverse-mode autodiff over float64 numpy arrays.

Every op accepts arrays with arbitrary leading (batch) dimensions; the
trailing two dimensions play the role of a matrix. Gradients are computed by
walking the recorded graph backwards from a scalar loss.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class StateError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        backward(self)


class Parameter(Tensor):
    """A named leaf tensor owned by a model. Frozen parameters always report a zero gradient."""

    __slots__ = ("name", "_trainable")

    def __init__(self, value, name: str = "", trainable: bool = True):
        super().__init__(np.array(value, dtype=DTYPE), requires_grad=trainable)
        self.name = name
        self._trainable = trainable
        if not trainable:
            self.grad = np.zeros_like(self.data)

    @property
    def value(self) -> np.ndarray:
        return self.data

    @property
    def trainable(self) -> bool:
        return self._trainable

    @trainable.setter
    def trainable(self, flag: bool):
        self._trainable = bool(flag)
        self.requires_grad = bool(flag)
        self.grad = None if flag else np.zeros_like(self.data)

    def zero_grad(self):
        self.grad = None if self._trainable else np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, trainable={self.trainable})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


_GRAD_ENABLED = True


class no_grad:
    """Context manager that stops graph recording (inference only)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev


def _node(data, parents, backward_fn) -> Tensor:
    if not _GRAD_ENABLED or not any(p.requires_grad for p in parents):
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward_fn)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"cannot add shapes {a.shape} and {b.shape}") from None

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(out, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(out, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(out, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    def bw(g):
        return (g * c,)

    return _node(a.data * c, (a,), bw)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    k = math.sqrt(2.0 / math.pi)
    xd = x.data
    x2 = xd * xd
    t = np.tanh(k * xd * (1.0 + 0.044715 * x2))
    out = 0.5 * xd * (1.0 + t)

    def bw(g):
        du = k * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du),)

    return _node(out, (x,), bw)


# ---------------------------------------------------------------- reductions


def sum(x: Tensor) -> Tensor:  # noqa: A001
    def bw(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node(np.array(x.data.sum()), (x,), bw)


def mean(x: Tensor) -> Tensor:
    n = x.data.size

    def bw(g):
        return (np.full(x.shape, g / n),)

    return _node(np.array(x.data.mean()), (x,), bw)


def row_norm(x: Tensor) -> Tensor:
    """Euclidean norm over the last axis. Subgradient 0 at the origin."""
    n = np.sqrt((x.data**2).sum(axis=-1))

    def bw(g):
        safe = np.where(n > 0, n, 1.0)
        unit = np.where((n > 0)[..., None], x.data / safe[..., None], 0.0)
        return (g[..., None] * unit,)

    return _node(n, (x,), bw)


# ---------------------------------------------------------------- matrix ops


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, a.shape),
            None if gb is None else _unbroadcast(gb, b.shape),
        )

    return _node(out, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ W + b over the last axis of x; W is (in, out), b is (out,)."""
    x = as_tensor(x)
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear dimension mismatch: input {x.shape}, weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"linear bias shape {b.shape} does not match weight {w.shape}")
    x2 = x.data.reshape(-1, w.shape[0])
    out = x2 @ w.data
    if b is not None:
        out = out + b.data
    out = out.reshape(x.shape[:-1] + (w.shape[1],))
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        g2 = g.reshape(-1, w.shape[1])
        gx = (g2 @ w.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, (g2.sum(axis=0) if b.requires_grad else None)

    return _node(out, parents, bw)


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""

    def bw(g):
        return (np.swapaxes(g, -1, -2),)

    return _node(np.swapaxes(x.data, -1, -2), (x,), bw)


def reshape(x: Tensor, shape) -> Tensor:
    def bw(g):
        return (g.reshape(x.shape),)

    return _node(x.data.reshape(shape), (x,), bw)


def permute(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)

    def bw(g):
        return (np.transpose(g, inv),)

    return _node(np.transpose(x.data, axes), (x,), bw)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by subtracting the row max."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _node(p, (x,), bw)


def normalize_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Divide every row (last axis) by its sum; entries are assumed nonnegative."""
    s = x.data.sum(axis=-1, keepdims=True) + eps
    out = x.data / s

    def bw(g):
        return ((g - (g * out).sum(axis=-1, keepdims=True)) / s,)

    return _node(out, (x,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    d = x.shape[-1]

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        gg = (g * xhat).reshape(-1, d).sum(axis=0) if gamma.requires_grad else None
        gb = g.reshape(-1, d).sum(axis=0) if beta.requires_grad else None
        return gx, gg, gb

    return _node(out, (x, gamma, beta), bw)


def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Pick rows along axis -2 per batch element: x (B, L, d), index (B, k) -> (B, k, d).

    The index choice itself carries no gradient; values flow back to the picked rows.
    """
    index = np.asarray(index)
    out = np.take_along_axis(x.data, index[..., None], axis=-2)

    def bw(g):
        gx = np.zeros_like(x.data)
        bidx = np.arange(index.shape[0])[:, None]
        np.add.at(gx, (bidx, index), g)  # accumulates repeated indices
        return (gx,)

    return _node(out, (x,), bw)


# ---------------------------------------------------------------- backward


def _toposort(root: Tensor) -> list[Tensor]:
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


def backward(loss: Tensor):
    """Populate ``grad`` on every trainable Parameter reachable from ``loss``."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise StateError("backward already called on this loss; recompute the forward pass")
    if not loss.requires_grad:
        raise StateError("loss does not depend on any trainable parameter")
    order = _toposort(loss)
    leaves = [n for n in order if isinstance(n, Parameter)]
    stale = [p.name for p in leaves if p.grad is not None]
    if stale:
        raise StateError(f"gradients not reset before backward: {stale[:5]}")
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if isinstance(node, Parameter):
            node.grad = g
            continue
        pg = node._backward(g)
        for p, gp in zip(node._parents, pg):
            if gp is None or not p.requires_grad:
                continue
            k = id(p)
            if k in grads:
                grads[k] = grads[k] + gp
            else:
                grads[k] = gp
    loss._consumed = True


def zero_grad(params: Iterable[Parameter]):
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------- init / optim


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


def lr_at(epoch: int, base: float, factor: float, interval: int) -> float:
    """Step-decayed learning rate: ``base * factor ** (epoch // interval)``."""
    return base * factor ** (epoch // interval)


@dataclass
class OptimizerState:
    lr: float = 1e-3
    factor: float = 0.9
    interval: int = 4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    base_lr: float | None = None
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.base_lr is None:
            self.base_lr = self.lr

    def set_epoch(self, epoch: int):
        self.lr = lr_at(epoch, self.base_lr, self.factor, self.interval)


class Adam:
    """Adam over a fixed list of parameters. Frozen parameters are skipped.

    Moments are keyed by parameter name, so names must be unique.
    """

    def __init__(self, params: Sequence[Parameter], state: OptimizerState | None = None,
                 clip_norm: float | None = None):
        self.params = list(params)
        self.state = state or OptimizerState()
        self.clip_norm = clip_norm

    def set_epoch(self, epoch: int):
        self.state.set_epoch(epoch)

    def zero_grad(self):
        zero_grad(self.params)

    def step(self):
        st = self.state
        active = [p for p in self.params if p.trainable]
        if active and all(p.grad is None for p in active):
            raise StateError("no gradients populated; call backward before step")
        # parameters the loss never reached are left alone
        active = [p for p in active if p.grad is not None]
        scale_ = 1.0
        if self.clip_norm is not None:
            total = math.sqrt(float(np.sum([np.sum(p.grad**2) for p in active])))
            if total > self.clip_norm:
                scale_ = self.clip_norm / total
        st.step += 1
        b1, b2 = st.beta1, st.beta2
        c1 = 1.0 - b1**st.step
        c2 = 1.0 - b2**st.step
        for p in active:
            g = p.grad * scale_
            if st.weight_decay:
                g = g + st.weight_decay * p.data
            m = st.m.get(p.name)
            if m is None:
                m = st.m[p.name] = np.zeros_like(p.data)
                st.v[p.name] = np.zeros_like(p.data)
            v = st.v[p.name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= st.lr * (m / c1) / (np.sqrt(v / c2) + st.eps)


# ---------------------------------------------------------------- gradient check


def numeric_grad(fn: Callable[[], float], p: Parameter, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``fn()`` w.r.t. every entry of ``p``."""
    g = np.zeros_like(p.data)
    flat = p.data.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = fn()
        flat[i] = old - h
        fm = fn()
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative difference ``|a-b| / max(|a|, |b|)``.

    Gradients that vanish analytically (e.g. a key bias under softmax shift
    invariance) leave only finite-difference noise, so below a norm of 1e-8
    the absolute difference is returned instead.
    """
    den = max(np.linalg.norm(a), np.linalg.norm(b))
    if den < 1e-8:
        return float(np.linalg.norm(a - b))
    return float(np.linalg.norm(a - b) / den)


def gradcheck(loss_fn: Callable[[], Tensor], params: Sequence[Parameter], h: float = 1e-5) -> dict:
    """Compare analytic and central-difference gradients; returns name -> relative error."""
    zero_grad(params)
    backward(loss_fn())
    analytic = {p.name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for p in params}

    def f():
        return float(loss_fn().data)

    return {p.name: relative_error(analytic[p.name], numeric_grad(f, p, h)) for p in params}


softmax_rows = softmax

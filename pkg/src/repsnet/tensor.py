"""Dense float64 tensors with define-by-run reverse-mode autodiff.

Ops executed inside an active :class:`Tape` are recorded; ops executed with
no tape active are plain numpy computations (inference mode).  Every op
checks its output for NaN/Inf and raises instead of propagating them.

    with Tape() as tape:
        loss = tsum(matmul(a, b))
    backward(loss, tape)
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

_local = threading.local()


def _active_tape() -> Optional["Tape"]:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node_id: Optional[int] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("division is only supported by a scalar")
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


@dataclass
class _Node:
    op: str
    inputs: tuple
    out: Tensor
    backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Tape:
    """Ordered record of the ops executed while the tape is active."""

    nodes: list = field(default_factory=list)

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def record(self, op, inputs, out, backward_fn) -> None:
        out.node_id = len(self.nodes)
        self.nodes.append(_Node(op, tuple(inputs), out, backward_fn))

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: Optional[str] = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _make(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.node_id = None
    out.name = None
    out.requires_grad = False
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(op, inputs, out, backward_fn)
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every requires_grad tensor."""
    if loss.data.size != 1 or loss.ndim > 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    nid = loss.node_id
    if nid is None or nid >= len(tape.nodes) or tape.nodes[nid].out is not loss:
        raise ContractError("loss was not recorded on this tape")
    grads = {id(loss): np.ones_like(loss.data)}
    refs = {id(loss): loss}
    for node in reversed(tape.nodes[: nid + 1]):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        _accumulate(node.out, g)
        for inp, gi in zip(node.inputs, node.backward_fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            refs[key] = inp
            grads[key] = grads[key] + gi if key in grads else gi
    # whatever is left belongs to leaves
    for key, g in grads.items():
        _accumulate(refs[key], g)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    t.grad = np.array(g, dtype=np.float64) if t.grad is None else t.grad + g


def _check_same_shape(op, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


# elementwise --------------------------------------------------------------


def add(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)
        return _make("add_scalar", a.data + c, (a,), lambda g: (g,))
    _check_same_shape("add", a, b)
    return _make("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)
        return _make("sub_scalar", a.data - c, (a,), lambda g: (g,))
    _check_same_shape("sub", a, b)
    return _make("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        return scale(a, b)
    _check_same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _make("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make("scale", a.data * c, (a,), lambda g: (g * c,))


def neg(a: Tensor) -> Tensor:
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def elementwise(a: Tensor, b, kind: str) -> Tensor:
    ops = {"add": add, "sub": sub, "mul": mul, "scale": scale}
    if kind not in ops:
        raise ContractError(f"unknown elementwise kind {kind!r}")
    return ops[kind](a, b)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x + b where b matches the trailing dims of x (bias / position rows)."""
    nb = b.ndim
    if nb > x.ndim or x.shape[x.ndim - nb:] != b.shape:
        raise DimensionError(f"add_bias: {b.shape} is not a suffix of {x.shape}")
    lead = x.ndim - nb

    def bw(g):
        return g, g.sum(axis=tuple(range(lead))) if lead else g

    return _make("add_bias", x.data + b.data, (x, b), bw)


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        y = np.exp(x.data)
    return _make("exp", y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise NumericError("log of non-positive value")
    xd = x.data
    return _make("log", np.log(xd), (x,), lambda g: (g / xd,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


def relu(x: Tensor) -> Tensor:
    m = x.data > 0
    return _make("relu", x.data * m, (x,), lambda g: (g * m,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    xd = x.data
    u = _GELU_C * (xd + 0.044715 * xd * xd * xd)
    t = np.tanh(u)
    y = 0.5 * xd * (1.0 + t)

    def bw(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du),)

    return _make("gelu", y, (x,), bw)


# linear algebra -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``a`` may carry leading batch axes; ``b`` is either 2-D (shared across
    the batch) or has exactly the same leading axes as ``a``.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner extents differ for {a.shape} and {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch axes differ for {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    out = np.matmul(ad, bd)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        if bd.ndim == 2 and ad.ndim > 2:
            a2 = ad.reshape(-1, ad.shape[-1])
            g2 = g.reshape(-1, g.shape[-1])
            gb = a2.T @ g2
        else:
            gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return ga, gb

    return _make("matmul", out, (a, b), bw)


def pairwise_dot(a: Tensor, b: Tensor) -> Tensor:
    """out[i, j] = <a_i, b_j> for 2-D a (N x d), b (M x d).

    The products are formed elementwise and reduced along a contiguous axis,
    so pairwise_dot(b, a) is bit-identical to pairwise_dot(a, b).T.
    """
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"pairwise_dot: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    out = (ad[:, None, :] * bd[None, :, :]).sum(axis=-1)

    def bw(g):
        return g @ bd, g.T @ ad

    return _make("pairwise_dot", out, (a, b), bw)


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make("transpose", np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _make("reshape", x.data.reshape(tuple(shape)), (x,), lambda g: (g.reshape(old),))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    if not xs:
        raise ContractError("concat of nothing")
    ndim = xs[0].ndim
    axis = axis % ndim
    for t in xs[1:]:
        if t.ndim != ndim or any(
            t.shape[i] != xs[0].shape[i] for i in range(ndim) if i != axis
        ):
            raise DimensionError(f"concat: incompatible shapes {[t.shape for t in xs]}")
    sizes = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def bw(g):
        return np.split(g, sizes, axis=axis)

    return _make("concat", np.concatenate([t.data for t in xs], axis=axis), xs, bw)


def getitem(x: Tensor, idx) -> Tensor:
    shape = x.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _make("getitem", np.array(x.data[idx]), (x,), bw)


def take(table: Tensor, ids) -> Tensor:
    """Embedding lookup: rows of a 2-D table gathered by integer ids."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise DimensionError(f"take needs a 2-D table, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractError(f"id out of range for table of {table.shape[0]} rows")
    n = table.shape[0]

    def bw(g):
        out = np.zeros((n, g.shape[-1]))
        np.add.at(out, ids.reshape(-1), g.reshape(-1, g.shape[-1]))
        return (out,)

    return _make("take", table.data[ids], (table,), bw)


# reductions ---------------------------------------------------------------


def tsum(x: Tensor, axis=None) -> Tensor:
    shape = x.shape
    if axis is None:
        return _make("sum", np.array(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))
    axis = axis % x.ndim

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make("sum", x.data.sum(axis=axis), (x,), bw)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return scale(tsum(x, axis), 1.0 / n)


def masked_mean(x: Tensor, mask) -> Tensor:
    """Mean over the second-to-last axis of ``x`` restricted to mask == 1."""
    m = np.asarray(mask, dtype=np.float64)
    if m.shape != x.shape[:-1]:
        raise DimensionError(f"masked_mean: mask {m.shape} vs features {x.shape}")
    cnt = m.sum(axis=-1, keepdims=True)
    if np.any(cnt == 0):
        raise ContractError("masked_mean over an empty mask")
    w = (m / cnt)[..., None]
    out = (x.data * w).sum(axis=-2)

    def bw(g):
        return (np.expand_dims(g, -2) * w,)

    return _make("masked_mean", out, (x,), bw)


# normalisation ------------------------------------------------------------


def softmax(x: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis; masked-out entries get exactly zero."""
    xd = x.data
    if mask is None:
        z = xd - xd.max(axis=-1, keepdims=True)
        e = np.exp(z)
    else:
        m = np.broadcast_to(np.asarray(mask, dtype=bool), xd.shape)
        if not np.all(m.any(axis=-1)):
            raise ContractError("softmax row with every entry masked")
        big = np.where(m, xd, -np.inf).max(axis=-1, keepdims=True)
        e = np.where(m, np.exp(np.where(m, xd - big, 0.0)), 0.0)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make("softmax", y, (x,), bw)


def log_softmax(x: Tensor) -> Tensor:
    xd = x.data
    z = xd - xd.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def bw(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _make("log_softmax", y, (x,), bw)


LN_EPS = 1e-5


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: gain {gain.shape}, bias {bias.shape} vs width {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    lead = tuple(range(x.ndim - 1))

    def bw(g):
        dxhat = g * gd
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make("layer_norm", xhat * gd + bias.data, (x, gain, bias), bw)


def l2_normalize(x: Tensor) -> Tensor:
    """Divide each slice along the last axis by its Euclidean norm."""
    xd = x.data
    nrm = np.sqrt((xd * xd).sum(axis=-1, keepdims=True))
    if np.any(nrm == 0):
        raise ContractError("cannot normalize a zero vector")
    y = xd / nrm

    def bw(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / nrm,)

    return _make("l2_normalize", y, (x,), bw)


def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean softmax cross-entropy over positions where ``mask`` is non-zero.

    ``logits`` has shape (..., V); ``targets`` holds integer class ids with
    the leading shape of ``logits``.
    """
    t = np.asarray(targets, dtype=np.int64)
    lead = logits.shape[:-1]
    if t.shape != lead:
        raise DimensionError(f"cross_entropy: targets {t.shape} vs logits {logits.shape}")
    V = logits.shape[-1]
    if t.size and (t.min() < 0 or t.max() >= V):
        raise ContractError("cross_entropy target out of range")
    w = np.ones(lead) if mask is None else np.asarray(mask, dtype=np.float64)
    if w.shape != lead:
        raise DimensionError(f"cross_entropy: mask {w.shape} vs targets {lead}")
    total = w.sum()
    if total <= 0:
        raise ContractError("cross_entropy over zero target positions")
    ld = np.ascontiguousarray(logits.data)
    z = ld - ld.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    picked = np.take_along_axis(logp, t[..., None], axis=-1)[..., 0]
    loss = -(picked * w).sum() / total

    def bw(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, t[..., None], 1.0, axis=-1)
        return ((p - onehot) * (w / total)[..., None] * g,)

    return _make("cross_entropy", np.array(loss), (logits,), bw)


# optimisation -------------------------------------------------------------


@dataclass
class AdamWState:
    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: dict, grads: dict, state: AdamWState) -> None:
    """One in-place AdamW update of ``params`` (name -> Tensor).

    Decoupled decay is applied first (p <- p - lr*wd*p), then the
    bias-corrected moment step.  Names missing from ``grads`` are treated as
    having zero gradient.
    """
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.shape:
            raise ContractError(f"grad for {name!r} has shape {g.shape}, param {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        if state.weight_decay:
            p.data = p.data - state.lr * state.weight_decay * p.data
        m[...] = b1 * m + (1.0 - b1) * g
        v[...] = b2 * v + (1.0 - b2) * g * g
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class AdamW:
    """Thin stateful wrapper around :func:`adamw_step` for a parameter dict."""

    def __init__(self, params: dict, lr=5e-5, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = params
        self.state = AdamWState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps,
                                weight_decay=weight_decay)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        adamw_step(self.params, grads, self.state)


# testing utility ----------------------------------------------------------


def grad_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5, coords: Optional[int] = None,
               seed: int = 0) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|).

    ``coords`` limits the finite differences to that many coordinates drawn
    with ``seed``; by default every coordinate is checked.
    """
    x0 = np.array(as_tensor(x).data, dtype=np.float64)
    xt = Tensor(x0.copy(), requires_grad=True)
    with Tape() as tape:
        out = f(xt)
    backward(out, tape)
    analytic = (xt.grad if xt.grad is not None else np.zeros_like(x0)).reshape(-1)
    picks = np.arange(x0.size)
    if coords is not None and coords < x0.size:
        picks = np.sort(np.random.default_rng(seed).choice(x0.size, coords, replace=False))
    numeric = np.zeros(len(picks))
    for j, i in enumerate(picks):
        xp = x0.copy().reshape(-1)
        xp[i] += h
        fp = f(Tensor(xp.reshape(x0.shape))).item()
        xp[i] -= 2 * h
        fm = f(Tensor(xp.reshape(x0.shape))).item()
        numeric[j] = (fp - fm) / (2 * h)
    a = analytic[picks]
    err = np.abs(a - numeric) / np.maximum(1.0, np.abs(a))
    return float(err.max()) if err.size else 0.0

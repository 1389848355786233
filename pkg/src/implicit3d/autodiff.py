"""Dense tensors with tape-style reverse-mode differentiation, plus Adam.

A graph is built implicitly as operations are applied to :class:`Tensor`
objects.  Nodes whose inputs do not require gradients are plain values and
record nothing, so inference paths cost no bookkeeping.  A fresh graph is
expected per training iteration; parameters are the only long-lived leaves.
"""

from __future__ import annotations

import contextlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CHECKPOINT_VERSION = 1
_grad_enabled = True


class ShapeError(ValueError):
    pass


class NonFiniteGradient(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient in parameter {name!r}")
        self.name = name


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, op="leaf", parents=(), backward=None, name=None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self.op = op
        self.parents = parents
        self._backward = backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def detach(self):
        return Tensor(self.data)

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def parameter(data, name=None, dtype=np.float32) -> Tensor:
    t = Tensor(np.array(data, dtype=dtype), requires_grad=True, op="param", name=name)
    t.zero_grad()
    return t


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def make_node(data, parents, backward, op):
    """Create a graph node.

    ``backward(g)`` must return one gradient (or None) per parent, each of the
    parent's shape.  If no parent requires a gradient the result is a constant.
    """
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, op=op, parents=tuple(parents), backward=backward)
    return Tensor(data, op=op)


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording a graph (inference, mesh extraction)."""
    global _grad_enabled
    previous, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = previous


def _coerce_pair(a, b):
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return a, b


def _check_broadcast(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def unbroadcast(g, shape):
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


def add(a, b):
    a, b = _coerce_pair(a, b)
    _check_broadcast("add", a, b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return make_node(a.data + b.data, (a, b), backward, "add")


def sub(a, b):
    a, b = _coerce_pair(a, b)
    _check_broadcast("sub", a, b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return make_node(a.data - b.data, (a, b), backward, "sub")


def mul(a, b):
    a, b = _coerce_pair(a, b)
    _check_broadcast("mul", a, b)

    def backward(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(a.data * b.data, (a, b), backward, "mul")


def div(a, b):
    a, b = _coerce_pair(a, b)
    _check_broadcast("div", a, b)
    out = a.data / b.data

    def backward(g):
        ga = unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(out, (a, b), backward, "div")


def neg(a):
    return make_node(-a.data, (a,), lambda g: (-g,), "neg")


def matmul(a, b):
    a, b = _coerce_pair(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return make_node(a.data @ b.data, (a, b), backward, "matmul")


def linear(h, w, b, activation=None):
    """Fused ``h @ w + b`` with optional ReLU; one node instead of three."""
    h, w, b = as_tensor(h), as_tensor(w), as_tensor(b)
    if h.ndim != 2 or w.ndim != 2 or h.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"linear: incompatible shapes {h.shape}, {w.shape}, {b.shape}")
    out = h.data @ w.data
    out += b.data
    if activation == "relu":
        np.maximum(out, 0, out=out)
    elif activation is not None:
        raise ValueError(f"unknown activation {activation!r}")

    def backward(g):
        if activation == "relu":
            g = g * (out > 0)
        gh = g @ w.data.T if h.requires_grad else None
        gw = h.data.T @ g if w.requires_grad else None
        gb = g.sum(axis=0) if b.requires_grad else None
        return gh, gw, gb

    return make_node(out, (h, w, b), backward, "linear")


def relu(a):
    out = np.maximum(a.data, 0)
    return make_node(out, (a,), lambda g: (g * (out > 0),), "relu")


def max_with_zero(a):
    a = as_tensor(a)
    out = relu(a)
    out.op = "max_with_zero"
    return out


def flush_subnormal(x: np.ndarray) -> np.ndarray:
    """Zero entries within 2**24 of the subnormal range, in place.

    Saturated sigmoids and underflowed transmittance leave float32 gradients
    near the subnormal range, where BLAS kernels run tens of times slower.
    The margin keeps later products through the MLP layers clear of it too.
    """
    x[np.abs(x) < np.finfo(x.dtype).tiny * 2.0**24] = 0
    return x


def sigmoid(a):
    out = _sigmoid(a.data)
    return make_node(out, (a,), lambda g: (flush_subnormal(g * out * (1 - out)),), "sigmoid")


def _sigmoid(x):
    # exp(-|x|) never overflows
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1 / (1 + z), z / (1 + z)).astype(x.dtype, copy=False)


def softplus(a):
    out = np.logaddexp(0, a.data).astype(a.dtype, copy=False)
    sig = _sigmoid(a.data)
    return make_node(out, (a,), lambda g: (flush_subnormal(g * sig),), "softplus")


def exp(a):
    out = np.exp(a.data)
    return make_node(out, (a,), lambda g: (flush_subnormal(g * out),), "exp")


def log(a):
    return make_node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sin(a):
    return make_node(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),), "sin")


def cos(a):
    return make_node(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),), "cos")


def sqrt(a):
    out = np.sqrt(a.data)
    return make_node(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def square(a):
    return make_node(a.data * a.data, (a,), lambda g: (2 * g * a.data,), "square")


def clip(a, lo, hi):
    mask = (a.data >= lo) & (a.data <= hi)
    return make_node(np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,), "clip")


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_node(np.asarray(out), (a,), backward, "sum")


def mean(a, axis=None):
    n = a.data.size if axis is None else a.shape[axis]
    return sum_(a, axis=axis) * (1.0 / n)


def broadcast(a, shape):
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast: cannot broadcast {a.shape} to {tuple(shape)}") from None
    return make_node(out, (a,), lambda g: (unbroadcast(g, a.shape),), "broadcast")


def reshape(a, shape):
    return make_node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def take(a, index):
    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in parts)

    def backward(g):
        out = np.zeros_like(a.data)
        if basic:
            out[index] = g
        else:
            np.add.at(out, index, g)
        return (out,)

    return make_node(a.data[index], (a,), backward, "index")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape}")
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=ax))

    return make_node(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward, "concat")


def _topological(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor):
    """Accumulate d(loss)/d(node) into ``.grad`` of every ancestor.

    Parameters keep their gradient arrays across calls, so the caller zeroes
    them between iterations.  Intermediate nodes get fresh arrays.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topological(loss)
    for node in order:
        if node.op != "param":
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        grads = node._backward(node.grad)
        for p, g in zip(node.parents, grads):
            if g is None or not p.requires_grad:
                continue
            if p.grad is None:
                p.grad = np.asarray(g, dtype=p.dtype)
            else:
                p.grad = p.grad + g


@dataclass
class AdamState:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)


def adam_step(params: dict, state: AdamState):
    """Apply one bias-corrected Adam update in place using ``p.grad``."""
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(name)
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = state.beta1 * m + (1 - state.beta1) * g
        v = state.beta2 * v + (1 - state.beta2) * g * g
        state.first_moment[name] = m
        state.second_moment[name] = v
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - update).astype(p.dtype, copy=False)


def zero_grads(params: dict):
    for p in params.values():
        p.zero_grad()


def save_checkpoint(path, params: dict, kind: str, meta: dict | None = None):
    doc = {
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "meta": meta or {},
        "params": {
            name: {"shape": list(p.shape), "data": p.data.ravel().tolist()}
            for name, p in sorted(params.items())
        },
    }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path):
    """Return ``(kind, params, meta)`` where params maps name to float32 arrays."""
    doc = json.loads(Path(path).read_text())
    if "version" not in doc:
        raise ValueError(f"{path}: checkpoint has no version field")
    if doc["version"] != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc['version']}")
    params = {
        name: np.asarray(entry["data"], dtype=np.float32).reshape(entry["shape"])
        for name, entry in doc["params"].items()
    }
    return doc["kind"], params, doc.get("meta", {})

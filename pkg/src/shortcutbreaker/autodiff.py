"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the closed set of operations the reconstruction model needs is
supported. Every op appends one node to a :class:`Graph`; ``backward``
walks that list once in reverse append order.
"""

from __future__ import annotations

import contextvars
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit, ndtr

from .exceptions import ContractError, DimensionError, NumericError, ParameterError

__all__ = [
    "Tensor",
    "Graph",
    "as_tensor",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "transpose",
    "reshape",
    "sum",
    "mean",
    "softmax_lastaxis",
    "sigmoid",
    "gelu",
    "layer_norm",
    "dropout",
    "cosine_similarity",
    "concat",
    "backward",
    "zero_grad",
    "no_grad",
]

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

_active_graph: contextvars.ContextVar["Graph | None"] = contextvars.ContextVar(
    "shortcutbreaker_active_graph", default=None
)
_grad_enabled: contextvars.ContextVar[bool] = contextvars.ContextVar(
    "shortcutbreaker_grad_enabled", default=True
)


class no_grad:
    """Context in which ops record nothing, for inference passes."""

    def __enter__(self):
        self._token = _grad_enabled.set(False)
        return self

    def __exit__(self, *exc):
        _grad_enabled.reset(self._token)
        return False


class Node:
    __slots__ = ("kind", "inputs", "output", "backward_fn")

    def __init__(self, kind, inputs, output, backward_fn):
        self.kind = kind
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Graph:
    """Append-only op tape.

    Inputs of a node always precede it, so reverse append order is a valid
    reverse topological order. Use as a context manager to make it the
    target of ops whose inputs are all leaves.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.consumed = False

    def __len__(self):
        return len(self.nodes)

    def __enter__(self):
        self._token = _active_graph.set(self)
        return self

    def __exit__(self, *exc):
        _active_graph.reset(self._token)
        return False

    def record(self, kind, inputs, output, backward_fn):
        if self.consumed:
            raise ContractError("graph already differentiated; build a new one")
        output._node_id = len(self.nodes)
        output._graph = self
        self.nodes.append(Node(kind, inputs, output, backward_fn))

    def backward(self, loss: "Tensor") -> None:
        if loss._graph is not self:
            raise ContractError("loss was not recorded on this graph")
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self.consumed:
            raise ContractError("backward called twice on the same graph")
        self.consumed = True
        loss._gacc = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            out = node.output
            g = out._gacc
            out._gacc = None
            if g is None:
                node.backward_fn = None
                continue
            grads = node.backward_fn(g)
            node.backward_fn = None
            for inp, gi in zip(node.inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                if gi.shape != inp.data.shape:
                    gi = _unbroadcast(gi, inp.data.shape)
                if inp._graph is None:
                    inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
                elif inp._gacc is None:
                    inp._gacc = gi
                else:
                    inp._gacc = inp._gacc + gi
        # nodes and their outputs reference each other; drop the tape now
        # rather than waiting for the cycle collector
        self.nodes = []


class Tensor:
    """A float64 array, optionally tracked for differentiation.

    Leaves (``requires_grad=True`` tensors created by the user) receive
    ``.grad``; intermediates only carry a transient accumulator.
    """

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._graph: Graph | None = None
        self._node_id: int | None = None
        self._gacc: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._graph is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        if self._graph is None:
            raise ContractError("tensor is not the output of a recorded operation")
        self._graph.backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _check_finite(arr: np.ndarray, kind: str) -> None:
    # one reduction is non-finite whenever an element is; confirm before raising
    if not math.isfinite(float(np.sum(arr))) and not np.isfinite(arr).all():
        raise NumericError(f"non-finite value produced by {kind}")


def _emit(kind: str, inputs: Sequence[Tensor], out_data: np.ndarray,
          backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    _check_finite(out_data, kind)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = _grad_enabled.get() and any(t.requires_grad for t in inputs)
    out.grad = None
    out._graph = None
    out._node_id = None
    out._gacc = None
    if not out.requires_grad:
        return out
    graph = None
    for t in inputs:
        if t._graph is not None:
            if graph is not None and t._graph is not graph:
                raise ContractError(f"{kind}: inputs belong to different graphs")
            graph = t._graph
    if graph is None:
        graph = _active_graph.get()
        if graph is None:
            graph = Graph()
    graph.record(kind, tuple(inputs), out, backward_fn)
    return out


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def back(g):
        return (g * bd if a.requires_grad else None, g * ad if b.requires_grad else None)

    return _emit("mul", (a, b), ad * bd, back)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    bd = b.data
    out = a.data / bd

    def back(g):
        ga = g / bd
        return ga, (-ga * out if b.requires_grad else None)

    return _emit("div", (a, b), out, back)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """Batched matrix product; gradients ``g @ b.T`` and ``a.T @ g``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    if b.ndim == 2 and a.ndim > 2:
        # fold leading axes into a single GEMM
        a2 = ad.reshape(-1, ad.shape[-1])
        out = (a2 @ bd).reshape(ad.shape[:-1] + (bd.shape[-1],))

        def back2(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ bd.T).reshape(ad.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _emit("matmul", (a, b), out, back2)
    try:
        out = np.matmul(ad, bd)
    except ValueError as exc:
        raise DimensionError(f"matmul batch axes not broadcastable: {a.shape} @ {b.shape}") from exc

    def back(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(ad, -1, -2), g) if b.requires_grad else None
        return ga, gb

    return _emit("matmul", (a, b), out, back)


def transpose(x, axes=None) -> Tensor:
    """Permute axes; the default swaps the last two."""
    x = as_tensor(x)
    if axes is None:
        axes = list(range(x.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inverse = tuple(int(i) for i in np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(x.data, axes))
    return _emit("transpose", (x,), out, lambda g: (np.transpose(g, inverse),))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {x.shape} to {tuple(shape)}") from exc
    in_shape = x.shape
    return _emit("reshape", (x,), out, lambda g: (g.reshape(in_shape),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat shapes incompatible: {[t.shape for t in tensors]}") from exc
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _emit("concat", tuple(tensors), out,
                 lambda g: tuple(np.split(g, splits, axis=axis)))


# ---------------------------------------------------------------- reductions

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    out = np.sum(x.data, axis=axes, keepdims=keepdims)
    in_shape = x.shape

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, in_shape),)

    return _emit("sum", (x,), np.asarray(out), back)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = np.mean(x.data, axis=axes, keepdims=keepdims)
    in_shape = x.shape

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, in_shape),)

    return _emit("mean", (x,), np.asarray(out), back)


# ---------------------------------------------------------------- nonlinearities

def softmax_lastaxis(x) -> Tensor:
    """Row softmax with max-subtraction."""
    x = as_tensor(x)
    if x.shape[-1] < 1:
        raise DimensionError("softmax over an empty axis")
    e = np.exp(x.data - x.data.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", (x,), y, back)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = expit(x.data)
    return _emit("sigmoid", (x,), y, lambda g: (g * (y * (1.0 - y)),))


def gelu(x) -> Tensor:
    """Exact GELU, ``x * Phi(x)``."""
    x = as_tensor(x)
    xd = x.data
    cdf = ndtr(xd)

    def back(g):
        return (g * (cdf + xd * (_INV_SQRT_2PI * np.exp(-0.5 * xd * xd))),)

    return _emit("gelu", (x,), xd * cdf, back)


def layer_norm(x, gamma=None, beta=None, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then apply the optional affine."""
    x = as_tensor(x)
    d = x.shape[-1]
    gamma = as_tensor(gamma) if gamma is not None else None
    beta = as_tensor(beta) if beta is not None else None
    inputs = [x]
    for p in (gamma, beta):
        if p is not None:
            if p.shape != (d,):
                raise DimensionError(f"layer_norm affine shape {p.shape} != ({d},)")
            inputs.append(p)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat
    if gamma is not None:
        y = y * gamma.data
    if beta is not None:
        y = y + beta.data

    def back(g):
        dxhat = g * gamma.data if gamma is not None else g
        gx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        grads = [gx]
        lead = tuple(range(g.ndim - 1))
        if gamma is not None:
            grads.append((g * xhat).sum(axis=lead))
        if beta is not None:
            grads.append(g.sum(axis=lead))
        return grads

    return _emit("layer_norm", tuple(inputs), y, back)


def dropout(x, rate: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: zero with probability ``rate``, rescale survivors."""
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must lie in [0, 1), got {rate}")
    x = as_tensor(x)
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ParameterError("dropout in training mode needs an rng")
    scale = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _emit("dropout", (x,), x.data * scale, lambda g: (g * scale,))


def cosine_similarity(a, b, axis: int = -1) -> Tensor:
    """Cosine similarity along ``axis``; 0 where either norm is below 1e-12."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"cosine_similarity shapes differ: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    na = np.sqrt((ad * ad).sum(axis=axis, keepdims=True))
    nb = np.sqrt((bd * bd).sum(axis=axis, keepdims=True))
    ok = (na >= 1e-12) & (nb >= 1e-12)
    na = np.where(ok, na, 1.0)
    nb = np.where(ok, nb, 1.0)
    cs = np.where(ok, (ad * bd).sum(axis=axis, keepdims=True) / (na * nb), 0.0)
    cs = np.clip(cs, -1.0, 1.0)

    def back(g):
        g = np.expand_dims(g, axis) * ok
        ga = g * (bd / (na * nb) - cs * ad / (na * na)) if a.requires_grad else None
        gb = g * (ad / (na * nb) - cs * bd / (nb * nb)) if b.requires_grad else None
        return ga, gb

    return _emit("cosine_similarity", (a, b), np.squeeze(cs, axis=axis), back)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf reachable from ``loss``."""
    loss.backward()


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None

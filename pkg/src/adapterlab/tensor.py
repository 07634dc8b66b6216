"""
Dense float64 tensors with define-by-run reverse-mode differentiation.

Every differentiable operation returns a new :class:`Tensor` that remembers
its inputs and a closure mapping the upstream gradient to one gradient per
input. Node ids come from a monotonically increasing counter, so sorting the
reachable nodes by id yields a topological order; ``backward`` walks it in
reverse and visits each node exactly once.

Storage is a C-contiguous ``numpy.ndarray`` of dtype float64. No views are
exposed through the graph: ops that reshape or slice copy their output.
"""

from __future__ import annotations

import itertools
import math
import threading
from contextlib import contextmanager
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .errors import DataError, DimensionError, UsageError

_node_ids = itertools.count()
_state = threading.local()

GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Record no graph inside the block (inference, attack queries)."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class GraphNode(NamedTuple):
    op: str
    input_ids: tuple[int, ...]
    output_id: int


class Tensor:
    __slots__ = (
        "data",
        "grad",
        "requires_grad",
        "node_id",
        "name",
        "op",
        "_parents",
        "_backward",
        "_consumed",
    )

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_node_ids)
        self.name = name
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._consumed = False

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _result(data: np.ndarray, parents: tuple["Tensor", ...], backward: Callable, op: str) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.node_id = next(_node_ids)
        out.name = None
        out.op = op
        out._consumed = False
        if is_grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None and not self._consumed

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag}, requires_grad={self.requires_grad})"

    # -- operators ------------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    # -- differentiation ------------------------------------------------------

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf requiring grad.

        The graph is consumed: intermediate closures are released and a second
        call raises :class:`UsageError`. Run a fresh forward pass instead.
        """
        if self.data.size != 1:
            raise UsageError(f"backward() needs a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise UsageError("backward() already ran on this graph; rebuild it with a new forward pass")
        if not self.requires_grad:
            raise UsageError("loss does not depend on any tensor with requires_grad=True")

        nodes: dict[int, Tensor] = {}
        stack = [self]
        while stack:
            node = stack.pop()
            if node.node_id in nodes:
                continue
            if node._consumed:
                raise UsageError("graph contains nodes from an already back-propagated pass")
            nodes[node.node_id] = node
            stack.extend(p for p in node._parents if p.requires_grad)

        grads: dict[int, np.ndarray] = {self.node_id: np.ones_like(self.data)}
        for node_id in sorted(nodes, reverse=True):
            node = nodes[node_id]
            g = grads.pop(node_id, None)
            if node._backward is None:
                if g is not None:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            if g is not None:
                for parent, pg in zip(node._parents, node._backward(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    prev = grads.get(parent.node_id)
                    grads[parent.node_id] = pg if prev is None else prev + pg
            node._backward = None
            node._parents = ()
            node._consumed = True


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def graph_nodes(output: Tensor) -> list[GraphNode]:
    """Operation records reachable from ``output`` in topological order."""
    seen: dict[int, Tensor] = {}
    stack = [output]
    while stack:
        node = stack.pop()
        if node.node_id in seen:
            continue
        seen[node.node_id] = node
        stack.extend(node._parents)
    return [
        GraphNode(t.op, tuple(p.node_id for p in t._parents), t.node_id)
        for t in (seen[i] for i in sorted(seen))
    ]


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` along the axes broadcasting expanded."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, what: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{what}: shapes {a.shape} and {b.shape} are not broadcastable") from None


# -- elementwise ---------------------------------------------------------------


def elementwise(a, b, kind: str) -> Tensor:
    """``add``, ``sub`` or ``mul`` with numpy broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, kind)
    if kind == "add":
        out = a.data + b.data

        def bw(g):
            return (
                unbroadcast(g, a.shape) if a.requires_grad else None,
                unbroadcast(g, b.shape) if b.requires_grad else None,
            )

    elif kind == "sub":
        out = a.data - b.data

        def bw(g):
            return (
                unbroadcast(g, a.shape) if a.requires_grad else None,
                unbroadcast(-g, b.shape) if b.requires_grad else None,
            )

    elif kind == "mul":
        out = a.data * b.data

        def bw(g):
            return (
                unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
            )

    else:
        raise UsageError(f"unknown elementwise kind {kind!r}")
    return Tensor._result(out, (a, b), bw, kind)


def add(a, b) -> Tensor:
    return elementwise(a, b, "add")


def sub(a, b) -> Tensor:
    return elementwise(a, b, "sub")


def mul(a, b) -> Tensor:
    return elementwise(a, b, "mul")


# -- linear algebra --------------------------------------------------------------


def _swap_last(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul: batch axes of {a.shape} and {b.shape} do not broadcast") from None

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(np.matmul(g, _swap_last(b.data)), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                k = a.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = unbroadcast(np.matmul(_swap_last(a.data), g), b.shape)
        return ga, gb

    return Tensor._result(out, (a, b), bw, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


# -- shape ops --------------------------------------------------------------------


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        out = x.data.reshape(shape).copy()
    except ValueError:
        raise DimensionError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None
    return Tensor._result(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"transpose: axes {axes} invalid for shape {x.shape}")
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return Tensor._result(out, (x,), lambda g: (np.ascontiguousarray(g.transpose(inverse)),), "transpose")


def getitem(x: Tensor, index) -> Tensor:
    out = np.array(x.data[index], dtype=np.float64)

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._result(out, (x,), bw, "getitem")


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims), dtype=np.float64)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor._result(out, (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / count)


# -- nonlinearities -----------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return Tensor._result(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,), "relu")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return Tensor._result(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def gelu(x: Tensor) -> Tensor:
    """0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 * x**3)))"""
    v = x.data
    v2 = v * v
    t = np.tanh(GELU_C * v * (1.0 + GELU_A * v2))
    out = 0.5 * v * (1.0 + t)

    def bw(g):
        dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v2)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * dt),)

    return Tensor._result(out, (x,), bw, "gelu")


ACTIVATIONS = {"relu": relu, "gelu": gelu, "tanh": tanh}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        fn = ACTIVATIONS[kind]
    except KeyError:
        raise UsageError(f"unknown activation {kind!r}; expected one of {sorted(ACTIVATIONS)}") from None
    return fn(x)


def _check_axis(axis: int, ndim: int, what: str) -> int:
    if not -ndim <= axis < ndim:
        raise DimensionError(f"{what}: axis {axis} out of range for {ndim}-d tensor")
    return axis % ndim


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(axis, x.ndim, "softmax")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor._result(y, (x,), bw, "softmax")


def masked_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is true; no gradient flows to them."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    out = np.where(mask, value, x.data)
    keep = ~mask
    return Tensor._result(out, (x,), lambda g: (g * keep,), "masked_fill")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise DimensionError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} must both be ({n},) for input {x.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        gx = gg = gb = None
        if x.requires_grad:
            dxhat = g * gain.data
            gx = inv / n * (
                n * dxhat - dxhat.sum(axis=-1, keepdims=True) - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
            )
        if gain.requires_grad:
            gg = (g * xhat).reshape(-1, n).sum(axis=0)
        if bias.requires_grad:
            gb = g.reshape(-1, n).sum(axis=0)
        return gx, gg, gb

    return Tensor._result(out, (x, gain, bias), bw, "layer_norm")


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, train: bool = True) -> Tensor:
    if not train or rate <= 0.0:
        return x
    if rng is None:
        raise UsageError("dropout in training mode needs an explicit random generator")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return Tensor._result(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def embedding(weight: Tensor, ids) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise DataError(f"token id out of range [0, {weight.shape[0]}): min {ids.min()}, max {ids.max()}")
    out = weight.data[ids]

    def bw(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (full,)

    return Tensor._result(out, (weight,), bw, "embedding")


# -- losses -------------------------------------------------------------------------


def cross_entropy(logits: Tensor, targets, ignore_index: int = -100) -> Tensor:
    """Mean negative log-likelihood over positions whose target is not ``ignore_index``."""
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy: logits must be [n, c], got {logits.shape}")
    n, c = logits.shape
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if targets.shape[0] != n:
        raise DimensionError(f"cross_entropy: {n} logit rows but {targets.shape[0]} targets")
    valid = targets != ignore_index
    bad = valid & ((targets < 0) | (targets >= c))
    if bad.any():
        raise DataError(f"cross_entropy: target {int(targets[bad][0])} outside [0, {c})")
    count = int(valid.sum())
    if count == 0:
        return Tensor._result(np.zeros(()), (logits,), lambda g: (np.zeros_like(logits.data),), "cross_entropy")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsum
    rows = np.nonzero(valid)[0]
    loss = -logp[rows, targets[rows]].sum() / count

    def bw(g):
        grad = np.exp(logp)
        grad[rows, targets[rows]] -= 1.0
        grad[~valid] = 0.0
        return (grad * (g / count),)

    return Tensor._result(np.asarray(loss), (logits,), bw, "cross_entropy")


def mse_loss(pred: Tensor, target) -> Tensor:
    diff = sub(pred, _as_tensor(target))
    return mean(mul(diff, diff))

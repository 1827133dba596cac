"""Dense 2-D arrays with reverse-mode automatic differentiation.

Values are ``float64`` numpy arrays of shape ``(rows, cols)``. Each
differentiable primitive returns a fresh :class:`Node` that remembers its
parents and how to push an incoming adjoint back to them; :func:`backward`
walks the graph in a fixed reverse topological order so repeated runs are
bit-identical.

The graph is rebuilt on every forward pass. Parameters are long-lived leaf
nodes whose ``grad`` accumulates until :func:`zero_grad` is called.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericalError

__all__ = [
    "Node",
    "as_matrix",
    "constant",
    "parameter",
    "matmul",
    "transpose",
    "add",
    "sub",
    "hadamard",
    "elementwise",
    "relu",
    "add_bias",
    "scale",
    "sum_squares",
    "mean",
    "softmax",
    "log_softmax",
    "softmax_cross_entropy",
    "backward",
    "zero_grad",
    "grad_check",
]


def as_matrix(x) -> np.ndarray:
    """Coerce ``x`` to a C-contiguous 2-D float64 array.

    Scalars become 1x1 and 1-D inputs become a single row.
    """
    arr = np.array(x, dtype=np.float64, copy=True)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got shape {arr.shape}")
    if arr.shape[0] == 0 or arr.shape[1] == 0:
        raise DimensionError(f"matrix dimensions must be positive, got {arr.shape}")
    return np.ascontiguousarray(arr)


class Node:
    """A value in the computation graph.

    Parameters
    ----------
    value : array_like
        Matrix held by the node.
    requires_grad : bool
        Whether gradients should flow into (and accumulate on) this node.
    op : str
        Name of the primitive that produced the node; ``"leaf"`` for inputs.
    parents : tuple of Node
        Inputs of the primitive.
    """

    __slots__ = ("value", "grad", "op", "parents", "requires_grad", "_backward", "name")

    def __init__(self, value, requires_grad=False, op="leaf", parents=(), name=None):
        self.value = value if op != "leaf" else as_matrix(value)
        self.grad = np.zeros_like(self.value)
        self.op = op
        self.parents = tuple(parents)
        self.requires_grad = bool(requires_grad)
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    @property
    def rows(self) -> int:
        return self.value.shape[0]

    @property
    def cols(self) -> int:
        return self.value.shape[1]

    def item(self) -> float:
        if self.value.shape != (1, 1):
            raise ContractError(f"item() needs a 1x1 node, got {self.value.shape}")
        return float(self.value[0, 0])

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Node{label}(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Node):
            return hadamard(self, other)
        return scale(self, other)

    __rmul__ = __mul__


def constant(x, name=None) -> Node:
    return Node(x, requires_grad=False, name=name)


def parameter(x, name=None) -> Node:
    return Node(x, requires_grad=True, name=name)


def _result(value: np.ndarray, op: str, parents: Sequence[Node]) -> Node:
    if not np.all(np.isfinite(value)):
        raise NumericalError(f"{op} produced non-finite values")
    out = Node(value, op=op, parents=parents)
    out.requires_grad = any(p.requires_grad for p in parents)
    return out


def _same_shape(a: Node, b: Node, op: str):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def matmul(a: Node, b: Node) -> Node:
    if a.cols != b.rows:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    out = _result(a.value @ b.value, "matmul", (a, b))

    def _backward(g):
        if a.requires_grad:
            a.grad += g @ b.value.T
        if b.requires_grad:
            b.grad += a.value.T @ g

    out._backward = _backward
    return out


def transpose(a: Node) -> Node:
    out = _result(np.ascontiguousarray(a.value.T), "transpose", (a,))

    def _backward(g):
        if a.requires_grad:
            a.grad += g.T

    out._backward = _backward
    return out


def add(a: Node, b: Node) -> Node:
    _same_shape(a, b, "add")
    out = _result(a.value + b.value, "add", (a, b))

    def _backward(g):
        if a.requires_grad:
            a.grad += g
        if b.requires_grad:
            b.grad += g

    out._backward = _backward
    return out


def sub(a: Node, b: Node) -> Node:
    _same_shape(a, b, "sub")
    out = _result(a.value - b.value, "sub", (a, b))

    def _backward(g):
        if a.requires_grad:
            a.grad += g
        if b.requires_grad:
            b.grad -= g

    out._backward = _backward
    return out


def hadamard(a: Node, b: Node) -> Node:
    _same_shape(a, b, "hadamard")
    out = _result(a.value * b.value, "hadamard", (a, b))

    def _backward(g):
        if a.requires_grad:
            a.grad += g * b.value
        if b.requires_grad:
            b.grad += g * a.value

    out._backward = _backward
    return out


_ELEMENTWISE = {"add": add, "sub": sub, "hadamard": hadamard}


def elementwise(a: Node, b: Node, kind: str) -> Node:
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ContractError(f"unknown elementwise kind {kind!r}") from None
    return fn(a, b)


def relu(a: Node) -> Node:
    active = a.value > 0.0
    out = _result(np.where(active, a.value, 0.0), "relu", (a,))

    def _backward(g):
        if a.requires_grad:
            a.grad += g * active

    out._backward = _backward
    return out


def add_bias(a: Node, bias: Node) -> Node:
    """Add a ``1 x cols`` row to every row of ``a``."""
    if bias.rows != 1 or bias.cols != a.cols:
        raise DimensionError(f"add_bias: bias {bias.shape} does not fit {a.shape}")
    out = _result(a.value + bias.value, "add_bias", (a, bias))

    def _backward(g):
        if a.requires_grad:
            a.grad += g
        if bias.requires_grad:
            bias.grad += g.sum(axis=0, keepdims=True)

    out._backward = _backward
    return out


def scale(a: Node, c: float) -> Node:
    c = float(c)
    out = _result(a.value * c, "scale", (a,))

    def _backward(g):
        if a.requires_grad:
            a.grad += g * c

    out._backward = _backward
    return out


def sum_squares(a: Node) -> Node:
    """Squared Frobenius norm as a 1x1 node."""
    out = _result(np.array([[np.sum(a.value * a.value)]]), "sum_squares", (a,))

    def _backward(g):
        if a.requires_grad:
            a.grad += 2.0 * g[0, 0] * a.value

    out._backward = _backward
    return out


def mean(nodes: Sequence[Node]) -> Node:
    """Arithmetic mean of equally shaped nodes, reduced in list order."""
    if len(nodes) == 0:
        raise ContractError("mean of an empty list")
    shape = nodes[0].shape
    for n in nodes:
        _same_shape(nodes[0], n, "mean")
    acc = np.zeros(shape)
    for n in nodes:
        acc = acc + n.value
    k = len(nodes)
    out = _result(acc / k, "mean", tuple(nodes))

    def _backward(g):
        share = g / k
        for n in nodes:
            if n.requires_grad:
                n.grad += share

    out._backward = _backward
    return out


def log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _check_labels(labels, batch: int, k: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.ndim != 1 or y.shape[0] != batch:
        raise DimensionError(f"expected {batch} labels, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(y == np.round(y)):
            raise IndexError("labels must be integer class indices")
        y = y.astype(np.int64)
    if y.size and (y.min() < 0 or y.max() >= k):
        raise IndexError(f"label out of range [0, {k}): min={y.min()}, max={y.max()}")
    return y


def softmax_cross_entropy(logits: Node, labels) -> Node:
    """Mean over the batch of ``-log softmax(logits)[label]``."""
    batch, k = logits.shape
    y = _check_labels(labels, batch, k)
    logp = log_softmax(logits.value)
    rows = np.arange(batch)
    loss = -logp[rows, y].sum() / batch
    out = _result(np.array([[loss]]), "softmax_cross_entropy", (logits,))

    def _backward(g):
        if logits.requires_grad:
            d = np.exp(logp)
            d[rows, y] -= 1.0
            logits.grad += d * (g[0, 0] / batch)

    out._backward = _backward
    return out


def _topological_order(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in reversed(node.parents):
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Node) -> None:
    """Accumulate d(loss)/d(node) into ``grad`` of every node that requires it."""
    if loss.shape != (1, 1):
        raise ContractError(f"backward needs a scalar (1x1) loss, got {loss.shape}")
    order = _topological_order(loss)
    for node in order:
        if node.op != "leaf":
            node.grad = np.zeros_like(node.value)
    loss.grad = np.ones((1, 1))
    for node in reversed(order):
        if node._backward is not None and node.requires_grad:
            node._backward(node.grad)


def zero_grad(params: Iterable[Node]) -> None:
    for p in params:
        p.grad = np.zeros_like(p.value)


def grad_check(f: Callable[[], Node], params: Sequence[Node], eps: float = 1e-6) -> float:
    """Largest relative error between autodiff and central differences.

    ``f`` rebuilds the scalar loss from the current values of ``params``.
    Each coordinate is compared as ``|a - n| / max(|a|, |n|, 1e-8)``.
    Parameter values are restored before returning.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    zero_grad(params)
    loss = f()
    backward(loss)
    worst = 0.0
    for p in params:
        analytic = p.grad.copy()
        flat = p.value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = f().item()
            flat[i] = orig - eps
            down = f().item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * eps)
            a = analytic.reshape(-1)[i]
            denom = max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, abs(a - numeric) / denom)
    zero_grad(params)
    return worst

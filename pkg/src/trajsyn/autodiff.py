"""Dense reverse-mode automatic differentiation on top of numpy.

Every operation records its inputs and a vector-Jacobian product (VJP).  The
VJPs are themselves written with :class:`Tensor` operations, so running
:func:`backward` with ``create_graph=True`` records the backward pass as new
graph nodes.  That is what lets a loss on the final parameters of an unrolled
SGD run be differentiated back into the data those SGD steps were trained on.

Node ids are handed out by a per-thread :class:`Graph` in creation order, so
inputs always carry smaller ids than outputs and reverse-id order is a valid
reverse topological order.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Graph",
    "Tensor",
    "ShapeError",
    "NonFiniteError",
    "MetaGradientError",
    "no_grad",
    "is_grad_enabled",
    "tensor",
    "constant",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "transpose",
    "reshape",
    "take",
    "sum",
    "mean",
    "tanh",
    "relu",
    "activation",
    "exp",
    "log",
    "softmax",
    "softmax_cross_entropy",
    "l2_norm_squared",
    "backward",
    "grad",
    "UnrolledSGD",
    "backward_through_update",
]


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class MetaGradientError(RuntimeError):
    pass


class Graph:
    """Append-only record of the operations created on one thread.

    Only the id counter and the number of recorded operations are kept; the
    operation records live on the tensors themselves so that finished graphs
    are reclaimed by the garbage collector.
    """

    def __init__(self):
        self._next_id = 0
        self.size = 0

    def new_id(self) -> int:
        node_id = self._next_id
        self._next_id += 1
        self.size += 1
        return node_id


class _State(threading.local):
    def __init__(self):
        self.graph = Graph()
        self.grad_enabled = True


_state = _State()


def current_graph() -> Graph:
    return _state.graph


def is_grad_enabled() -> bool:
    return _state.grad_enabled


@contextmanager
def no_grad():
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "node_id", "op", "_parents", "_vjp", "__weakref__")

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError("non-finite values in tensor input")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node_id = _state.graph.new_id() if requires_grad else None
        self.op = "leaf"
        self._parents: tuple = ()
        self._vjp = None

    @classmethod
    def _result(cls, data, parents: tuple, vjp, op: str) -> "Tensor":
        if not np.isfinite(data).all():
            raise NonFiniteError(f"{op} produced non-finite values")
        out = cls.__new__(cls)
        out.data = data
        out.op = op
        if _state.grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out.node_id = _state.graph.new_id()
            out._parents = parents
            out._vjp = vjp
        else:
            out.requires_grad = False
            out.node_id = None
            out._parents = ()
            out._vjp = None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.node_id = None
        out.op = "leaf"
        out._parents = ()
        out._vjp = None
        return out

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def constant(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --- broadcasting helpers -------------------------------------------------


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def sum_to(x: Tensor, shape: tuple) -> Tensor:
    """Reduce ``x`` by summation to a shape it was broadcast from."""
    shape = tuple(shape)
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and x.shape[i + lead] != 1
    )
    data = x.data.sum(axis=axes, keepdims=True)
    if lead:
        data = data.reshape(data.shape[lead:])
    src_shape = x.shape

    def vjp(g):
        return (broadcast_to(g, src_shape),)

    return Tensor._result(data.reshape(shape), (x,), vjp, "sum_to")


def broadcast_to(x: Tensor, shape: tuple) -> Tensor:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    data = np.broadcast_to(x.data, shape).copy()
    src_shape = x.shape

    def vjp(g):
        return (sum_to(g, src_shape),)

    return Tensor._result(data, (x,), vjp, "broadcast_to")


# --- elementwise ------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape

    def vjp(g):
        return sum_to(g, sa), sum_to(g, sb)

    return Tensor._result(a.data + b.data, (a, b), vjp, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape

    def vjp(g):
        return sum_to(g, sa), sum_to(neg(g), sb)

    return Tensor._result(a.data - b.data, (a, b), vjp, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "mul")
    sa, sb = a.shape, b.shape

    def vjp(g):
        ga = sum_to(mul(g, b), sa) if a.requires_grad else None
        gb = sum_to(mul(g, a), sb) if b.requires_grad else None
        return ga, gb

    return Tensor._result(a.data * b.data, (a, b), vjp, "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "div")
    if np.any(b.data == 0):
        raise NonFiniteError("div: division by zero")
    sa, sb = a.shape, b.shape

    def vjp(g):
        ga = sum_to(div(g, b), sa) if a.requires_grad else None
        gb = sum_to(neg(div(mul(g, a), mul(b, b))), sb) if b.requires_grad else None
        return ga, gb

    return Tensor._result(a.data / b.data, (a, b), vjp, "div")


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def vjp(g):
        return (neg(g),)

    return Tensor._result(-a.data, (a,), vjp, "neg")


def exp(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        data = np.exp(a.data)

    def vjp(g):
        return (mul(g, out),)

    out = Tensor._result(data, (a,), vjp, "exp")
    return out


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0):
        raise NonFiniteError("log: non-positive input")

    def vjp(g):
        return (div(g, a),)

    return Tensor._result(np.log(a.data), (a,), vjp, "log")


def tanh(a) -> Tensor:
    a = _as_tensor(a)

    def vjp(g):
        return (mul(g, sub(1.0, mul(out, out))),)

    out = Tensor._result(np.tanh(a.data), (a,), vjp, "tanh")
    return out


def relu(a) -> Tensor:
    """ReLU.  Its second derivative is zero almost everywhere, so mixed
    partials routed through the gate vanish; prefer tanh on meta-gradient
    paths."""
    a = _as_tensor(a)
    mask = Tensor((a.data > 0).astype(np.float64))

    def vjp(g):
        return (mul(g, mask),)

    return Tensor._result(a.data * mask.data, (a,), vjp, "relu")


def activation(a, kind: str) -> Tensor:
    if kind == "tanh":
        return tanh(a)
    if kind == "relu":
        return relu(a)
    raise ValueError(f"unknown activation {kind!r}")


# --- structural -----------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def vjp(g):
        ga = matmul(g, transpose(b)) if a.requires_grad else None
        gb = matmul(transpose(a), g) if b.requires_grad else None
        return ga, gb

    return Tensor._result(a.data @ b.data, (a, b), vjp, "matmul")


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {a.shape}")

    def vjp(g):
        return (transpose(g),)

    return Tensor._result(a.data.T.copy(), (a,), vjp, "transpose")


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {shape}") from None
    src_shape = a.shape

    def vjp(g):
        return (reshape(g, src_shape),)

    return Tensor._result(data.copy(), (a,), vjp, "reshape")


def take(a, key) -> Tensor:
    """Basic or advanced indexing (``a[key]``); the VJP scatter-adds."""
    a = _as_tensor(a)
    try:
        data = a.data[key]
    except IndexError as exc:
        raise ShapeError(f"slice: bad index for shape {a.shape}: {exc}") from None
    src_shape = a.shape

    def vjp(g):
        return (scatter_add(g, key, src_shape),)

    return Tensor._result(np.array(data, dtype=np.float64), (a,), vjp, "slice")


def scatter_add(g, key, shape) -> Tensor:
    """Zeros of ``shape`` with ``g`` added at ``key``; adjoint of :func:`take`."""
    g = _as_tensor(g)
    data = np.zeros(shape)
    np.add.at(data, key, g.data)

    def vjp(h):
        return (take(h, key),)

    return Tensor._result(data, (g,), vjp, "scatter_add")


# --- reductions -----------------------------------------------------------


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = _as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    data = a.data.sum(axis=axes, keepdims=True)
    kept_shape = data.shape
    if not keepdims:
        data = data.reshape([s for i, s in enumerate(a.shape) if i not in axes])
    src_shape = a.shape

    def vjp(g):
        return (broadcast_to(reshape(g, kept_shape), src_shape),)

    return Tensor._result(data, (a,), vjp, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    if count == 0:
        raise ShapeError(f"mean: empty reduction over shape {a.shape}")
    return mul(sum(a, axis=axes, keepdims=keepdims), 1.0 / count)


def l2_norm_squared(a) -> Tensor:
    a = _as_tensor(a)

    def vjp(g):
        return (mul(mul(g, 2.0), a),)

    return Tensor._result(np.array(np.dot(a.data.ravel(), a.data.ravel())), (a,), vjp, "l2_norm_squared")


# --- classification -------------------------------------------------------


def softmax(logits) -> Tensor:
    """Row-wise softmax of a (batch, classes) matrix."""
    logits = _as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"softmax: expected (batch, classes), got {logits.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    data = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        gs = mul(g, out)
        return (sub(gs, mul(out, sum(gs, axis=1, keepdims=True))),)

    out = Tensor._result(data, (logits,), vjp, "softmax")
    return out


def softmax_cross_entropy(logits, labels, reduction: str = "mean") -> Tensor:
    """Cross-entropy of row-wise softmax against integer labels.

    ``reduction`` is ``"mean"`` or ``"sum"`` over the batch.
    """
    logits = _as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: expected (batch, classes), got {logits.shape}")
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    if n and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range [0, {k})")
    labels = labels.astype(np.int64)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    per_example = lse - z[np.arange(n), labels]
    scale = 1.0 / n if reduction == "mean" else 1.0
    onehot = np.zeros((n, k))
    onehot[np.arange(n), labels] = 1.0
    onehot_t = Tensor(onehot)

    def vjp(g):
        diff = sub(softmax(logits), onehot_t)
        return (mul(diff, mul(g, scale)),)

    return Tensor._result(np.array(per_example.sum() * scale), (logits,), vjp, "softmax_cross_entropy")


# --- reverse pass ---------------------------------------------------------


def _reachable(root: Tensor) -> list[Tensor]:
    seen: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if not node.requires_grad or node.node_id in seen:
            continue
        seen[node.node_id] = node
        stack.extend(node._parents)
    return [seen[k] for k in sorted(seen, reverse=True)]


def backward(loss: Tensor, create_graph: bool = False) -> dict[int, Tensor]:
    """Gradients of a scalar ``loss`` w.r.t. every graph node it depends on.

    Returns ``{node_id: gradient}``.  Contributions from several consumers
    are summed in ascending consumer-id order.  With ``create_graph`` the
    gradients are graph nodes themselves and can be differentiated again.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    order = _reachable(loss)
    pending: dict[int, list[tuple[int, Tensor]]] = {loss.node_id: [(-1, Tensor(np.ones(loss.shape)))]}
    grads: dict[int, Tensor] = {}
    prev = _state.grad_enabled
    _state.grad_enabled = create_graph
    try:
        for node in order:
            parts = pending.pop(node.node_id, None)
            if not parts:
                continue
            parts.sort(key=lambda p: p[0])
            g = parts[0][1]
            for _, extra in parts[1:]:
                g = add(g, extra)
            grads[node.node_id] = g
            if node._vjp is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pending.setdefault(parent.node_id, []).append((node.node_id, pg))
    finally:
        _state.grad_enabled = prev
    return grads


def grad(loss: Tensor, inputs: Sequence[Tensor] | Tensor, create_graph: bool = False) -> list[Tensor]:
    """Gradients of ``loss`` w.r.t. ``inputs``; zeros for unreachable inputs."""
    single = isinstance(inputs, Tensor)
    inputs = [inputs] if single else list(inputs)
    gmap = backward(loss, create_graph=create_graph)
    out = []
    for x in inputs:
        g = gmap.get(x.node_id) if x.requires_grad else None
        out.append(g if g is not None else Tensor(np.zeros(x.shape)))
    return out[0] if single else out


# --- unrolled optimisation -----------------------------------------------


class UnrolledSGD:
    """Differentiable record of plain SGD steps ``theta <- theta - lr * dloss/dtheta``.

    Each inner gradient is computed with ``create_graph=True`` so that the
    final parameters remain a differentiable function of whatever the inner
    losses depended on (synthetic data, the learning rate).
    """

    def __init__(self, theta0: Tensor, lr):
        if not theta0.requires_grad:
            theta0 = Tensor(theta0.data, requires_grad=True)
        self.theta0 = theta0
        self.lr = lr
        self.params: list[Tensor] = [theta0]
        self.inner_grads: list[Tensor] = []
        self.losses: list[float] = []

    @property
    def theta(self) -> Tensor:
        return self.params[-1]

    @property
    def steps(self) -> int:
        return len(self.inner_grads)

    def step(self, loss_fn: Callable[[Tensor], Tensor], create_graph: bool = True) -> Tensor:
        theta = self.theta
        loss = loss_fn(theta)
        g = grad(loss, theta, create_graph=create_graph)
        self.inner_grads.append(g)
        self.losses.append(loss.item())
        new = sub(theta, mul(self.lr, g))
        if not new.requires_grad:
            new = Tensor(new.data, requires_grad=True)
        self.params.append(new)
        return new


def backward_through_update(outer_loss: Tensor, unrolled: UnrolledSGD, leaves: Iterable[Tensor]) -> list[Tensor]:
    """Meta-gradient of ``outer_loss`` w.r.t. ``leaves`` through ``unrolled``.

    Raises :class:`MetaGradientError` if any recorded inner gradient was
    computed without its own provenance (a detached step would silently
    drop every earlier step's contribution).
    """
    for i, g in enumerate(unrolled.inner_grads):
        if not g.requires_grad or g._vjp is None:
            raise MetaGradientError(f"meta-gradient path broken at inner step {i}")
    return grad(outer_loss, list(leaves))

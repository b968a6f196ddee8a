"""Dense float64 tensors with reverse-mode differentiation and SGD.

Every op records a node (tag, parents, backward closure) on its output when
any input requires grad. ``backward`` walks the graph in reverse topological
order and writes ``.grad`` on every reachable tensor that requires grad.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import numpy as np

from .errors import ContractError, DimensionError

OPS = (
    "matmul",
    "add",
    "add_bias",
    "relu",
    "scale",
    "sum_sq",
    "mean",
    "softmax_cross_entropy",
)


class Tensor:
    __slots__ = ("values", "requires_grad", "grad", "op", "parents", "_backward", "name")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        self.values = np.array(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.values) if self.requires_grad else None
        self.op: str | None = None
        self.parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def is_leaf(self) -> bool:
        return self.op is None

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.values.reshape(()))

    def detach(self) -> "Tensor":
        """Constant copy of the values; no graph edge back to ``self``."""
        return Tensor(self.values.copy())

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.values)

    def __repr__(self) -> str:
        tag = f", op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"


ArrayLike = Union[Tensor, np.ndarray, float, Sequence[float]]


def as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(values: np.ndarray, op: str, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(values)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = op
        out.parents = parents
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError("matmul", a.shape, b.shape)
    av, bv = a.values, b.values

    def backward(g):
        return (g @ bv.T, av.T @ g)

    return _make(av @ bv, "matmul", (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError("add", a.shape, b.shape)

    def backward(g):
        return (g, g)

    return _make(a.values + b.values, "add", (a, b), backward)


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Row-broadcast add of a length-n vector onto a (batch, n) matrix."""
    if x.values.ndim != 2 or bias.values.ndim != 1 or x.shape[1] != bias.shape[0]:
        raise DimensionError("add_bias", x.shape, bias.shape)

    def backward(g):
        return (g, g.sum(axis=0))

    return _make(x.values + bias.values, "add_bias", (x, bias), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.values > 0.0  # subgradient at exactly 0 is 0

    def backward(g):
        return (np.where(mask, g, 0.0),)

    return _make(np.where(mask, x.values, 0.0), "relu", (x,), backward)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward(g):
        return (g * c,)

    return _make(x.values * c, "scale", (x,), backward)


def sum_sq(x: Tensor) -> Tensor:
    xv = x.values

    def backward(g):
        return (2.0 * g * xv,)

    return _make(np.asarray(np.sum(xv * xv)), "sum_sq", (x,), backward)


def mean(x: Tensor) -> Tensor:
    n = x.values.size
    if n == 0:
        raise DimensionError("mean", x.shape)

    def backward(g):
        return (np.full(x.shape, g / n),)

    return _make(np.asarray(np.mean(x.values)), "mean", (x,), backward)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under softmax(``logits``)."""
    labels = np.asarray(labels)
    if logits.values.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError("softmax_cross_entropy", logits.shape, labels.shape)
    n, c = logits.shape
    if n == 0:
        raise DimensionError("softmax_cross_entropy", logits.shape, labels.shape)
    if labels.min() < 0 or labels.max() >= c:
        raise DimensionError("softmax_cross_entropy", logits.shape, labels.shape)
    z = logits.values - logits.values.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = np.mean(logsum - z[rows, labels])

    def backward(g):
        p = np.exp(z - logsum[:, None])
        p[rows, labels] -= 1.0
        return (p * (g / n),)

    return _make(np.asarray(loss), "softmax_cross_entropy", (logits,), backward)


def forward_op(op: str, inputs: Sequence[Tensor], **kwargs) -> Tensor:
    """Tag-dispatched entry point over the op set in ``OPS``."""
    table = {
        "matmul": matmul,
        "add": add,
        "add_bias": add_bias,
        "relu": relu,
        "sum_sq": sum_sq,
        "mean": mean,
    }
    if op in table:
        return table[op](*inputs)
    if op == "scale":
        return scale(inputs[0], kwargs["c"])
    if op == "softmax_cross_entropy":
        return softmax_cross_entropy(inputs[0], kwargs["labels"])
    raise ValueError(f"unknown operation tag {op!r}")


# ---------------------------------------------------------------------------
# graph traversal


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` through recorded edges, parents first."""
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
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def reachable_leaves(root: Tensor) -> list[Tensor]:
    return [t for t in topological_order(root) if t.is_leaf and t.requires_grad]


def backward(loss: Tensor, accumulate: bool = False) -> None:
    """Populate ``.grad`` with d(loss)/d(tensor) for every reachable tensor.

    Leaf grads are zeroed first unless ``accumulate`` is set, in which case
    the new contribution is added to whatever is already stored.
    """
    if loss.values.size != 1 or loss.values.ndim > 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = topological_order(loss)
    for t in order:
        if t.requires_grad and (not t.is_leaf or not accumulate):
            t.grad = np.zeros_like(t.values)
    if not loss.requires_grad:
        return
    pending = {id(loss): np.ones_like(loss.values)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None or not node.requires_grad:
            continue
        if node.is_leaf:
            node.grad = node.grad + g
            continue
        node.grad = g
        for parent, pg in zip(node.parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pending[key] + pg if key in pending else pg


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class SgdState:
    """SGD hyperparameters plus per-parameter velocity buffers.

    ``lr`` is either a constant or a callable mapping a step index to a
    positive learning rate.
    """

    lr: Union[float, Callable[[int], float]] = 0.007
    momentum: float = 0.9
    weight_decay: float = 0.0
    velocity: list = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0.0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")

    def rate(self, step_index: int) -> float:
        eta = self.lr(step_index) if callable(self.lr) else self.lr
        if not eta > 0.0:
            raise ValueError(f"learning rate must be positive, got {eta} at step {step_index}")
        return float(eta)


def step_decay(base: float, milestones: Sequence[int] = (), gamma: float = 0.2) -> Callable[[int], float]:
    """Learning rate ``base * gamma**(number of milestones <= step)``."""
    ms = sorted(int(m) for m in milestones)

    def lr(step: int) -> float:
        return base * gamma ** sum(step >= m for m in ms)

    return lr


def sgd_step(params: Sequence[Tensor], state: SgdState, step_index: int) -> None:
    if not state.velocity:
        state.velocity = [np.zeros_like(p.values) for p in params]
    if len(state.velocity) != len(params):
        raise ContractError("velocity buffers do not match the parameter list")
    eta = state.rate(step_index)
    for i, p in enumerate(params):
        if p.grad is None:
            raise ContractError(f"parameter {p.name or i} has no grad")
        v = state.velocity[i]
        if v.shape != p.shape:
            raise ContractError(f"velocity shape {v.shape} != parameter shape {p.shape}")
        g = p.grad + state.weight_decay * p.values if state.weight_decay else p.grad
        v = state.momentum * v + g
        state.velocity[i] = v
        p.values = p.values - eta * v
        p.grad = np.zeros_like(p.values)


def orthogonal_init(rows: int, cols: int, gain: float, rng: np.random.Generator) -> Tensor:
    """``gain`` times the (semi-)orthogonal QR factor of a Gaussian matrix."""
    if rows < 1 or cols < 1:
        raise ValueError(f"extents must be >= 1, got {rows}x{cols}")
    if not gain > 0:
        raise ValueError(f"gain must be positive, got {gain}")
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.where(np.diag(r) < 0, -1.0, 1.0)
    if rows < cols:
        q = q.T
    return Tensor(gain * q, requires_grad=True)

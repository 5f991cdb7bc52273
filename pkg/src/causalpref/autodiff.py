"""Reverse-mode differentiation over dense float64 arrays.

Every operation builds a :class:`Node` that keeps its parents together
with a closure mapping the node's upstream gradient to the parent's
contribution.  :func:`backward` walks the graph once in reverse
topological order.

The module also hosts the pieces the reward models are built from:
seeded MLPs with exact GELU, the Adam optimiser, gradient reversal and a
flat binary checkpoint format.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import ndtr

_SQRT_2PI = np.sqrt(2.0 * np.pi)

CHECKPOINT_MAGIC = b"CPLW1"


class Node:
    """A value in the computation graph."""

    __slots__ = ("value", "grad", "parents", "requires_grad", "name")

    def __init__(
        self,
        value,
        parents: Sequence[tuple["Node", Callable[[np.ndarray], np.ndarray]]] = (),
        requires_grad: bool | None = None,
        name: str = "",
    ):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.parents = tuple(parents)
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p, _ in self.parents)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Node{label}(shape={self.value.shape})"

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    # operator sugar
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(value, name: str = "") -> Node:
    """A trainable leaf."""
    return Node(np.array(value, dtype=np.float64), requires_grad=True, name=name)


def constant(value) -> Node:
    return Node(value, requires_grad=False)


def _as_node(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


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
        for parent, _ in node.parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Node) -> dict[Node, np.ndarray]:
    """Populate ``grad`` on every node reachable from a scalar ``root``.

    Gradients are recomputed from zero on each call, so running
    ``backward`` twice on the same graph yields identical results.
    Returns a mapping from each trainable leaf to its gradient.
    """
    if root.value.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.value.shape}")
    order = _topological_order(root)
    for node in order:
        node.grad = np.zeros_like(node.value)
    root.grad = np.ones_like(root.value)
    leaves: dict[Node, np.ndarray] = {}
    for node in reversed(order):
        for parent, local in node.parents:
            if parent.requires_grad:
                parent.grad = parent.grad + local(node.grad)
        if not node.parents and node.requires_grad:
            leaves[node] = node.grad
    return leaves


# ---------------------------------------------------------------------------
# elementwise and linear-algebra ops


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # only row-broadcast of a vector (bias) and scalar broadcast are used
    if grad.shape == shape:
        return grad
    if len(shape) == 0 or (len(shape) and int(np.prod(shape)) == 1):
        return np.sum(grad).reshape(shape)
    return grad.sum(axis=tuple(range(grad.ndim - len(shape)))).reshape(shape)


def add(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    return Node(
        a.value + b.value,
        [(a, lambda g: _unbroadcast(g, a.shape)), (b, lambda g: _unbroadcast(g, b.shape))],
    )


def sub(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    return Node(
        a.value - b.value,
        [(a, lambda g: _unbroadcast(g, a.shape)), (b, lambda g: -_unbroadcast(g, b.shape))],
    )


def mul(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    return Node(
        a.value * b.value,
        [
            (a, lambda g: _unbroadcast(g * b.value, a.shape)),
            (b, lambda g: _unbroadcast(g * a.value, b.shape)),
        ],
    )


def neg(a: Node) -> Node:
    return Node(-a.value, [(a, lambda g: -g)])


def matmul(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ValueError("matmul expects two matrices")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return Node(
        a.value @ b.value,
        [(a, lambda g: g @ b.value.T), (b, lambda g: a.value.T @ g)],
    )


def total(a: Node) -> Node:
    """Sum of all entries, as a scalar node."""
    return Node(np.sum(a.value), [(a, lambda g: np.broadcast_to(g, a.shape).copy())])


def mean(a: Node) -> Node:
    n = a.value.size
    return Node(np.mean(a.value), [(a, lambda g: np.full(a.shape, g / n))])


def column(a: Node, j: int) -> Node:
    """Column ``j`` of a matrix as a vector."""
    def local(g):
        out = np.zeros_like(a.value)
        out[:, j] = g
        return out

    return Node(a.value[:, j], [(a, local)])


def rows(a: Node, index: np.ndarray) -> Node:
    """Gather rows of a matrix (or entries of a vector)."""
    index = np.asarray(index)

    def local(g):
        out = np.zeros_like(a.value)
        np.add.at(out, index, g)
        return out

    return Node(a.value[index], [(a, local)])


def stack_rows(a: Node, b: Node) -> Node:
    """Concatenate two matrices along the row axis."""
    n = a.shape[0]
    return Node(
        np.concatenate([a.value, b.value], axis=0),
        [(a, lambda g: g[:n]), (b, lambda g: g[n:])],
    )


def tanh(a: Node) -> Node:
    out = np.tanh(a.value)
    return Node(out, [(a, lambda g: g * (1.0 - out * out))])


def stable_sigmoid(x: np.ndarray) -> np.ndarray:
    """Logistic function, branching on sign so neither tail overflows."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def stable_log_sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))


def sigmoid(a: Node) -> Node:
    out = stable_sigmoid(a.value)
    return Node(out, [(a, lambda g: g * out * (1.0 - out))])


def log_sigmoid(a: Node) -> Node:
    return Node(
        stable_log_sigmoid(a.value),
        [(a, lambda g: g * stable_sigmoid(-a.value))],
    )


def gelu_array(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x * ndtr(x)


def gelu(a) -> Node:
    """Exact GELU, x * Phi(x)."""
    a = _as_node(a)
    x = a.value
    cdf = ndtr(x)
    pdf = np.exp(-0.5 * x * x) / _SQRT_2PI
    return Node(x * cdf, [(a, lambda g: g * (cdf + x * pdf))])


def grad_reverse(a: Node, lam: float = 1.0) -> Node:
    """Identity forward; multiplies the incoming gradient by ``-lam`` backward."""
    if lam < 0:
        raise ValueError(f"gradient reversal strength must be >= 0, got {lam}")
    scale = -float(lam)
    return Node(a.value.copy(), [(a, lambda g: scale * g)])


def bce_with_logits(logits: Node, targets) -> Node:
    """Summed binary cross-entropy of ``targets`` under ``sigmoid(logits)``."""
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != logits.shape:
        raise ValueError(f"target shape {t.shape} != logits shape {logits.shape}")
    # -[t log s(z) + (1 - t) log s(-z)]
    return neg(total(add(mul(log_sigmoid(logits), t), mul(log_sigmoid(neg(logits)), 1.0 - t))))


# ---------------------------------------------------------------------------
# layers


class Activation(str, Enum):
    GELU = "gelu"
    IDENTITY = "identity"


@dataclass(frozen=True)
class MlpSpec:
    """Widths include the input width: ``[in, hidden..., out]``."""

    widths: tuple[int, ...]
    activation: Activation = Activation.GELU
    seed: int = 0

    def __post_init__(self):
        widths = tuple(int(w) for w in self.widths)
        if len(widths) < 2:
            raise ValueError("an MLP needs an input width and at least one layer")
        if any(w <= 0 for w in widths):
            raise ValueError(f"widths must be positive, got {widths}")
        object.__setattr__(self, "widths", widths)
        object.__setattr__(self, "activation", Activation(self.activation))

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1


class Linear:
    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator, name: str = ""):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        self.weight = parameter(rng.uniform(-bound, bound, size=(fan_in, fan_out)), f"{name}.weight")
        self.bias = parameter(np.zeros(fan_out), f"{name}.bias")

    def __call__(self, x: Node) -> Node:
        return add(matmul(x, self.weight), self.bias)

    def parameters(self) -> list[Node]:
        return [self.weight, self.bias]


class MLP:
    """Stack of linear layers with the activation between them (not after the last)."""

    def __init__(self, spec: MlpSpec, name: str = "mlp"):
        self.spec = spec
        rng = np.random.default_rng(spec.seed)
        self.layers = [
            Linear(a, b, rng, name=f"{name}.{i}")
            for i, (a, b) in enumerate(zip(spec.widths[:-1], spec.widths[1:]))
        ]

    def __call__(self, x) -> Node:
        h = _as_node(x)
        if h.value.ndim != 2 or h.shape[1] != self.spec.widths[0]:
            raise ValueError(f"expected input (*, {self.spec.widths[0]}), got {h.shape}")
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i < len(self.layers) - 1 and self.spec.activation is Activation.GELU:
                h = gelu(h)
        return h

    def parameters(self) -> list[Node]:
        return [p for layer in self.layers for p in layer.parameters()]

    def zero_(self) -> None:
        for p in self.parameters():
            p.value[...] = 0.0


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(state: AdamState, params: Sequence[Node], grads: Sequence[np.ndarray]) -> AdamState:
    """Apply one bias-corrected Adam update to ``params`` in place."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(p.value) for p in params]
        state.v = [np.zeros_like(p.value) for p in params]
    if len(state.m) != len(params):
        raise ValueError("optimizer state does not match parameter list")
    for p, g, m in zip(params, grads, state.m):
        if p.value.shape != np.shape(g) or m.shape != p.value.shape:
            raise ValueError(f"shape mismatch for {p.name or 'parameter'}: {p.value.shape} vs {np.shape(g)}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.value -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


# ---------------------------------------------------------------------------
# checkpoints


def save_arrays(path, arrays: Iterable[np.ndarray]) -> None:
    """Write arrays as: magic, count, then per array ndim, dims, LE float64 data."""
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(arrays)))
        for a in arrays:
            fh.write(struct.pack("<I", a.ndim))
            fh.write(struct.pack(f"<{a.ndim}I", *a.shape))
            fh.write(np.ascontiguousarray(a).astype("<f8").tobytes())


def load_arrays(path) -> list[np.ndarray]:
    data = Path(path).read_bytes()
    if data[:5] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    (count,) = struct.unpack_from("<I", data, 5)
    offset = 9
    out = []
    for _ in range(count):
        (ndim,) = struct.unpack_from("<I", data, offset)
        offset += 4
        shape = struct.unpack_from(f"<{ndim}I", data, offset)
        offset += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=offset).reshape(shape)
        offset += 8 * n
        out.append(arr.astype(np.float64))
    if offset != len(data):
        raise ValueError(f"{path}: {len(data) - offset} trailing bytes")
    return out

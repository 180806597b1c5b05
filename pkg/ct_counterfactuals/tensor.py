"""Dense float64 tensors with a define-by-run reverse-mode tape.

A `Tensor` wraps a numpy array. Tensors created by `Tape.watch` or produced by
an operation on a watched tensor carry a `node_id` on that tape; everything
else is a constant and never receives gradient. Operations record nothing when
all of their operands are constants, so work done on blocked values leaves no
trace on the tape.
"""

from __future__ import annotations

import logging
from collections.abc import Callable, Iterator, Mapping, Sequence
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .exceptions import InvalidValueError, ShapeMismatchError, TapeError

_LOGGER = logging.getLogger(__name__)

Vjp = Callable[[np.ndarray], Sequence[np.ndarray]]


class Tensor:
    """A float64 array, optionally attached to a tape node."""

    __slots__ = ("value", "node_id", "tape")

    def __init__(
        self,
        value,
        node_id: int | None = None,
        tape: Tape | None = None,
    ) -> None:
        """Initialise."""
        self.value = np.asarray(value, dtype=np.float64)
        self.node_id = node_id
        self.tape = tape if node_id is not None else None

    @property
    def shape(self) -> tuple[int, ...]:
        """Dimension sizes."""
        return self.value.shape

    @property
    def data(self) -> np.ndarray:
        """Row-major flat view of the values."""
        return self.value.reshape(-1)

    @property
    def tracked(self) -> bool:
        """Return True if gradients can flow into this tensor."""
        return self.node_id is not None

    def item(self) -> float:
        """Return the single value of a scalar tensor."""
        if self.value.size != 1:
            raise ShapeMismatchError("item() needs a scalar", (), self.shape)
        return float(self.value.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, node_id={self.node_id})"


@dataclass(frozen=True, slots=True)
class Node:
    """One recorded operation.

    `parents` is aligned with the operation's operands; constant operands
    are recorded as None. The vjp closure holds the saved forward values.
    """

    kind: str
    parents: tuple[int | None, ...]
    vjp: Vjp | None


class Tape:
    """Append-only record of the operations of one forward pass."""

    def __init__(self) -> None:
        """Initialise."""
        self.nodes: list[Node] = []
        self.grads: dict[int, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def watch(self, value) -> Tensor:
        """Create a leaf tensor that will receive gradients."""
        return self._append(Node("leaf", (), None), np.asarray(value, dtype=np.float64))

    def _append(self, node: Node, value: np.ndarray) -> Tensor:
        self.nodes.append(node)
        return Tensor(value, node_id=len(self.nodes) - 1, tape=self)


class Gradients(Mapping[int, np.ndarray]):
    """Gradient map from node id to gradient array."""

    def __init__(self, grads: dict[int, np.ndarray]) -> None:
        """Initialise."""
        self._grads = grads

    def __getitem__(self, node_id: int) -> np.ndarray:
        return self._grads[node_id]

    def __iter__(self) -> Iterator[int]:
        return iter(self._grads)

    def __len__(self) -> int:
        return len(self._grads)

    def wrt(self, tensor: Tensor) -> np.ndarray:
        """Gradient for a tensor; exact zeros if none flowed into it."""
        if tensor.node_id is not None and tensor.node_id in self._grads:
            return self._grads[tensor.node_id]
        return np.zeros(tensor.shape, dtype=np.float64)


def constant(value) -> Tensor:
    """Wrap an array as a constant tensor."""
    return Tensor(value)


def _record(
    kind: str, operands: Sequence[Tensor], value: np.ndarray, vjp: Vjp
) -> Tensor:
    tapes = {id(t.tape): t.tape for t in operands if t.tracked}
    if not tapes:
        return Tensor(value)
    if len(tapes) > 1:
        raise TapeError(f"Operation {kind} mixes tensors from different tapes")
    (tape,) = tapes.values()
    assert tape is not None
    parents = tuple(t.node_id for t in operands)
    return tape._append(Node(kind, parents, vjp), value)


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{op} needs equal shapes", a.shape, b.shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise a + b."""
    _check_same_shape("add", a, b)
    return _record("add", (a, b), a.value + b.value, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise a - b."""
    _check_same_shape("sub", a, b)
    return _record("sub", (a, b), a.value - b.value, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise a * b."""
    _check_same_shape("mul", a, b)
    av, bv = a.value, b.value
    return _record("mul", (a, b), av * bv, lambda g: (g * bv, g * av))


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply every entry by the scalar c."""
    c = float(c)
    return _record("scale", (a,), a.value * c, lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of a [m x k] and b [k x n]."""
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError("matmul inner dimensions disagree", a.shape, b.shape)
    av, bv = a.value, b.value
    return _record("matmul", (a, b), av @ bv, lambda g: (g @ bv.T, av.T @ g))


def relu(a: Tensor) -> Tensor:
    """Rectifier; the gradient at exactly zero is zero."""
    mask = a.value > 0
    return _record("relu", (a,), np.where(mask, a.value, 0.0), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    """Logistic function 1 / (1 + exp(-a))."""
    s = expit(a.value)
    return _record("sigmoid", (a,), s, lambda g: (g * s * (1.0 - s),))


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(a)), computed without overflow."""
    av = a.value
    return _record(
        "softplus", (a,), np.logaddexp(0.0, av), lambda g: (g * expit(av),)
    )


def sum_all(a: Tensor) -> Tensor:
    """Sum of all entries as a scalar tensor."""
    shape = a.shape
    return _record(
        "sum", (a,), np.asarray(a.value.sum()), lambda g: (np.full(shape, g.item()),)
    )


def mean_abs(a: Tensor) -> Tensor:
    """Mean of absolute values as a scalar tensor."""
    av = a.value
    n = av.size
    return _record(
        "mean_abs",
        (a,),
        np.asarray(np.abs(av).sum() / n),
        lambda g: (np.sign(av) * (g.item() / n),),
    )


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Same values, new shape."""
    shape = tuple(shape)
    if int(np.prod(shape)) != a.value.size:
        raise ShapeMismatchError("reshape changes the element count", a.shape, shape)
    old = a.shape
    return _record("reshape", (a,), a.value.reshape(shape), lambda g: (g.reshape(old),))


def concat_slices(slices: Sequence[Tensor]) -> Tensor:
    """Stack H x W slices along a new leading axis."""
    if not slices:
        raise InvalidValueError("concat_slices needs at least one slice")
    first = slices[0].shape
    for s in slices[1:]:
        if s.shape != first:
            raise ShapeMismatchError("inconsistent slice shapes", first, s.shape)
    stacked = np.stack([s.value for s in slices])
    return _record(
        "concat", tuple(slices), stacked, lambda g: tuple(g[i] for i in range(len(g)))
    )


def take_slice(v: Tensor, index: int) -> Tensor:
    """The index-th slice of a D x H x W tensor."""
    shape = v.shape

    def vjp(g: np.ndarray) -> tuple[np.ndarray]:
        full = np.zeros(shape, dtype=np.float64)
        full[index] = g
        return (full,)

    return _record("slice", (v,), v.value[index], vjp)


def split_slices(v: Tensor) -> list[Tensor]:
    """Inverse of concat_slices."""
    if v.value.ndim != 3:
        raise ShapeMismatchError("split_slices needs a D x H x W tensor", (), v.shape)
    return [take_slice(v, i) for i in range(v.shape[0])]


def block_gradient(a: Tensor) -> Tensor:
    """Same values, but a constant: nothing upstream is reachable by backward."""
    return Tensor(a.value)


def backward(tape: Tape, output: Tensor) -> Gradients:
    """Propagate d(output)/d(node) from a scalar output back to the leaves."""
    if output.value.size != 1:
        raise TapeError(f"backward needs a scalar output, got shape {output.shape}")
    if output.node_id is None:
        tape.grads = {}
        return Gradients(tape.grads)
    if output.tape is not tape:
        raise TapeError("Output tensor was not recorded on this tape")

    grads: dict[int, np.ndarray] = {
        output.node_id: np.ones(output.shape, dtype=np.float64)
    }
    for node_id in range(output.node_id, -1, -1):
        upstream = grads.get(node_id)
        node = tape.nodes[node_id]
        if upstream is None or node.vjp is None:
            continue
        for parent, grad in zip(node.parents, node.vjp(upstream)):
            if parent is None:
                continue
            if parent in grads:
                grads[parent] = grads[parent] + grad
            else:
                grads[parent] = np.asarray(grad, dtype=np.float64)

    _LOGGER.debug(f"Backward pass over {output.node_id + 1} nodes")
    tape.grads = grads
    return Gradients(grads)


def finite_diff_gradient(
    fn: Callable[[Tensor], Tensor | float],
    x: Tensor | np.ndarray,
    step: float,
) -> Tensor:
    """Central-difference gradient of a scalar function, entry by entry."""
    if step <= 0:
        raise InvalidValueError(f"Finite-difference step must be positive, got {step}")
    base = np.array(x.value if isinstance(x, Tensor) else x, dtype=np.float64)
    flat = base.reshape(-1)
    grad = np.zeros_like(flat)

    def evaluate(values: np.ndarray) -> float:
        result = fn(Tensor(values.reshape(base.shape)))
        return result.item() if isinstance(result, Tensor) else float(result)

    for i in range(flat.size):
        plus = flat.copy()
        minus = flat.copy()
        plus[i] += step
        minus[i] -= step
        grad[i] = (evaluate(plus) - evaluate(minus)) / (2.0 * step)
    return Tensor(grad.reshape(base.shape))

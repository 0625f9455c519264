"""Reverse-mode differentiation over dense float64 arrays.

A ``Tape`` records every operation applied to tracked tensors. Calling
``Tape.backward`` on a scalar output walks the records in reverse creation
order and returns the adjoint of every tracked leaf. Operations accept single
vectors as well as row-stacked batches (B x n), so a whole minibatch, a PGD
batch or an entire pair set is differentiated in one pass.
"""
import logging
from collections import Counter
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

ACTIVATIONS = ("sigmoid", "relu", "identity")
LOSSES = ("mse", "cross_entropy")
REDUCTIONS = ("mean", "sum")

ArrayLike = Union[np.ndarray, float, Sequence[float]]


class DimensionError(ValueError):
    """Operand shapes do not fit the operation."""


class ContractError(ValueError):
    """A caller-side precondition was violated."""


class Tensor:
    """A float64 array, optionally recorded on a tape.

    Tensors created with ``Tape.variable`` (and every result computed from
    them) are tracked; everything else is a constant and never receives an
    adjoint.
    """

    __slots__ = ("value", "tape", "node_id")

    def __init__(self, value: ArrayLike, tape: Optional["Tape"] = None, node_id: Optional[int] = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.tape = tape
        self.node_id = node_id

    @property
    def tracked(self) -> bool:
        return self.node_id is not None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    def __repr__(self):
        kind = f"node={self.node_id}" if self.tracked else "constant"
        return f"<Tensor(shape={self.shape}, {kind})>"

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
        return scale(self, -1.0)


class _Record:
    __slots__ = ("parents", "backward")

    def __init__(self, parents: Tuple[Tensor, ...], backward: Optional[Callable]):
        self.parents = parents
        self.backward = backward


class Gradients:
    """Adjoints produced by one backward pass, keyed by tensor."""

    def __init__(self, adjoints: Dict[int, np.ndarray]):
        self._adjoints = adjoints

    def __getitem__(self, tensor: Tensor) -> np.ndarray:
        if not tensor.tracked or tensor.node_id not in self._adjoints:
            raise KeyError(f"no adjoint recorded for {tensor!r}")
        return self._adjoints[tensor.node_id]

    def __contains__(self, tensor: Tensor) -> bool:
        return tensor.tracked and tensor.node_id in self._adjoints

    def get(self, tensor: Tensor, default=None):
        return self[tensor] if tensor in self else default

    def __len__(self):
        return len(self._adjoints)


class Tape:
    """Single-use record of tracked operations."""

    def __init__(self):
        self._records: List[_Record] = []
        self._leaves: Dict[int, Tuple[int, ...]] = {}
        self._consumed = False
        self.diagnostics: Counter = Counter()

    def variable(self, value: ArrayLike) -> Tensor:
        """Create a tracked leaf."""
        node_id = len(self._records)
        self._records.append(_Record((), None))
        leaf = Tensor(np.array(value, dtype=np.float64), self, node_id)
        self._leaves[node_id] = leaf.shape
        return leaf

    @staticmethod
    def constant(value: ArrayLike) -> Tensor:
        """Create an untracked tensor; it never receives an adjoint."""
        return Tensor(value)

    def _record(self, value: np.ndarray, parents: Tuple[Tensor, ...], backward: Callable) -> Tensor:
        if not any(p.tracked for p in parents):
            return Tensor(value)
        node_id = len(self._records)
        self._records.append(_Record(parents, backward))
        return Tensor(value, self, node_id)

    def backward(self, output: Tensor) -> Gradients:
        """Propagate adjoints from a scalar output back to every tracked leaf.

        Args:
            output: Scalar tensor produced by operations on this tape

        Returns:
            Gradients mapping each tracked leaf to its adjoint. Leaves that the
            output does not depend on get a zero adjoint; constants get none.
        """
        if self._consumed:
            raise ContractError("backward() already ran on this tape")
        if output.tape is not self or not output.tracked:
            raise ContractError("output was not produced by tracked operations on this tape")
        if output.value.size != 1 or output.value.ndim > 1:
            raise ContractError(f"backward() needs a scalar output, got shape {output.shape}")
        self._consumed = True

        adjoints: Dict[int, np.ndarray] = {output.node_id: np.ones_like(output.value)}
        for node_id in range(output.node_id, -1, -1):
            record = self._records[node_id]
            g = adjoints.get(node_id)
            if g is None or record.backward is None:
                continue
            parent_grads = record.backward(g)
            for parent, pg in zip(record.parents, parent_grads):
                if not parent.tracked or pg is None:
                    continue
                if parent.node_id in adjoints:
                    adjoints[parent.node_id] = adjoints[parent.node_id] + pg
                else:
                    adjoints[parent.node_id] = pg

        return Gradients({
            leaf: adjoints[leaf] if leaf in adjoints else np.zeros(shape)
            for leaf, shape in self._leaves.items()
        })


def _lift(value: Union[Tensor, ArrayLike]) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _tape_of(*tensors: Tensor) -> Optional[Tape]:
    for t in tensors:
        if t.tracked:
            return t.tape
    return None


def _emit(value: np.ndarray, parents: Tuple[Tensor, ...], backward: Callable) -> Tensor:
    tape = _tape_of(*parents)
    if tape is None:
        return Tensor(value)
    return tape._record(value, parents, backward)


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum an adjoint down to the shape of a broadcast operand."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from exc


# Elementwise kernels shared with the untraced evaluation paths.

def sigmoid_values(z: np.ndarray) -> np.ndarray:
    """Overflow-free logistic function, branching on the sign of z."""
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    positive = z >= 0
    out[positive] = 1.0 / (1.0 + np.exp(-z[positive]))
    ez = np.exp(z[~positive])
    out[~positive] = ez / (1.0 + ez)
    return out


def relu_values(z: np.ndarray) -> np.ndarray:
    return np.maximum(np.asarray(z, dtype=np.float64), 0.0)


def activation_values(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "sigmoid":
        return sigmoid_values(z)
    if kind == "relu":
        return relu_values(z)
    if kind == "identity":
        return np.asarray(z, dtype=np.float64)
    raise ValueError(f"unknown activation '{kind}', expected one of {ACTIVATIONS}")


def log_softmax_values(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_values(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax_values(logits))


# Differentiable operations.

def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit(a.value + b.value, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _emit(a.value - b.value, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "mul")

    def backward(g):
        return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)

    return _emit(a.value * b.value, (a, b), backward)


def div(a, b) -> Tensor:
    """Elementwise quotient; the caller guarantees b has no zeros."""
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "div")
    out = a.value / b.value

    def backward(g):
        return _unbroadcast(g / b.value, a.shape), _unbroadcast(-g * out / b.value, b.shape)

    return _emit(out, (a, b), backward)


def scale(a, factor: float) -> Tensor:
    a = _lift(a)
    factor = float(factor)

    def backward(g):
        return (g * factor,)

    return _emit(a.value * factor, (a,), backward)


def total(a) -> Tensor:
    """Sum of all entries."""
    a = _lift(a)

    def backward(g):
        return (np.broadcast_to(g, a.shape).copy(),)

    return _emit(np.asarray(a.value.sum()), (a,), backward)


def mean(a) -> Tensor:
    a = _lift(a)
    n = a.value.size

    def backward(g):
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _emit(np.asarray(a.value.mean()), (a,), backward)


def square_sum(a) -> Tensor:
    """Sum of squared entries."""
    a = _lift(a)

    def backward(g):
        return (2.0 * g * a.value,)

    return _emit(np.asarray(np.sum(a.value * a.value)), (a,), backward)


def matvec(w, x) -> Tensor:
    """Matrix-vector product W x; a row batch X (B x n) gives X W^T."""
    w, x = _lift(w), _lift(x)
    if w.value.ndim != 2:
        raise DimensionError(f"matvec: expected a matrix, got shape {w.shape}")
    if x.value.ndim not in (1, 2) or x.shape[-1] != w.shape[1]:
        raise DimensionError(f"matvec: matrix {w.shape} cannot act on {x.shape}")

    def backward(g):
        if x.value.ndim == 1:
            return np.outer(g, x.value), g @ w.value
        return g.T @ x.value, g @ w.value

    return _emit(x.value @ w.value.T, (w, x), backward)


def activation(kind: str, z) -> Tensor:
    """Elementwise sigmoid, relu or identity.

    The relu derivative at 0 is taken as 0.
    """
    z = _lift(z)
    out = activation_values(kind, z.value)
    if kind == "identity":
        return z

    if kind == "sigmoid":
        def backward(g):
            return (g * out * (1.0 - out),)
    else:
        def backward(g):
            return (g * (z.value > 0.0),)

    return _emit(out, (z,), backward)


def euclidean_norm(v) -> Tensor:
    """Euclidean norm of a vector, or of every row of a matrix.

    At v = 0 the zero vector is used as subgradient and the event is counted
    in ``tape.diagnostics['zero_norm_subgradients']``.
    """
    v = _lift(v)
    out = np.sqrt(np.sum(v.value * v.value, axis=-1))
    tape = _tape_of(v)

    def backward(g):
        safe = np.where(out > 0.0, out, 1.0)
        zero = out == 0.0
        if np.any(zero):
            count = int(np.count_nonzero(zero))
            tape.diagnostics["zero_norm_subgradients"] += count
            logger.debug("zero subgradient used for %d vanishing norm(s)", count)
        grad = v.value / safe[..., None]
        grad[zero] = 0.0
        return (grad * np.asarray(g)[..., None],)

    return _emit(out, (v,), backward)


def loss(kind: str, prediction, target: ArrayLike, reduction: str = "mean") -> Tensor:
    """Per-sample loss, reduced over the batch.

    Args:
        kind: "mse" (squared Euclidean distance) or "cross_entropy" (computed
            from logits with a stable log-sum-exp)
        prediction: Vector or row batch of predictions / logits
        target: Constant target of the same shape; one-hot or probability
            rows for cross-entropy
        reduction: "mean" or "sum" over batch rows; ignored for a vector

    Returns:
        Non-negative scalar tensor.
    """
    prediction = _lift(prediction)
    target = np.asarray(target, dtype=np.float64)
    if kind not in LOSSES:
        raise ValueError(f"unknown loss '{kind}', expected one of {LOSSES}")
    if reduction not in REDUCTIONS:
        raise ValueError(f"unknown reduction '{reduction}', expected one of {REDUCTIONS}")
    if prediction.shape != target.shape:
        raise DimensionError(f"loss: prediction {prediction.shape} vs target {target.shape}")

    p = prediction.value
    if kind == "mse":
        diff = p - target
        per_sample = np.sum(diff * diff, axis=-1)
        local_grad = 2.0 * diff
    else:
        if np.any(target < 0.0) or not np.allclose(target.sum(axis=-1), 1.0, rtol=0.0, atol=1e-9):
            raise ContractError("cross_entropy needs one-hot or probability targets")
        log_probs = log_softmax_values(p)
        per_sample = -np.sum(target * log_probs, axis=-1)
        local_grad = np.exp(log_probs) * target.sum(axis=-1, keepdims=True) - target

    if p.ndim == 1:
        value, weight = per_sample, 1.0
    elif reduction == "mean":
        value, weight = per_sample.mean(), 1.0 / p.shape[0]
    else:
        value, weight = per_sample.sum(), 1.0

    def backward(g):
        return (g * weight * local_grad,)

    return _emit(np.asarray(value), (prediction,), backward)

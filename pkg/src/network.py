"""Feed-forward networks: evaluation, gradients, Lipschitz bound, checkpoints."""
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from src import autodiff as ad
from src.autodiff import ContractError, DimensionError, Tape, Tensor

logger = logging.getLogger(__name__)

# Sharp Lipschitz constants of the supported activations (sigmoid: max of its derivative).
ACTIVATION_LIPSCHITZ = {"sigmoid": 0.25, "relu": 1.0, "identity": 1.0}

CHECKPOINT_MAGIC = b"CLIPCKPT"
CHECKPOINT_VERSION = 1
_PREAMBLE = struct.Struct("<8sII")  # magic, version, header length


class CheckpointError(ValueError):
    """A checkpoint file could not be loaded."""


class CorruptCheckpointError(CheckpointError):
    """Bad magic, unreadable header or truncated payload."""


class CheckpointVersionError(CheckpointError):
    """The file was written by a newer format version."""


class CheckpointDimensionError(CheckpointError):
    """Header dimensions or activations are inconsistent."""


@dataclass
class Layer:
    """Affine map followed by an elementwise activation."""

    weights: np.ndarray
    bias: np.ndarray
    activation: str = "identity"

    def __post_init__(self):
        self.weights = np.array(self.weights, dtype=np.float64, ndmin=2)
        self.bias = np.array(self.bias, dtype=np.float64).reshape(-1)
        if self.weights.ndim != 2:
            raise DimensionError(f"layer weights must be a matrix, got shape {self.weights.shape}")
        if self.weights.shape[0] != self.bias.shape[0]:
            raise DimensionError(
                f"weight rows ({self.weights.shape[0]}) != bias length ({self.bias.shape[0]})"
            )
        if self.activation not in ACTIVATION_LIPSCHITZ:
            raise ValueError(f"unknown activation '{self.activation}'")

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]


@dataclass
class Network:
    """Composition of layers; holds the parameters theta."""

    layers: List[Layer]

    def __post_init__(self):
        if not self.layers:
            raise DimensionError("a network needs at least one layer")
        for index, (prev, nxt) in enumerate(zip(self.layers, self.layers[1:]), start=1):
            if nxt.in_dim != prev.out_dim:
                raise DimensionError(
                    f"layer {index + 1} expects {nxt.in_dim} inputs but layer {index} emits {prev.out_dim}"
                )

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def dims(self) -> List[int]:
        return [self.input_dim] + [layer.out_dim for layer in self.layers]

    @property
    def activations(self) -> List[str]:
        return [layer.activation for layer in self.layers]

    def copy(self) -> "Network":
        return Network([Layer(l.weights.copy(), l.bias.copy(), l.activation) for l in self.layers])

    def parameters(self) -> List[np.ndarray]:
        params = []
        for layer in self.layers:
            params.extend([layer.weights, layer.bias])
        return params

    def __repr__(self):
        return f"<Network(dims={self.dims}, activations={self.activations})>"


def init_network(dims: Sequence[int], activations: Sequence[str], seed: int = 0) -> Network:
    """Uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)] from a seeded generator."""
    if len(dims) < 2 or len(activations) != len(dims) - 1:
        raise DimensionError(f"{len(dims)} dims need {len(dims) - 1} activations, got {len(activations)}")
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out, kind in zip(dims[:-1], dims[1:], activations):
        bound = 1.0 / np.sqrt(fan_in)
        layers.append(Layer(
            weights=rng.uniform(-bound, bound, size=(fan_out, fan_in)),
            bias=rng.uniform(-bound, bound, size=fan_out),
            activation=kind,
        ))
    return Network(layers)


# Gradient structure

@dataclass
class LayerGradient:
    weights: np.ndarray
    bias: np.ndarray


@dataclass
class NetworkGradient:
    """Per-layer gradients, congruent with a Network's parameters."""

    layers: List[LayerGradient] = field(default_factory=list)

    @classmethod
    def zeros_like(cls, net: Network) -> "NetworkGradient":
        return cls([LayerGradient(np.zeros_like(l.weights), np.zeros_like(l.bias)) for l in net.layers])

    def __iter__(self) -> Iterator[LayerGradient]:
        return iter(self.layers)

    def __len__(self):
        return len(self.layers)

    def __add__(self, other: "NetworkGradient") -> "NetworkGradient":
        self._check_congruent(other)
        return NetworkGradient([
            LayerGradient(a.weights + b.weights, a.bias + b.bias)
            for a, b in zip(self.layers, other.layers)
        ])

    def scaled(self, factor: float) -> "NetworkGradient":
        return NetworkGradient([LayerGradient(g.weights * factor, g.bias * factor) for g in self.layers])

    def norm(self) -> float:
        """Euclidean norm over all concatenated entries."""
        squares = sum(float(np.sum(g.weights ** 2) + np.sum(g.bias ** 2)) for g in self.layers)
        return float(np.sqrt(squares))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(g.weights)) and np.all(np.isfinite(g.bias)) for g in self.layers)

    def check_congruent(self, net: Network) -> None:
        if len(self.layers) != len(net.layers) or any(
            g.weights.shape != l.weights.shape or g.bias.shape != l.bias.shape
            for g, l in zip(self.layers, net.layers)
        ):
            raise DimensionError("gradient structure does not match the network parameters")

    def _check_congruent(self, other: "NetworkGradient") -> None:
        if len(self.layers) != len(other.layers) or any(
            a.weights.shape != b.weights.shape or a.bias.shape != b.bias.shape
            for a, b in zip(self.layers, other.layers)
        ):
            raise DimensionError("gradient structures are not congruent")


class TracedNetwork:
    """A network whose parameters sit on a tape.

    With ``track_params=False`` the parameters are constants, which is what
    input-gradient computations (adversarial pair updates, PGD) need.
    """

    def __init__(self, tape: Tape, net: Network, track_params: bool = True):
        self.tape = tape
        self.net = net
        make = tape.variable if track_params else tape.constant
        self.params: List[Tuple[Tensor, Tensor]] = [(make(l.weights), make(l.bias)) for l in net.layers]

    def __call__(self, h: Tensor) -> Tensor:
        for (w, b), layer in zip(self.params, self.net.layers):
            h = ad.activation(layer.activation, ad.add(ad.matvec(w, h), b))
        return h

    def gradient(self, grads: ad.Gradients) -> NetworkGradient:
        return NetworkGradient([LayerGradient(grads[w], grads[b]) for w, b in self.params])


def _check_input(net: Network, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (1, 2) or x.shape[-1] != net.input_dim:
        raise DimensionError(f"network expects inputs of length {net.input_dim}, got shape {x.shape}")
    return x


def forward(net: Network, x: np.ndarray) -> np.ndarray:
    """Evaluate f_theta on a vector or on every row of a batch."""
    h = _check_input(net, x)
    for layer in net.layers:
        h = ad.activation_values(layer.activation, h @ layer.weights.T + layer.bias)
    return h


def predict_probabilities(net: Network, x: np.ndarray) -> np.ndarray:
    """Softmax of the logits."""
    return ad.softmax_values(forward(net, x))


def classification_accuracy(net: Network, inputs: np.ndarray, targets: np.ndarray) -> float:
    """Fraction of rows whose argmax prediction matches the argmax target."""
    inputs = _check_input(net, inputs)
    if len(inputs) == 0:
        raise ContractError("accuracy of an empty dataset is undefined")
    predicted = np.argmax(forward(net, inputs), axis=-1)
    return float(np.mean(predicted == np.argmax(targets, axis=-1)))


def batch_loss(net: Network, inputs: np.ndarray, targets: np.ndarray, loss_kind: str) -> float:
    """Mean loss over the rows, without building a tape."""
    return float(ad.loss(loss_kind, forward(net, inputs), targets).value)


def loss_and_param_gradient(
    net: Network, inputs: np.ndarray, targets: np.ndarray, loss_kind: str
) -> Tuple[float, NetworkGradient]:
    """Mean batch loss and its gradient with respect to all weights and biases."""
    inputs = _check_input(net, inputs)
    if inputs.ndim == 1:
        inputs, targets = inputs[None, :], np.asarray(targets, dtype=np.float64)[None, :]
    if len(inputs) == 0:
        raise ContractError("param_gradient needs a nonempty batch")
    tape = Tape()
    traced = TracedNetwork(tape, net)
    value = ad.loss(loss_kind, traced(tape.constant(inputs)), targets, reduction="mean")
    return float(value.value), traced.gradient(tape.backward(value))


def param_gradient(net: Network, inputs: np.ndarray, targets: np.ndarray, loss_kind: str) -> NetworkGradient:
    """Gradient of (1/|B|) sum loss(f(x), y) with respect to the parameters."""
    return loss_and_param_gradient(net, inputs, targets, loss_kind)[1]


def input_gradient(net: Network, x: np.ndarray, y: np.ndarray, loss_kind: str) -> np.ndarray:
    """Gradient of loss(f(x), y) with respect to x.

    For a row batch every row gets the gradient of its own loss.
    """
    x = _check_input(net, x)
    if x.ndim == 2 and len(x) == 0:
        raise ContractError("input_gradient needs a nonempty batch")
    tape = Tape()
    traced = TracedNetwork(tape, net, track_params=False)
    x_var = tape.variable(x)
    value = ad.loss(loss_kind, traced(x_var), y, reduction="sum")
    return tape.backward(value)[x_var]


def weight_squared_norm(net: Network) -> float:
    """Squared Euclidean norm of all weights (biases excluded)."""
    return float(sum(np.sum(layer.weights ** 2) for layer in net.layers))


def weight_decay_gradient(net: Network, mu: float) -> NetworkGradient:
    """Gradient of mu * ||W||^2."""
    return NetworkGradient([
        LayerGradient(2.0 * mu * layer.weights, np.zeros_like(layer.bias)) for layer in net.layers
    ])


def spectral_norm(weights: np.ndarray, max_iterations: int = 50, tol: float = 1e-10) -> float:
    """Largest singular value by power iteration on W^T W.

    Iteration stops once both the estimate and the eigen-residual
    ||W^T W v - sigma^2 v|| are within ``tol`` relative to sigma^2. A
    truncated power iteration underestimates sigma_max, so when that does
    not happen within ``max_iterations`` the exact 2-norm is returned.
    """
    weights = np.asarray(weights, dtype=np.float64)
    v = np.random.default_rng(0).standard_normal(weights.shape[1])
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(max_iterations):
        u = weights @ v
        new_sigma = float(np.linalg.norm(u))
        if new_sigma == 0.0:
            return 0.0
        w = weights.T @ u
        residual = float(np.linalg.norm(w - new_sigma ** 2 * v))
        settled = abs(new_sigma - sigma) <= tol * new_sigma and residual <= tol * new_sigma ** 2
        sigma = new_sigma
        if settled:
            return sigma
        v = w / np.linalg.norm(w)
    logger.debug("power iteration unsettled after %d steps on %s weights; using exact norm",
                 max_iterations, weights.shape)
    return float(np.linalg.norm(weights, 2))


def layerwise_lipschitz_bound(net: Network, max_iterations: int = 50) -> float:
    """Product over layers of sigma_max(W_l) * Lip(activation_l)."""
    bound = 1.0
    for layer in net.layers:
        bound *= spectral_norm(layer.weights, max_iterations) * ACTIVATION_LIPSCHITZ[layer.activation]
    return bound


# Checkpoints

@dataclass
class Checkpoint:
    """Network parameters plus training metadata (epoch, lambda, metrics)."""

    network: Network
    metadata: Dict[str, Any] = field(default_factory=dict)


def save_checkpoint(net: Network, metadata: Optional[Dict[str, Any]], path: Union[str, Path]) -> Path:
    """Write magic, version, length-prefixed JSON header and a little-endian f64 payload."""
    path = Path(path)
    header = json.dumps(
        {"dims": net.dims, "activations": net.activations, "metadata": metadata or {}},
        sort_keys=True,
    ).encode("utf-8")
    payload = b"".join(
        np.ascontiguousarray(p, dtype="<f8").tobytes() for p in net.parameters()
    )
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(_PREAMBLE.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(header)))
        f.write(header)
        f.write(payload)
    logger.debug("checkpoint written to %s (%d bytes payload)", path, len(payload))
    return path


def read_checkpoint(path: Union[str, Path]) -> Checkpoint:
    """Load a checkpoint, checking magic, version, header and payload size."""
    with open(path, "rb") as f:
        blob = f.read()

    if len(blob) < _PREAMBLE.size:
        raise CorruptCheckpointError(f"{path}: file too short for a checkpoint preamble")
    magic, version, header_len = _PREAMBLE.unpack_from(blob)
    if magic != CHECKPOINT_MAGIC:
        raise CorruptCheckpointError(f"{path}: bad magic {magic!r}")
    if version > CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: format version {version} is newer than supported version {CHECKPOINT_VERSION}"
        )
    header_end = _PREAMBLE.size + header_len
    if len(blob) < header_end:
        raise CorruptCheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(blob[_PREAMBLE.size:header_end].decode("utf-8"))
        dims = [int(d) for d in header["dims"]]
        activations = list(header["activations"])
        metadata = dict(header.get("metadata", {}))
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise CorruptCheckpointError(f"{path}: unreadable header ({exc})") from exc

    if len(dims) < 2 or any(d <= 0 for d in dims) or len(activations) != len(dims) - 1:
        raise CheckpointDimensionError(f"{path}: inconsistent dims {dims} for activations {activations}")
    if any(kind not in ACTIVATION_LIPSCHITZ for kind in activations):
        raise CheckpointDimensionError(f"{path}: unknown activation in {activations}")

    expected = sum(o * i + o for i, o in zip(dims[:-1], dims[1:]))
    payload = blob[header_end:]
    if len(payload) != expected * 8:
        raise CorruptCheckpointError(
            f"{path}: payload has {len(payload)} bytes, header promises {expected * 8}"
        )
    values = np.frombuffer(payload, dtype="<f8").astype(np.float64)

    layers, offset = [], 0
    for fan_in, fan_out, kind in zip(dims[:-1], dims[1:], activations):
        w = values[offset:offset + fan_out * fan_in].reshape(fan_out, fan_in)
        offset += fan_out * fan_in
        b = values[offset:offset + fan_out]
        offset += fan_out
        layers.append(Layer(w.copy(), b.copy(), kind))
    return Checkpoint(Network(layers), metadata)


def load_checkpoint(path: Union[str, Path]) -> Network:
    return read_checkpoint(path).network

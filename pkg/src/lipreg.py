"""Empirical Lipschitz estimation on a finite pair set and adversarial pair ascent."""
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from src import autodiff as ad
from src.autodiff import ContractError, DimensionError, Tape
from src.network import Network, NetworkGradient, TracedNetwork, forward, predict_probabilities

logger = logging.getLogger(__name__)


class DegeneratePairError(ValueError):
    """A pair has coincident points, so its difference quotient is undefined."""


def default_min_separation(input_dim: int) -> float:
    return 1e-6 * float(np.sqrt(input_dim))


@dataclass
class PairSampler:
    """Draws pairs (x, x + noise).

    Classification mode draws x from ``source`` rows; regression mode draws x
    uniformly from the box ``bounds`` in ``input_dim`` dimensions. ``clamp``
    keeps both points inside a box (images live in [0, 1]).
    """

    noise_scale: float
    source: Optional[np.ndarray] = None
    bounds: Optional[Tuple[float, float]] = None
    input_dim: int = 1
    clamp: Optional[Tuple[float, float]] = None
    min_separation: Optional[float] = None
    seed: int = 0
    rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        if (self.source is None) == (self.bounds is None):
            raise ValueError("PairSampler needs exactly one of source inputs or domain bounds")
        if self.noise_scale < 0:
            raise ValueError(f"noise_scale must be non-negative, got {self.noise_scale}")
        if self.source is not None:
            self.source = np.asarray(self.source, dtype=np.float64)
            self.input_dim = self.source.shape[1]
        if self.min_separation is None:
            self.min_separation = default_min_separation(self.input_dim)
        self.rng = np.random.default_rng(self.seed)

    def reseeded(self, seed: int) -> "PairSampler":
        """Same sampler settings on a fresh random stream."""
        return replace(self, seed=seed)

    @property
    def mode(self) -> str:
        return "classification" if self.source is not None else "regression"

    def draw_points(self, count: int) -> np.ndarray:
        if self.source is not None:
            if count > len(self.source):
                raise ContractError(f"cannot draw {count} pairs from {len(self.source)} source inputs")
            return self.source[self.rng.permutation(len(self.source))[:count]].copy()
        lo, hi = self.bounds
        return self.rng.uniform(lo, hi, size=(count, self.input_dim))

    def perturb(self, left: np.ndarray) -> Tuple[np.ndarray, int]:
        """Noisy partners for every row, re-drawn until each pair is separated.

        A rejected row is retried with the noise scale doubled (starting at
        the separation threshold when the configured scale is too small).
        Returns the partners and the number of draw attempts.
        """
        right = np.empty_like(left)
        pending = np.arange(len(left))
        scale, attempts = self.noise_scale, 0
        while len(pending):
            attempts += 1
            candidate = left[pending] + scale * self.rng.standard_normal(left[pending].shape)
            if self.clamp is not None:
                candidate = np.clip(candidate, *self.clamp)
            right[pending] = candidate
            gaps = np.linalg.norm(candidate - left[pending], axis=1)
            pending = pending[gaps < self.min_separation]
            scale = max(2.0 * scale, 2.0 * self.min_separation)
        return right, attempts

    def draw(self, count: int) -> Tuple[np.ndarray, np.ndarray, int]:
        left = self.draw_points(count)
        right, attempts = self.perturb(left)
        return left, right, attempts


@dataclass
class PairSet:
    """The Lipschitz training set: rows of ``left`` paired with rows of ``right``."""

    left: np.ndarray
    right: np.ndarray
    min_separation: Optional[float] = None
    sampler: Optional[PairSampler] = field(default=None, repr=False, compare=False)
    repairs: int = 0
    draw_attempts: int = 0

    def __post_init__(self):
        self.left = np.array(self.left, dtype=np.float64, ndmin=2)
        self.right = np.array(self.right, dtype=np.float64, ndmin=2)
        if self.left.shape != self.right.shape:
            raise DimensionError(f"pair sides differ in shape: {self.left.shape} vs {self.right.shape}")
        if self.min_separation is None:
            self.min_separation = default_min_separation(self.input_dim)

    @classmethod
    def from_pairs(cls, pairs: Sequence[Tuple[Sequence[float], Sequence[float]]], **kwargs) -> "PairSet":
        left = [np.atleast_1d(np.asarray(x, dtype=np.float64)) for x, _ in pairs]
        right = [np.atleast_1d(np.asarray(x, dtype=np.float64)) for _, x in pairs]
        return cls(np.array(left), np.array(right), **kwargs)

    @property
    def input_dim(self) -> int:
        return self.left.shape[1]

    def __len__(self):
        return len(self.left)

    def __iter__(self) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
        return iter(zip(self.left, self.right))

    def separations(self) -> np.ndarray:
        return np.linalg.norm(self.left - self.right, axis=1)

    def copy(self, seed: Optional[int] = None) -> "PairSet":
        """Independent copy of the pairs.

        With ``seed`` the copy gets its own sampler stream, so repairs in one
        copy never shift the draws of another.
        """
        sampler = self.sampler
        if seed is not None and sampler is not None:
            sampler = sampler.reseeded(seed)
        return PairSet(self.left.copy(), self.right.copy(), self.min_separation,
                       sampler, self.repairs, self.draw_attempts)


@dataclass
class QuotientReport:
    """Per-pair difference quotients with the (lowest-index) maximiser."""

    quotients: np.ndarray
    argmax: int
    max_value: float


def resample_pairs(sampler: PairSampler, count: int) -> PairSet:
    """Fresh pairs (x, x + Gaussian noise) respecting the sampler's min separation."""
    left, right, attempts = sampler.draw(count)
    if attempts > 1:
        logger.debug("pair draw needed %d attempts for %d pairs", attempts, count)
    return PairSet(left, right, sampler.min_separation, sampler, draw_attempts=attempts)


def lipschitz_quotient(net: Network, x: np.ndarray, x_prime: np.ndarray) -> float:
    """||f(x) - f(x')|| / ||x - x'||."""
    x, x_prime = np.asarray(x, dtype=np.float64), np.asarray(x_prime, dtype=np.float64)
    gap = float(np.linalg.norm(x - x_prime))
    if gap == 0.0:
        raise DegeneratePairError("coincident pair has no difference quotient")
    return float(np.linalg.norm(forward(net, x) - forward(net, x_prime))) / gap


def pair_quotients(net: Network, pairs: PairSet) -> np.ndarray:
    gaps = pairs.separations()
    if np.any(gaps == 0.0):
        raise DegeneratePairError(f"{int(np.count_nonzero(gaps == 0.0))} coincident pair(s) in the pair set")
    return np.linalg.norm(forward(net, pairs.left) - forward(net, pairs.right), axis=1) / gaps


def empirical_lipschitz(net: Network, pairs: PairSet) -> QuotientReport:
    """Maximum difference quotient over the pair set; ties go to the lowest index."""
    if len(pairs) == 0:
        raise ContractError("empirical Lipschitz constant of an empty pair set")
    quotients = pair_quotients(net, pairs)
    index = int(np.argmax(quotients))
    return QuotientReport(quotients, index, float(quotients[index]))


def _traced_quotients(traced: TracedNetwork, left: ad.Tensor, right: ad.Tensor) -> ad.Tensor:
    numerator = ad.euclidean_norm(ad.sub(traced(left), traced(right)))
    return ad.div(numerator, ad.euclidean_norm(ad.sub(left, right)))


def quotient_input_gradients(net: Network, pairs: PairSet) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Quotients and their gradients with respect to both points of every pair."""
    tape = Tape()
    traced = TracedNetwork(tape, net, track_params=False)
    left, right = tape.variable(pairs.left), tape.variable(pairs.right)
    quotients = _traced_quotients(traced, left, right)
    grads = tape.backward(ad.total(quotients))
    return quotients.value, grads[left], grads[right]


def adversarial_update(net: Network, pairs: PairSet, tau: float) -> PairSet:
    """One ascent step x <- x + tau * L * grad_x L on every pair (and likewise x').

    Pairs whose points collapse below the minimum separation are re-drawn from
    the pair set's sampler, or kept at their previous position when it has
    none; either way the repair is counted.
    """
    if tau <= 0:
        raise ContractError(f"adversarial step size must be positive, got {tau}")
    quotients, grad_left, grad_right = quotient_input_gradients(net, pairs)
    step = tau * quotients[:, None]
    left = pairs.left + step * grad_left
    right = pairs.right + step * grad_right

    sampler = pairs.sampler
    if sampler is not None and sampler.clamp is not None:
        left, right = np.clip(left, *sampler.clamp), np.clip(right, *sampler.clamp)

    collapsed = np.flatnonzero(np.linalg.norm(left - right, axis=1) < pairs.min_separation)
    if len(collapsed):
        if sampler is not None:
            new_left, new_right, _ = sampler.draw(len(collapsed))
            left[collapsed], right[collapsed] = new_left, new_right
        else:
            left[collapsed], right[collapsed] = pairs.left[collapsed], pairs.right[collapsed]
        logger.debug("repaired %d collapsed pair(s)", len(collapsed))

    return PairSet(left, right, pairs.min_separation, sampler,
                   pairs.repairs + len(collapsed), pairs.draw_attempts)


def lip_value_and_param_gradient(net: Network, pairs: PairSet) -> Tuple[QuotientReport, NetworkGradient]:
    """Empirical Lipschitz report and the gradient of its argmax pair's quotient."""
    report = empirical_lipschitz(net, pairs)
    tape = Tape()
    traced = TracedNetwork(tape, net)
    i = report.argmax
    quotient = _traced_quotients(traced, tape.constant(pairs.left[i]), tape.constant(pairs.right[i]))
    return report, traced.gradient(tape.backward(quotient))


def lip_param_gradient(net: Network, pairs: PairSet) -> NetworkGradient:
    """Subgradient of Lip(f, pairs) with respect to the parameters."""
    return lip_value_and_param_gradient(net, pairs)[1]


def pair_predictions(net: Network, pairs: PairSet) -> List[dict]:
    """Predicted class and confidence of both points of every pair."""
    left_probs = predict_probabilities(net, pairs.left)
    right_probs = predict_probabilities(net, pairs.right)
    quotients = pair_quotients(net, pairs)
    rows = []
    for i in range(len(pairs)):
        left_class, right_class = int(np.argmax(left_probs[i])), int(np.argmax(right_probs[i]))
        rows.append({
            "index": i,
            "quotient": float(quotients[i]),
            "separation": float(np.linalg.norm(pairs.left[i] - pairs.right[i])),
            "left_class": left_class,
            "left_confidence": float(left_probs[i, left_class]),
            "right_class": right_class,
            "right_confidence": float(right_probs[i, right_class]),
        })
    return rows


def grid_lipschitz(xs: np.ndarray, ys: np.ndarray) -> float:
    """Largest difference quotient between neighbouring points of a 1-d grid."""
    xs = np.asarray(xs, dtype=np.float64).reshape(-1)
    ys = np.asarray(ys, dtype=np.float64).reshape(len(xs), -1)
    steps = np.diff(xs)
    rises = np.linalg.norm(np.diff(ys, axis=0), axis=1)
    return float(np.max(rises / steps))


def lipschitz_on_grid(net: Network, lo: float, hi: float, points: int) -> float:
    xs = np.linspace(lo, hi, points)
    return grid_lipschitz(xs, forward(net, xs[:, None]))


def save_pairs_csv(pairs: PairSet, path: Union[str, Path]) -> Path:
    """One row per pair: the coordinates of x followed by those of x'."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = ",".join([f"x{i}" for i in range(pairs.input_dim)] + [f"xp{i}" for i in range(pairs.input_dim)])
    np.savetxt(path, np.hstack([pairs.left, pairs.right]), delimiter=",", fmt="%.17g",
               header=header, comments="")
    return path


def load_pairs_csv(path: Union[str, Path], min_separation: Optional[float] = None) -> PairSet:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.shape[1] % 2:
        raise DimensionError(f"{path}: odd column count {data.shape[1]} cannot hold pairs")
    half = data.shape[1] // 2
    return PairSet(data[:, :half], data[:, half:], min_separation)

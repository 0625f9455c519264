"""Training loops: SGD with momentum, Lipschitz (CLIP) and weight-decay regularization.

The controlled regularization weight (lambda for ``clip``, mu for
``weight_reg``) follows the discrepancy principle: it grows by one increment
while the training accuracy exceeds the target and shrinks (never below 0)
otherwise.
"""
import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import IO, Iterable, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from src.autodiff import ContractError
from src.data import Dataset
from src.lipreg import PairSet, adversarial_update, lip_value_and_param_gradient, resample_pairs
from src.models import AttackConfig, TrainConfig
from src.network import (
    Checkpoint,
    Network,
    NetworkGradient,
    classification_accuracy,
    forward,
    loss_and_param_gradient,
    weight_decay_gradient,
    weight_squared_norm,
)
from src.robustness import robust_accuracy
from src.run_log import log_event

logger = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "batch", "loss", "objective", "lipschitz", "reg_weight", "train_accuracy")


class TrainingDivergedError(RuntimeError):
    """The objective became NaN or infinite."""


@dataclass
class BatchRecord:
    epoch: int
    batch: int
    loss: float
    objective: float
    lipschitz: Optional[float]
    reg_weight: float
    train_accuracy: float


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    reg_weight: float
    probe_robust_accuracy: Optional[float] = None
    checkpoint_improved: bool = False


@dataclass
class TrainHistory:
    """Per-minibatch and per-epoch records in (epoch, batch) order."""

    batches: List[BatchRecord] = field(default_factory=list)
    epochs: List[EpochRecord] = field(default_factory=list)

    def record(self, entry: BatchRecord) -> None:
        if self.batches:
            last = self.batches[-1]
            if (entry.epoch, entry.batch) <= (last.epoch, last.batch):
                raise ContractError(
                    f"history out of order: ({entry.epoch}, {entry.batch}) after ({last.epoch}, {last.batch})"
                )
        self.batches.append(entry)

    def record_epoch(self, entry: EpochRecord) -> None:
        if self.epochs and entry.epoch <= self.epochs[-1].epoch:
            raise ContractError(f"epoch {entry.epoch} recorded after epoch {self.epochs[-1].epoch}")
        self.epochs.append(entry)

    @property
    def reg_weights(self) -> List[float]:
        return [b.reg_weight for b in self.batches]

    @property
    def final_reg_weight(self) -> float:
        return self.batches[-1].reg_weight if self.batches else 0.0

    def csv_rows(self, run: Optional[str] = None) -> Iterable[List[str]]:
        for b in self.batches:
            row = [_fmt(getattr(b, column)) for column in HISTORY_COLUMNS]
            yield ([run] + row) if run is not None else row

    def to_csv(self, target: Union[str, Path, IO[str]], run: Optional[str] = None) -> None:
        """One row per minibatch; an optional leading ``run`` column labels the run."""
        header = (["run"] if run is not None else []) + list(HISTORY_COLUMNS)
        if isinstance(target, (str, Path)):
            with open(target, "w", newline="") as f:
                self.to_csv(f, run)
            return
        writer = csv.writer(target, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(self.csv_rows(run))

    def epochs_json(self) -> str:
        return json.dumps([asdict(e) for e in self.epochs], indent=2)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class MomentumState:
    """Velocity buffers congruent with the network parameters."""

    velocity: NetworkGradient

    @classmethod
    def zeros_like(cls, net: Network) -> "MomentumState":
        return cls(NetworkGradient.zeros_like(net))


class TrainResult(NamedTuple):
    network: Network
    history: TrainHistory
    checkpoint: Checkpoint
    pairs: Optional[PairSet] = None


def sgdm_step(net: Network, gradient: NetworkGradient, state: MomentumState,
              learning_rate: float, momentum: float) -> Tuple[Network, MomentumState]:
    """v <- momentum * v + g; theta <- theta - learning_rate * v (in place)."""
    gradient.check_congruent(net)
    state.velocity.check_congruent(net)
    for layer, g, v in zip(net.layers, gradient, state.velocity):
        v.weights *= momentum
        v.weights += g.weights
        v.bias *= momentum
        v.bias += g.bias
        layer.weights -= learning_rate * v.weights
        layer.bias -= learning_rate * v.bias
    return net, state


def discrepancy_update(weight: float, step: float, accuracy: float, target: float) -> float:
    """Raise the weight while accuracy exceeds the target, lower it otherwise (floor 0)."""
    if step <= 0:
        raise ContractError(f"regularization increment must be positive, got {step}")
    if accuracy > target:
        return weight + step
    return max(weight - step, 0.0)


def train_accuracy(net: Network, dataset: Dataset, task: str = "classification",
                   tolerance: float = 0.1) -> float:
    """Fraction of correct samples.

    Classification counts argmax hits; regression counts predictions within
    ``tolerance`` of the target in every component.
    """
    if len(dataset) == 0:
        raise ContractError("accuracy of an empty dataset is undefined")
    if task == "classification":
        return classification_accuracy(net, dataset.inputs, dataset.targets)
    errors = np.abs(forward(net, dataset.inputs) - dataset.targets)
    return float(np.mean(np.all(errors <= tolerance, axis=1)))


def shuffled_order(rng: np.random.Generator, n: int) -> np.ndarray:
    """Fisher-Yates permutation of range(n) driven by ``rng``."""
    order = np.arange(n)
    for i in range(n - 1, 0, -1):
        j = int(rng.integers(0, i + 1))
        order[i], order[j] = order[j], order[i]
    return order


class Trainer:
    """Runs one training configuration.

    Args:
        config: Hyperparameters; ``config.mode`` picks standard, weight_reg or clip
        probe: Fixed held-out samples attacked after every epoch to pick the
            most robust checkpoint; without a probe the final parameters win
        attack: PGD settings for the probe
        run: Label used in log events
    """

    def __init__(self, config: TrainConfig, probe: Optional[Dataset] = None,
                 attack: Optional[AttackConfig] = None, run: str = "train"):
        self.config = config
        self.probe = probe if probe is not None and len(probe) else None
        self.attack = attack
        self.run = run

    def fit(self, net: Network, dataset: Dataset, pairs: Optional[PairSet] = None) -> TrainResult:
        cfg = self.config
        if len(dataset) == 0:
            raise ContractError("cannot train on an empty dataset")
        if cfg.mode == "clip" and (pairs is None or len(pairs) == 0):
            raise ContractError("clip training needs a nonempty pair set")

        net = net.copy()
        state = MomentumState.zeros_like(net)
        rng = np.random.default_rng(cfg.seed)
        history = TrainHistory()
        weight, step = cfg.initial_weight, cfg.weight_step
        adapt = cfg.mode != "standard" and not cfg.lambda_fixed
        best: Optional[Checkpoint] = None
        best_score = -math.inf
        converged = False

        log_event(self.run, "start", mode=cfg.mode, epochs=cfg.epochs, reg_weight=weight)
        for epoch in range(1, cfg.epochs + 1):
            if cfg.mode == "clip" and cfg.resample_pairs_each_epoch and epoch > 1 and pairs.sampler is not None:
                pairs = resample_pairs(pairs.sampler, len(pairs))

            order = shuffled_order(rng, len(dataset))
            losses = []
            for batch, start in enumerate(range(0, len(dataset), cfg.batch_size)):
                idx = order[start:start + cfg.batch_size]
                inputs, targets = dataset.inputs[idx], dataset.targets[idx]

                if cfg.mode == "clip" and cfg.update_pairs:
                    pairs = adversarial_update(net, pairs, cfg.tau)

                loss, grad = loss_and_param_gradient(net, inputs, targets, cfg.loss)
                objective, lipschitz = loss, None
                if cfg.mode == "clip":
                    report, lip_grad = lip_value_and_param_gradient(net, pairs)
                    lipschitz = report.max_value
                    objective = loss + weight * lipschitz
                    if weight > 0:
                        grad = grad + lip_grad.scaled(weight)
                elif cfg.mode == "weight_reg":
                    objective = loss + weight * weight_squared_norm(net)
                    if weight > 0:
                        grad = grad + weight_decay_gradient(net, weight)

                if not math.isfinite(objective) or not grad.is_finite():
                    log_event(self.run, "diverged", epoch=epoch, batch=batch, objective=objective)
                    raise TrainingDivergedError(
                        f"{self.run}: non-finite objective {objective} at epoch {epoch}, batch {batch} "
                        f"(reg_weight={weight}, learning_rate={cfg.learning_rate})"
                    )

                if cfg.gradient_tolerance is not None and grad.norm() < cfg.gradient_tolerance:
                    converged = True
                    break

                sgdm_step(net, grad, state, cfg.learning_rate, cfg.momentum)

                accuracy_set = dataset if cfg.full_set_accuracy else Dataset(inputs, targets)
                accuracy = train_accuracy(net, accuracy_set, cfg.task, cfg.regression_tolerance)
                if adapt:
                    weight = discrepancy_update(weight, step, accuracy, cfg.target_accuracy)

                losses.append(loss)
                history.record(BatchRecord(epoch, batch, loss, objective, lipschitz, weight, accuracy))

            score = None
            improved = False
            if self.probe is not None and self.attack is not None:
                score = robust_accuracy(net, self.probe, self.attack, cfg.loss)
                if score > best_score:
                    best_score, improved = score, True
                    best = Checkpoint(net.copy(), {
                        "epoch": epoch, "reg_weight": weight, "probe_robust_accuracy": score,
                    })
                    log_event(self.run, "checkpoint", epoch=epoch, probe_robust_accuracy=score)
            if losses:
                history.record_epoch(EpochRecord(epoch, float(np.mean(losses)), weight, score, improved))
                logger.info("[%s] epoch %d/%d loss %.5f reg %.5g%s", self.run, epoch, cfg.epochs,
                            np.mean(losses), weight, "" if score is None else f" probe-pgd {score:.3f}")
            if converged:
                logger.info("[%s] gradient norm below %.1e, stopping at epoch %d",
                            self.run, cfg.gradient_tolerance, epoch)
                break

        if best is None:
            best = Checkpoint(net.copy(), {"epoch": epoch, "reg_weight": weight})
        log_event(self.run, "finish", reg_weight=weight, best_epoch=best.metadata["epoch"],
                  repairs=pairs.repairs if pairs is not None else 0)
        return TrainResult(net, history, best, pairs)


def standard_train(net: Network, dataset: Dataset, config: TrainConfig, **kwargs) -> TrainResult:
    return Trainer(config.model_copy(update={"mode": "standard"}), **kwargs).fit(net, dataset)


def clip_train(net: Network, dataset: Dataset, pairs: PairSet, config: TrainConfig, **kwargs) -> TrainResult:
    """Lipschitz-regularized training with adversarial pair updates."""
    if config.mode != "clip":
        raise ContractError(f"clip_train needs mode 'clip', got '{config.mode}'")
    return Trainer(config, **kwargs).fit(net, dataset, pairs)


def weight_reg_train(net: Network, dataset: Dataset, config: TrainConfig, **kwargs) -> TrainResult:
    """Training with the mu * ||W||^2 penalty, mu under discrepancy control."""
    if config.mode != "weight_reg":
        raise ContractError(f"weight_reg_train needs mode 'weight_reg', got '{config.mode}'")
    return Trainer(config, **kwargs).fit(net, dataset)


def lambda_continuation(net: Network, dataset: Dataset, pairs: PairSet, schedule: Sequence[float],
                        config: TrainConfig, **kwargs) -> List[Tuple[float, Network, TrainHistory]]:
    """Train with fixed lambda for each value of a decreasing schedule, warm starting each stage.

    Stage k starts from the parameters stage k-1 ended with; the first stage
    starts from ``net`` (typically a pretrained unregularized network).
    """
    if not schedule:
        raise ContractError("lambda continuation needs a nonempty schedule")
    if any(b >= a for a, b in zip(schedule, schedule[1:])):
        raise ContractError(f"lambda schedule must be strictly decreasing, got {list(schedule)}")

    stages = []
    current, current_pairs = net, pairs
    for lam in schedule:
        stage_cfg = config.model_copy(update={"mode": "clip", "lambda0": float(lam), "lambda_fixed": True})
        result = Trainer(stage_cfg, run=f"lambda={lam:g}", **kwargs).fit(current, dataset, current_pairs)
        stages.append((float(lam), result.network, result.history))
        current, current_pairs = result.network, result.pairs
    return stages

"""Robustness evaluation: L2 PGD attack, Gaussian noise, barycenter oracle, reports."""
import logging
from typing import List, Optional

import numpy as np

from src import autodiff as ad
from src.autodiff import ContractError
from src.data import Dataset
from src.lipreg import PairSet, adversarial_update, empirical_lipschitz
from src.models import AttackConfig, EvalReport
from src.network import (
    Network,
    classification_accuracy,
    forward,
    input_gradient,
    layerwise_lipschitz_bound,
)

logger = logging.getLogger(__name__)

INPUT_RANGE = (0.0, 1.0)
ATTACK_CHUNK = 512


class UnsupportedLossError(ValueError):
    """The requested loss has no closed-form constant minimiser here."""


def project_l2_ball(delta: np.ndarray, epsilon: float) -> np.ndarray:
    """Radially shrink every row of delta with norm above epsilon onto the ball."""
    delta = np.asarray(delta, dtype=np.float64)
    norms = np.linalg.norm(delta, axis=-1, keepdims=True)
    outside = norms > epsilon
    factor = np.where(outside, epsilon / np.where(outside, norms, 1.0), 1.0)
    return delta * factor


def attack_step(x_adv: np.ndarray, grad: np.ndarray, cfg: AttackConfig) -> np.ndarray:
    """Ascent step before projection: sign step, or normalized-gradient step."""
    if cfg.step_rule == "sign":
        return x_adv + cfg.step_size * np.sign(grad)
    norms = np.linalg.norm(grad, axis=-1, keepdims=True)
    return x_adv + cfg.step_size * grad / np.where(norms > 0.0, norms, 1.0)


def pgd_attack(net: Network, x: np.ndarray, y: np.ndarray, cfg: AttackConfig,
               loss_kind: str = "cross_entropy") -> np.ndarray:
    """Projected gradient ascent on the loss inside the L2 ball of radius epsilon.

    Starts at the clean point; every iterate is projected back onto the ball
    around x and then clamped to the valid input range.
    """
    x = np.asarray(x, dtype=np.float64)
    x_adv = x.copy()
    for _ in range(cfg.iterations):
        grad = input_gradient(net, x_adv, y, loss_kind)
        x_adv = x + project_l2_ball(attack_step(x_adv, grad, cfg) - x, cfg.epsilon)
        if cfg.clamp:
            x_adv = np.clip(x_adv, *INPUT_RANGE)
    return x_adv


def attacked_inputs(net: Network, dataset: Dataset, cfg: AttackConfig,
                    loss_kind: str = "cross_entropy") -> np.ndarray:
    chunks = [
        pgd_attack(net, dataset.inputs[start:start + ATTACK_CHUNK],
                   dataset.targets[start:start + ATTACK_CHUNK], cfg, loss_kind)
        for start in range(0, len(dataset), ATTACK_CHUNK)
    ]
    return np.concatenate(chunks) if chunks else dataset.inputs.copy()


def robust_accuracy(net: Network, dataset: Dataset, cfg: AttackConfig,
                    loss_kind: str = "cross_entropy") -> float:
    """Accuracy on PGD-attacked copies of the dataset."""
    if len(dataset) == 0:
        raise ContractError("robust accuracy of an empty dataset is undefined")
    return classification_accuracy(net, attacked_inputs(net, dataset, cfg, loss_kind), dataset.targets)


def attack_traces(net: Network, dataset: Dataset, cfg: AttackConfig,
                  loss_kind: str = "cross_entropy") -> List[dict]:
    """Per-sample outcome of the attack: perturbation size, losses, predictions."""
    x_adv = attacked_inputs(net, dataset, cfg, loss_kind)
    clean_out, adv_out = forward(net, dataset.inputs), forward(net, x_adv)
    rows = []
    for i in range(len(dataset)):
        rows.append({
            "index": i,
            "label": int(dataset.labels[i]),
            "perturbation_norm": float(np.linalg.norm(x_adv[i] - dataset.inputs[i])),
            "clean_loss": float(ad.loss(loss_kind, clean_out[i], dataset.targets[i]).value),
            "adversarial_loss": float(ad.loss(loss_kind, adv_out[i], dataset.targets[i]).value),
            "clean_prediction": int(np.argmax(clean_out[i])),
            "adversarial_prediction": int(np.argmax(adv_out[i])),
        })
    return rows


def gaussian_noise_eval(net: Network, dataset: Dataset, sigma: float = 1.0, seed: int = 0) -> float:
    """Accuracy on x + N(0, sigma^2 I), clamped back into the input range."""
    if len(dataset) == 0:
        raise ContractError("noise accuracy of an empty dataset is undefined")
    rng = np.random.default_rng(seed)
    noisy = dataset.inputs + sigma * rng.standard_normal(dataset.inputs.shape)
    return classification_accuracy(net, np.clip(noisy, *INPUT_RANGE), dataset.targets)


def barycenter_oracle(dataset: Dataset, loss_kind: str = "mse") -> np.ndarray:
    """Constant output minimising the training loss: the mean target under Euclidean loss."""
    if loss_kind != "mse":
        raise UnsupportedLossError(f"barycenter oracle is only defined for the Euclidean loss, not '{loss_kind}'")
    if len(dataset) == 0:
        raise ContractError("barycenter of an empty dataset is undefined")
    return dataset.targets.mean(axis=0)


def evaluate(
    net: Network,
    test: Dataset,
    pairs: PairSet,
    cfg: AttackConfig,
    noise_sigma: float = 1.0,
    noise_seed: int = 0,
    reg_weight: float = 0.0,
    reg_kind: str = "none",
    train: Optional[Dataset] = None,
    pair_updates: int = 0,
    tau: float = 0.1,
) -> EvalReport:
    """Assemble a report row for a trained network.

    Args:
        net: Network to evaluate
        test: Held-out classification data
        pairs: Evaluation pairs for the empirical Lipschitz estimate
        cfg: PGD settings
        noise_sigma: Standard deviation of the Gaussian corruption
        noise_seed: Seed of the corruption
        reg_weight: Final lambda or mu of the training run
        reg_kind: "lambda", "mu" or "none"
        train: Optional training set for the train-accuracy column
        pair_updates: Adversarial updates applied to the evaluation pairs
            before estimating the Lipschitz constant
        tau: Step size of those updates
    """
    for _ in range(pair_updates):
        pairs = adversarial_update(net, pairs, tau)
    report = EvalReport(
        train_accuracy=classification_accuracy(net, train.inputs, train.targets) if train is not None else None,
        clean_accuracy=classification_accuracy(net, test.inputs, test.targets),
        noise_accuracy=gaussian_noise_eval(net, test, noise_sigma, noise_seed),
        pgd_accuracy=robust_accuracy(net, test, cfg),
        empirical_lipschitz=empirical_lipschitz(net, pairs).max_value,
        layerwise_bound=layerwise_lipschitz_bound(net),
        reg_weight=reg_weight,
        reg_kind=reg_kind,
    )
    logger.info("clean %.3f | noise %.3f | pgd %.3f | lip %.4g <= %.4g",
                report.clean_accuracy, report.noise_accuracy, report.pgd_accuracy,
                report.empirical_lipschitz, report.layerwise_bound)
    return report

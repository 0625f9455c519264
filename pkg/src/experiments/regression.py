"""1-d regression recipe: unregularized pretraining, then a decreasing lambda continuation."""
import logging
from typing import Any, Dict

import numpy as np

from src.config import ExperimentConfig
from src.data import REGRESSION_DOMAIN, regression_dataset, target_function
from src.experiments.artifacts import RunArtifacts, derive_seeds
from src.lipreg import PairSampler, grid_lipschitz, resample_pairs
from src.network import Network, forward, init_network, layerwise_lipschitz_bound, save_checkpoint
from src.training import lambda_continuation, standard_train

logger = logging.getLogger(__name__)

CURVE_COLUMNS = ("x", "prediction", "ground_truth")


def curve_name(lam: float) -> str:
    return f"curves_lambda_{lam:g}.csv"


def regression_network(config: ExperimentConfig, seed: int) -> Network:
    """1 -> hidden... -> 1 sigmoid net; the sigmoid output covers the target's range."""
    dims = [1] + list(config.regression.hidden) + [1]
    return init_network(dims, ["sigmoid"] * (len(dims) - 1), seed)


def summarize_curve(net: Network, grid: np.ndarray) -> Dict[str, Any]:
    prediction = forward(net, grid[:, None])[:, 0]
    truth = target_function(grid)
    return {
        "prediction": prediction,
        "grid_lipschitz": grid_lipschitz(grid, prediction),
        "ground_truth_mse": float(np.mean((prediction - truth) ** 2)),
        "layerwise_bound": layerwise_lipschitz_bound(net),
    }


def _write_stage(artifacts: RunArtifacts, lam: float, net: Network, grid: np.ndarray,
                 report: Dict[str, Any]) -> None:
    summary = summarize_curve(net, grid)
    artifacts.write_csv(curve_name(lam), CURVE_COLUMNS,
                        zip(grid, summary.pop("prediction"), target_function(grid)))
    save_checkpoint(net, {"recipe": "regression", "lambda": lam},
                    artifacts.path(f"checkpoints/regression_lambda_{lam:g}.ckpt"))
    report["curves"][f"{lam:g}"] = summary
    logger.info("lambda=%g: grid Lip %.4f, ground-truth mse %.3e",
                lam, summary["grid_lipschitz"], summary["ground_truth_mse"])


def run_regression(config: ExperimentConfig, artifacts: RunArtifacts) -> Dict[str, Any]:
    """Train the lambda = 0 net and the warm-started continuation, write curves and report.

    The lambda = 0 run doubles as the starting point of the continuation, whose
    stages each warm start from the previous one. Pairs are re-drawn in the
    whole domain every epoch.

    Returns:
        The report dictionary also written to ``report.json``.
    """
    data_seed, init_seed, pair_seed, train_seed = derive_seeds(config.seed, 4)
    train_cfg = config.train.model_copy(update={
        "task": "regression",
        "loss": "mse",
        "seed": train_seed,
        "resample_pairs_each_epoch": True,
    })
    lo, hi = REGRESSION_DOMAIN
    grid = np.linspace(lo, hi, config.regression.grid_points)
    report: Dict[str, Any] = {
        "recipe": "regression",
        "schedule": list(config.regression.schedule),
        "ground_truth_grid_lipschitz": grid_lipschitz(grid, target_function(grid)),
        "curves": {},
    }

    with artifacts.stage("regression/data"):
        data = regression_dataset(config.data.regression_samples, config.data.regression_noise, data_seed)
        sampler = PairSampler(config.data.pair_noise, bounds=REGRESSION_DOMAIN, input_dim=1, seed=pair_seed)
        pairs = resample_pairs(sampler, config.data.regression_pairs)
        artifacts.write_csv("regression_samples.csv", ("x", "y"), zip(data.inputs[:, 0], data.targets[:, 0]))
        report["barycenter"] = float(data.targets.mean())

    with artifacts.stage("regression/lambda=0"):
        pretrain_cfg = train_cfg.model_copy(update={"epochs": config.regression.pretrain_epochs})
        result = standard_train(regression_network(config, init_seed), data, pretrain_cfg, run="lambda=0")
        artifacts.add_history("lambda=0", result.history)
        _write_stage(artifacts, 0.0, result.network, grid, report)

    with artifacts.stage("regression/continuation"):
        stages = lambda_continuation(result.network, data, pairs, config.regression.schedule, train_cfg)
        for lam, net, history in stages:
            artifacts.add_history(f"lambda={lam:g}", history)
            _write_stage(artifacts, lam, net, grid, report)

    if artifacts.timing:
        report["timing"] = artifacts.timings()
    artifacts.write_json("report.json", report)
    return report

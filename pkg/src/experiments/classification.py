"""Image classification recipe: standard, weight-decay and CLIP rows per dataset."""
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from src.config import ExperimentConfig, validate_dataset_paths
from src.data import load_dataset, split, subsample
from src.experiments.artifacts import RunArtifacts, derive_seeds
from src.lipreg import PairSampler, PairSet, pair_predictions, resample_pairs
from src.network import Network, init_network, save_checkpoint
from src.robustness import INPUT_RANGE, attack_traces, evaluate
from src.training import Trainer

logger = logging.getLogger(__name__)

TABLE_COLUMNS = (
    "dataset", "row", "mode", "target_accuracy", "train_accuracy", "clean_accuracy",
    "noise_accuracy", "pgd_accuracy", "empirical_lipschitz", "layerwise_bound",
    "reg_kind", "reg_weight", "final_reg_weight", "best_epoch",
)
REG_KIND = {"standard": "none", "weight_reg": "mu", "clip": "lambda"}


def table_rows(targets: List[float]) -> List[Tuple[str, str, Optional[float]]]:
    """(row name, mode, target accuracy): one standard row, then weight-decay and CLIP per target."""
    rows = [("standard", "standard", None)]
    for mode in ("weight_reg", "clip"):
        rows.extend((f"{mode}_{round(t * 100)}", mode, t) for t in targets)
    return rows


def classification_network(config: ExperimentConfig, input_dim: int, output_dim: int, seed: int) -> Network:
    hidden = list(config.classification.hidden)
    dims = [input_dim] + hidden + [output_dim]
    return init_network(dims, ["sigmoid"] * len(hidden) + ["identity"], seed)


class DatasetRun:
    """Shared data of all rows of one dataset."""

    def __init__(self, config: ExperimentConfig, name: str, data_dir: Path, seed: int):
        split_seed, test_seed, probe_seed, pair_seed, eval_pair_seed, self.init_seed = derive_seeds(seed, 6)
        self.name = name
        full = load_dataset(data_dir, name, "train")
        self.train, held_out, reserve = split(full, config.split.model_copy(update={"seed": split_seed}))
        self.test = subsample(load_dataset(data_dir, name, "test"), config.data.test_count, test_seed)
        self.probe = subsample(held_out, config.train.probe_size, probe_seed)

        sampler = PairSampler(config.data.pair_noise, source=reserve.inputs, clamp=INPUT_RANGE, seed=pair_seed)
        self.pairs = resample_pairs(sampler, len(reserve))
        eval_sampler = PairSampler(config.data.pair_noise, source=reserve.inputs, clamp=INPUT_RANGE,
                                   seed=eval_pair_seed)
        self.eval_pairs = resample_pairs(eval_sampler, min(config.classification.eval_pairs, len(reserve)))
        logger.info("%s: %d train, %d probe, %d test, %d pairs",
                    name, len(self.train), len(self.probe), len(self.test), len(self.pairs))


def run_row(config: ExperimentConfig, run: DatasetRun, row: str, mode: str,
            target: Optional[float], seed: int, artifacts: RunArtifacts) -> Dict[str, Any]:
    """Train one table row, keep its most robust checkpoint and evaluate it."""
    train_seed, noise_seed, pair_seed, eval_pair_seed = derive_seeds(seed, 4)
    update: Dict[str, Any] = {"mode": mode, "seed": train_seed}
    if target is not None:
        update["target_accuracy"] = target
    train_cfg = config.train.model_copy(update=update)
    label = f"{run.name}/{row}"

    net = classification_network(config, run.train.input_dim, run.train.targets.shape[1], run.init_seed)
    pairs: Optional[PairSet] = run.pairs.copy(pair_seed) if mode == "clip" else None
    result = Trainer(train_cfg, probe=run.probe, attack=config.attack, run=label).fit(net, run.train, pairs)
    artifacts.add_history(label, result.history)

    best = result.checkpoint
    reg_weight = float(best.metadata.get("reg_weight", 0.0))
    report = evaluate(
        best.network, run.test, run.eval_pairs.copy(eval_pair_seed), config.attack,
        noise_sigma=config.classification.noise_sigma,
        noise_seed=noise_seed,
        reg_weight=reg_weight if mode != "standard" else 0.0,
        reg_kind=REG_KIND[mode],
        train=run.train,
        pair_updates=config.classification.eval_pair_updates,
        tau=train_cfg.tau,
    )

    stem = f"{run.name}_{row}"
    save_checkpoint(best.network, {**best.metadata, "dataset": run.name, "row": row},
                    artifacts.path(f"checkpoints/{stem}.ckpt"))
    inspected = result.pairs if result.pairs is not None else run.eval_pairs
    count = min(config.classification.inspect_pairs, len(inspected))
    if count:
        subset = PairSet(inspected.left[:count], inspected.right[:count], inspected.min_separation)
        artifacts.write_records(f"pairs_{stem}.csv", pair_predictions(best.network, subset))
    if config.classification.write_attack_traces:
        artifacts.write_records(f"attack_{stem}.csv", attack_traces(best.network, run.test, config.attack))

    return {
        "dataset": run.name,
        "row": row,
        "mode": mode,
        "target_accuracy": target,
        **report.model_dump(),
        "final_reg_weight": result.history.final_reg_weight if mode != "standard" else 0.0,
        "best_epoch": best.metadata.get("epoch"),
    }


def run_classification(config: ExperimentConfig, artifacts: RunArtifacts, data_dir: Path) -> Dict[str, Any]:
    """Seven rows per configured dataset, each reported at its most robust checkpoint.

    Row failures are recorded and the remaining rows still run.

    Returns:
        The report dictionary also written to ``report.json``.
    """
    with artifacts.stage("classification/validate"):
        validate_dataset_paths(config, data_dir)

    dataset_seeds = derive_seeds(config.seed, len(config.data.datasets))
    rows = table_rows(list(config.classification.target_accuracies))
    table: List[Dict[str, Any]] = []

    for name, dataset_seed in zip(config.data.datasets, dataset_seeds):
        with artifacts.stage(f"{name}/data"):
            run = DatasetRun(config, name, data_dir, dataset_seed)

        row_seeds = derive_seeds(dataset_seed, len(rows))
        for (row, mode, target), seed in zip(rows, row_seeds):
            with artifacts.stage(f"{name}/{row}", fatal=False):
                table.append(run_row(config, run, row, mode, target, seed, artifacts))

    artifacts.write_csv("table.csv", TABLE_COLUMNS, ([r.get(c) for c in TABLE_COLUMNS] for r in table))
    report: Dict[str, Any] = {"recipe": "classification", "rows": table}
    if artifacts.timing:
        report["timing"] = artifacts.timings()
    artifacts.write_json("report.json", report)
    return report

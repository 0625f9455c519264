"""Pydantic models for training, attack, split settings and evaluation reports."""
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field


class TrainConfig(BaseModel):
    """Scalar hyperparameters of the training loop."""

    model_config = ConfigDict(extra="forbid")

    mode: Literal["standard", "weight_reg", "clip"] = "clip"
    loss: Literal["mse", "cross_entropy"] = "cross_entropy"
    task: Literal["classification", "regression"] = "classification"

    lambda0: float = Field(0.0, ge=0.0)
    # None resolves to 1e-3 * lambda0 (or 1e-3 when lambda0 is 0)
    d_lambda: Optional[float] = Field(None, gt=0.0)
    mu0: float = Field(0.0, ge=0.0)
    d_mu: float = Field(1e-5, gt=0.0)
    lambda_fixed: bool = False
    target_accuracy: float = Field(0.9, ge=0.0, le=1.0)
    full_set_accuracy: bool = False
    regression_tolerance: float = Field(0.1, gt=0.0)

    tau: float = Field(0.1, gt=0.0)
    update_pairs: bool = True
    resample_pairs_each_epoch: bool = False

    learning_rate: float = Field(0.1, gt=0.0)
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    epochs: int = Field(30, ge=1)
    batch_size: int = Field(128, ge=1)
    gradient_tolerance: Optional[float] = Field(None, gt=0.0)

    probe_size: int = Field(256, ge=0)
    seed: int = 0

    @property
    def resolved_d_lambda(self) -> float:
        if self.d_lambda is not None:
            return self.d_lambda
        return 1e-3 * self.lambda0 if self.lambda0 > 0 else 1e-3

    @property
    def initial_weight(self) -> float:
        """Starting value of the controlled regularization weight."""
        return {"clip": self.lambda0, "weight_reg": self.mu0}.get(self.mode, 0.0)

    @property
    def weight_step(self) -> float:
        return {"clip": self.resolved_d_lambda, "weight_reg": self.d_mu}.get(self.mode, 0.0)


class AttackConfig(BaseModel):
    """PGD settings. Paper values: epsilon 2, step 0.25, 100 iterations."""

    model_config = ConfigDict(extra="forbid")

    epsilon: float = Field(2.0, ge=0.0)
    step_size: float = Field(0.25, gt=0.0)
    iterations: int = Field(100, ge=1)
    step_rule: Literal["sign", "normalized"] = "sign"
    clamp: bool = True
    seed: int = 0


class SplitSpec(BaseModel):
    """Sizes of the train / eval / Lipschitz-reserve partition."""

    model_config = ConfigDict(extra="forbid")

    train_count: int = Field(10000, ge=1)
    eval_count: int = Field(2000, ge=0)
    reserve_count: int = Field(1000, ge=0)
    seed: int = 0

    @property
    def total(self) -> int:
        return self.train_count + self.eval_count + self.reserve_count


class EvalReport(BaseModel):
    """One Table-1 row: accuracies on clean, noisy and attacked data plus Lipschitz figures."""

    model_config = ConfigDict(extra="forbid")

    train_accuracy: Optional[float] = Field(None, ge=0.0, le=1.0)
    clean_accuracy: float = Field(ge=0.0, le=1.0)
    noise_accuracy: float = Field(ge=0.0, le=1.0)
    pgd_accuracy: float = Field(ge=0.0, le=1.0)
    empirical_lipschitz: float = Field(ge=0.0)
    layerwise_bound: float = Field(ge=0.0)
    reg_weight: float = Field(0.0, ge=0.0)
    reg_kind: Literal["none", "lambda", "mu"] = "none"

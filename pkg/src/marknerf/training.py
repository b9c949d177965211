"""Optimization settings and small helpers shared by the trainers."""

from __future__ import annotations

import math
import random
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigurationError, TrainingError


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 5000
    lr: float = 1e-4
    batch_size: int = 1
    seed: int = 0
    log_every: int = 100
    lr_final_ratio: float = 1.0  # exponential decay target; 1.0 keeps lr constant

    def __post_init__(self):
        if int(self.steps) < 1:
            raise ConfigurationError(f"steps must be >= 1, got {self.steps}")
        if not self.lr > 0:
            raise ConfigurationError(f"learning rate must be > 0, got {self.lr}")
        if int(self.batch_size) < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.log_every < 1:
            raise ConfigurationError("log_every must be >= 1")
        if not 0 < self.lr_final_ratio <= 1:
            raise ConfigurationError("lr_final_ratio must lie in (0, 1]")

    def lr_at(self, step: int) -> float:
        return self.lr * self.lr_final_ratio ** (step / self.steps)


def seed_everything(seed: int) -> torch.Generator:
    """Seed python, numpy and torch; return a dedicated torch generator."""
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    return torch.Generator().manual_seed(seed)


def check_finite(loss: torch.Tensor, stage: str, step: int) -> float:
    value = float(loss.detach())
    if not math.isfinite(value):
        raise TrainingError(stage, step)
    return value


def set_lr(opt: torch.optim.Optimizer, lr: float) -> None:
    for group in opt.param_groups:
        group["lr"] = lr

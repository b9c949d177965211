"""Training-set corruption used to simulate attacks on the radiance field."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigurationError
from .imagery import check_image

KINDS = ("none", "gaussian", "salt_pepper", "speckle", "poisson")
ATTACK_KINDS = ("gaussian", "salt_pepper", "speckle", "poisson")


@dataclass(frozen=True)
class NoiseConfig:
    """Noise family and severity.

    Severities are estimates of the visual level of typical noise-layer
    figures; no numeric values are published for them.
    """

    kind: str = "none"
    gaussian_sigma: float = 0.1  # std; variance 0.01
    sp_amount: float = 0.02
    speckle_sigma: float = 0.1
    poisson_scale: float = 255.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown noise kind {self.kind!r}; expected one of {KINDS}")
        if self.gaussian_sigma < 0 or self.speckle_sigma < 0:
            raise ConfigurationError("noise sigma must be >= 0")
        if not 0.0 <= self.sp_amount <= 1.0:
            raise ConfigurationError(f"sp_amount must lie in [0, 1], got {self.sp_amount}")
        if self.poisson_scale <= 0:
            raise ConfigurationError("poisson_scale must be > 0")

    def for_frame(self, index: int) -> "NoiseConfig":
        """Per-frame config with seed ``seed XOR index``."""
        return replace(self, seed=int(self.seed) ^ int(index))


def apply_noise(img: np.ndarray, cfg: NoiseConfig) -> np.ndarray:
    """Corrupt ``img`` according to ``cfg``; deterministic in ``cfg.seed``."""
    check_image(img)
    if cfg.kind not in KINDS:
        raise ConfigurationError(f"unknown noise kind {cfg.kind!r}")
    if cfg.kind == "none":
        return img
    rng = np.random.default_rng(cfg.seed)
    x = img.astype(np.float64)
    if cfg.kind == "gaussian":
        out = x + rng.normal(0.0, cfg.gaussian_sigma, size=x.shape)
    elif cfg.kind == "speckle":
        out = x + x * rng.normal(0.0, cfg.speckle_sigma, size=x.shape)
    elif cfg.kind == "poisson":
        out = rng.poisson(x * cfg.poisson_scale) / cfg.poisson_scale
    else:
        out = x.copy()
        h, w = x.shape[:2]
        hit = rng.random((h, w)) < cfg.sp_amount
        salt = rng.random((h, w)) < 0.5
        out[hit & salt] = 1.0
        out[hit & ~salt] = 0.0
    return np.clip(out, 0.0, 1.0).astype(np.float32)

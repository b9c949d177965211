"""Image quality measures and the watermark training losses.

Everything is implemented in torch so that the same code serves as a
reported metric (float in, float out) and as a differentiable loss term.
Public metric functions accept ``(H, W)``, ``(H, W, C)`` arrays or tensors;
the ``*_nchw`` variants take batched ``(N, C, H, W)`` tensors and keep the
autograd graph.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ValidationError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.3
    beta: float = 0.3
    gamma: float = 0.5
    mu: float = 0.5

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "mu"):
            if getattr(self, name) < 0:
                raise ValidationError(f"loss weight {name} must be >= 0")


@dataclass(frozen=True)
class SsimConstants:
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 255.0
    window: int = 11
    sigma: float = 1.5
    scales: int = 5

    @property
    def c1(self) -> float:
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.dynamic_range) ** 2


SSIM = SsimConstants()


def _to_nchw(x) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(x) if not isinstance(x, torch.Tensor) else x)
    if not t.is_floating_point():
        t = t.to(torch.float64)
    if t.ndim == 2:
        t = t[..., None]
    if t.ndim != 3:
        raise ValidationError(f"expected (H, W) or (H, W, C) image, got shape {tuple(t.shape)}")
    return t.permute(2, 0, 1).unsqueeze(0).to(torch.float64)


def _pair(x, y):
    a, b = _to_nchw(x), _to_nchw(y)
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return a, b


def _check_nchw_pair(x: torch.Tensor, y: torch.Tensor) -> None:
    if x.shape != y.shape:
        raise ValidationError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    if x.ndim != 4:
        raise ValidationError(f"expected (N, C, H, W) tensors, got {tuple(x.shape)}")


# --------------------------------------------------------------------------- mse / psnr


def mse_nchw(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    _check_nchw_pair(x, y)
    return torch.mean((x - y) ** 2)


def mse(x, y) -> float:
    a, b = _pair(x, y)
    return float(torch.mean((a - b) ** 2))


def psnr_from_mse(err: float, peak: float = 1.0) -> float:
    if err <= 0:
        return math.inf
    return 20.0 * math.log10(peak) - 10.0 * math.log10(err)


def psnr(x, y, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical inputs."""
    return psnr_from_mse(mse(x, y), peak)


# --------------------------------------------------------------------------- ssim family


def _gaussian_kernel(size: int, sigma: float, dtype, device) -> torch.Tensor:
    coords = torch.arange(size, dtype=dtype, device=device) - (size - 1) / 2.0
    g = torch.exp(-(coords**2) / (2.0 * sigma**2))
    return g / g.sum()


def _filter(x: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
    c = x.shape[1]
    x = F.conv2d(x, g.view(1, 1, 1, -1).expand(c, 1, 1, -1), groups=c)
    return F.conv2d(x, g.view(1, 1, -1, 1).expand(c, 1, -1, 1), groups=c)


def _ssim_terms(x: torch.Tensor, y: torch.Tensor, consts: SsimConstants):
    """Per-window luminance and contrast-structure maps on the ``[0, L]`` scale."""
    if min(x.shape[-2:]) < consts.window:
        raise ValidationError(f"image {tuple(x.shape[-2:])} smaller than the {consts.window}x{consts.window} window")
    scale = consts.dynamic_range
    x, y = x * scale, y * scale
    g = _gaussian_kernel(consts.window, consts.sigma, x.dtype, x.device)
    mu_x, mu_y = _filter(x, g), _filter(y, g)
    var_x = _filter(x * x, g) - mu_x**2
    var_y = _filter(y * y, g) - mu_y**2
    cov = _filter(x * y, g) - mu_x * mu_y
    lum = (2 * mu_x * mu_y + consts.c1) / (mu_x**2 + mu_y**2 + consts.c1)
    cs = (2 * cov + consts.c2) / (var_x + var_y + consts.c2)
    return lum, cs


def ssim_nchw(x: torch.Tensor, y: torch.Tensor, consts: SsimConstants = SSIM) -> torch.Tensor:
    _check_nchw_pair(x, y)
    lum, cs = _ssim_terms(x, y, consts)
    return torch.mean(lum * cs)


def feasible_scales(height: int, width: int, consts: SsimConstants = SSIM) -> int:
    """Largest scale count (capped at ``consts.scales``) whose coarsest level still fits the window."""
    m = 0
    h, w = height, width
    while m < consts.scales and min(h, w) >= consts.window:
        m += 1
        h, w = h // 2, w // 2
    return m


def ms_ssim_nchw(x: torch.Tensor, y: torch.Tensor, consts: SsimConstants = SSIM,
                 scales: Optional[int] = None) -> torch.Tensor:
    """Product over dyadic scales of the windowed luminance * contrast-structure mean.

    Each scale contributes with unit exponents. Scale terms are floored at zero
    so the product stays in ``[0, 1]``.
    """
    _check_nchw_pair(x, y)
    m_max = feasible_scales(x.shape[-2], x.shape[-1], consts)
    if m_max == 0:
        raise ValidationError(f"image {tuple(x.shape[-2:])} too small for MS-SSIM")
    m = m_max if scales is None else scales
    if m > m_max:
        raise ValidationError(f"{m} scales requested but only {m_max} fit {tuple(x.shape[-2:])}")
    if scales is None and m < consts.scales:
        log.debug("ms_ssim: reduced to %d scales for %s", m, tuple(x.shape[-2:]))
    out = x.new_ones(())
    for i in range(m):
        if i:
            x, y = F.avg_pool2d(x, 2), F.avg_pool2d(y, 2)
        lum, cs = _ssim_terms(x, y, consts)
        out = out * torch.relu(torch.mean(lum * cs))
    return out


def ssim(x, y, consts: SsimConstants = SSIM) -> float:
    a, b = _pair(x, y)
    return float(ssim_nchw(a, b, consts))


def ms_ssim(x, y, consts: SsimConstants = SSIM, scales: Optional[int] = None) -> float:
    a, b = _pair(x, y)
    return float(ms_ssim_nchw(a, b, consts, scales))


# --------------------------------------------------------------------------- watermark robustness


def ber(x, y) -> float:
    """Reciprocal of PSNR; 0 for identical images."""
    p = psnr(x, y)
    return 0.0 if math.isinf(p) else 1.0 / p


def nc(w, w_prime) -> float:
    """Normalized correlation: cosine similarity of the flattened pixel vectors."""
    a, b = _pair(w, w_prime)
    a, b = a.flatten(), b.flatten()
    na, nb = torch.linalg.vector_norm(a), torch.linalg.vector_norm(b)
    if na == 0 or nb == 0:
        raise ValidationError("nc undefined for an all-zero image")
    return float(torch.dot(a, b) / (na * nb))


def nc_score(w, w_prime) -> float:
    """NC for scoring an extraction: an all-black ``w_prime`` correlates with nothing and scores 0.

    The reference ``w`` must still be non-zero.
    """
    a, b = _pair(w, w_prime)
    if not torch.any(b != 0):
        if not torch.any(a != 0):
            raise ValidationError("nc undefined for an all-zero image")
        return 0.0
    return nc(w, w_prime)


# --------------------------------------------------------------------------- losses


def loss_le(k: torch.Tensor, k_prime: torch.Tensor, wts: LossWeights = LossWeights()) -> torch.Tensor:
    """Carrier content loss: ``alpha`` times the per-element MSE of host vs. watermarked."""
    return wts.alpha * mse_nchw(k, k_prime)


def loss_ld(w: torch.Tensor, w_prime: torch.Tensor, wts: LossWeights = LossWeights(),
            consts: SsimConstants = SSIM) -> torch.Tensor:
    """Watermark recovery loss: weighted MSE, 1 - SSIM and 1 - MS-SSIM."""
    _check_nchw_pair(w, w_prime)
    out = wts.beta * mse_nchw(w, w_prime)
    if wts.gamma:
        out = out + wts.gamma * (1.0 - ssim_nchw(w, w_prime, consts))
    if wts.mu:
        out = out + wts.mu * (1.0 - ms_ssim_nchw(w, w_prime, consts))
    return out

"""Watermark embedding network and the joint embed/extract pre-training.

The embedder fuses a host image ``k`` and a watermark ``w`` through a densely
connected stack of 3x3 convolutions::

    A = conv(w)            3 -> 32
    B = conv(k)            3 -> 32
    C = conv([A, B])      64 -> 32
    D = conv([A, B, C])   96 -> 32
    k' = conv([A, B, C, D]) 128 -> 3   (linear, clamped to [0, 1])
"""

from __future__ import annotations

import logging
from typing import TYPE_CHECKING, List, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from .errors import ConfigurationError, ValidationError
from .imagery import check_image, from_tensor, to_tensor
from .metrics import LossWeights, loss_ld, loss_le, psnr_from_mse
from .training import TrainConfig, check_finite, seed_everything, set_lr

if TYPE_CHECKING:
    from .extractor import Extractor  # runtime import is deferred: extractor imports this module

log = logging.getLogger(__name__)


def conv_block(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(cin, cout, 3, 1, 1), nn.BatchNorm2d(cout), nn.ReLU(inplace=True))


def clamp_output(x: torch.Tensor, training: bool) -> torch.Tensor:
    # straight-through in training so out-of-range pixels still receive gradient
    if training:
        return x + (x.clamp(0.0, 1.0) - x).detach()
    return x.clamp(0.0, 1.0)


class Embedder(nn.Module):
    def __init__(self, width: int = 32, strength: float = 0.01):
        super().__init__()
        self.width = width
        self.strength = strength
        self.conv_w = conv_block(3, width)
        self.conv_k = conv_block(3, width)
        self.conv_c = conv_block(2 * width, width)
        self.conv_d = conv_block(3 * width, width)
        self.out = nn.Conv2d(4 * width, 3, 3, 1, 1)
        if strength:
            # start from the identity embedding k' = k
            nn.init.zeros_(self.out.weight)
            nn.init.zeros_(self.out.bias)

    def config(self) -> dict:
        return {"width": self.width, "strength": self.strength}

    def forward(self, k: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
        if k.shape != w.shape:
            raise ValidationError(f"host {tuple(k.shape)} and watermark {tuple(w.shape)} differ in shape")
        a = self.conv_w(w)
        b = self.conv_k(k)
        c = self.conv_c(torch.cat([a, b], 1))
        d = self.conv_d(torch.cat([a, b, c], 1))
        out = self.out(torch.cat([a, b, c, d], 1))
        if self.strength:
            out = k + self.strength * torch.tanh(out)
        return clamp_output(out, self.training)


@torch.no_grad()
def embed(model: Embedder, k: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Watermarked copy of host ``k`` (inference mode, stored BN statistics)."""
    check_image(k, "host")
    check_image(w, "watermark")
    if k.shape != w.shape:
        raise ValidationError(f"host {k.shape} and watermark {w.shape} differ in shape")
    was_training = model.training
    model.eval()
    try:
        out = model(to_tensor(k), to_tensor(w))
    finally:
        model.train(was_training)
    return from_tensor(out)


def train_joint(hosts: Sequence[np.ndarray], w: np.ndarray, cfg: TrainConfig,
                weights: LossWeights = LossWeights(), width: int = 32, strength: float = 0.01,
                ) -> Tuple[Embedder, Extractor, List[dict]]:
    """Train embedder and extractor end to end on ``(host, w)`` pairs.

    Each step draws ``cfg.batch_size`` hosts, embeds ``w`` into them and
    decodes it back; the objective is ``loss_le + loss_ld``. Returns both
    networks and the training curve (one row per ``cfg.log_every`` steps).
    """
    from .extractor import Extractor

    if len(hosts) < 1:
        raise ConfigurationError("train_joint needs at least one host image")
    for i, h in enumerate(hosts):
        check_image(h, f"host[{i}]")
        if h.shape != w.shape:
            raise ValidationError(f"host[{i}] {h.shape} does not match watermark {w.shape}")
    gen = seed_everything(cfg.seed)
    emb, ext = Embedder(width, strength), Extractor(width)
    host_t = torch.cat([to_tensor(h) for h in hosts])
    w_t = to_tensor(w)
    params = list(emb.parameters()) + list(ext.parameters())
    opt = torch.optim.Adam(params, lr=cfg.lr)
    curve = []
    emb.train()
    ext.train()
    for step in range(cfg.steps + 1):
        idx = torch.randint(len(hosts), (cfg.batch_size,), generator=gen)
        k = host_t[idx]
        wb = w_t.expand_as(k)
        k_prime = emb(k, wb)
        w_prime = ext(k_prime)
        le = loss_le(k, k_prime, weights)
        ld = loss_ld(wb, w_prime, weights)
        total = le + ld
        value = check_finite(total, "train_joint", step)
        if step % cfg.log_every == 0 or step == cfg.steps:
            mse_k = float(torch.mean((k - k_prime.detach()) ** 2))
            curve.append({"step": step, "le": float(le.detach()), "ld": float(ld.detach()), "loss": value,
                          "psnr": psnr_from_mse(mse_k)})
            log.info("joint step %d loss %.5f le %.6f ld %.5f psnr %.2f", step, value, float(le.detach()), float(ld.detach()),
                     curve[-1]["psnr"])
        if step == cfg.steps:
            break
        set_lr(opt, cfg.lr_at(step))
        opt.zero_grad(set_to_none=True)
        total.backward()
        opt.step()
    emb.eval()
    ext.eval()
    return emb, ext, curve

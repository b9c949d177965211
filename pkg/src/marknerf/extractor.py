"""Watermark extraction network and its secret-view fine-tuning.

Dense stack of 3x3 convolutions::

    E = conv(s)              3 -> 32
    F = conv(E)             32 -> 32
    G = conv([E, F])        64 -> 32
    w' = conv([E, F, G])    96 -> 3   (linear, clamped to [0, 1])

Fine-tuning deliberately overfits the network to a single rendered view so
that only that view decodes to the watermark.
"""

from __future__ import annotations

import logging
from typing import List, Sequence

import numpy as np
import torch
from torch import nn

from .embedder import clamp_output, conv_block
from .errors import ValidationError
from .imagery import check_image, from_tensor, to_tensor
from .metrics import LossWeights, loss_ld
from .training import TrainConfig, check_finite, seed_everything, set_lr

log = logging.getLogger(__name__)


class Extractor(nn.Module):
    def __init__(self, width: int = 32):
        super().__init__()
        self.width = width
        self.conv_e = conv_block(3, width)
        self.conv_f = conv_block(width, width)
        self.conv_g = conv_block(2 * width, width)
        self.out = nn.Conv2d(3 * width, 3, 3, 1, 1)

    def config(self) -> dict:
        return {"width": self.width}

    def forward(self, s: torch.Tensor) -> torch.Tensor:
        if s.ndim != 4 or s.shape[1] != 3:
            raise ValidationError(f"extractor expects (N, 3, H, W), got {tuple(s.shape)}")
        e = self.conv_e(s)
        f = self.conv_f(e)
        g = self.conv_g(torch.cat([e, f], 1))
        return clamp_output(self.out(torch.cat([e, f, g], 1)), self.training)


@torch.no_grad()
def extract(model: Extractor, s: np.ndarray) -> np.ndarray:
    """Candidate watermark decoded from rendered view ``s``."""
    check_image(s, "view")
    was_training = model.training
    model.eval()
    try:
        out = model(to_tensor(s))
    finally:
        model.train(was_training)
    return from_tensor(out)


def _freeze_batchnorm(model: nn.Module) -> None:
    for m in model.modules():
        if isinstance(m, nn.BatchNorm2d):
            m.eval()


def finetune_extractor(model: Extractor, secret_render: np.ndarray, w: np.ndarray,
                       cfg: TrainConfig, negatives: Sequence[np.ndarray] = (),
                       neg_weight: float = 0.0, weights: LossWeights = LossWeights(),
                       ) -> List[dict]:
    """Overfit ``model`` (in place) so that ``secret_render`` decodes to ``w``.

    Batch-norm statistics stay frozen, so the objective seen during training
    is exactly what inference computes. With ``neg_weight > 0`` each
    negative view is additionally pushed toward a constant mid-gray output.
    Returns the per-step log (``step``, ``loss``, ``ld``, ``nc``).
    """
    from .metrics import nc_score

    check_image(secret_render, "secret_render")
    check_image(w, "watermark")
    if secret_render.shape != w.shape:
        raise ValidationError(f"render {secret_render.shape} and watermark {w.shape} differ in shape")
    seed_everything(cfg.seed)
    s_t, w_t = to_tensor(secret_render), to_tensor(w)
    neg_t = torch.cat([to_tensor(check_image(n, "negative")) for n in negatives]) if negatives else None
    gray = torch.full_like(w_t, 0.5)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    model.train()
    _freeze_batchnorm(model)
    curve = []
    for step in range(cfg.steps + 1):
        w_prime = model(s_t)
        ld = loss_ld(w_t, w_prime, weights)
        loss = ld
        if neg_t is not None and neg_weight > 0:
            neg_out = model(neg_t)
            loss = loss + neg_weight * torch.mean((neg_out - gray.expand_as(neg_out)) ** 2)
        value = check_finite(loss, "finetune_extractor", step)
        if step % cfg.log_every == 0 or step == cfg.steps:
            out = w_prime.detach().clamp(0, 1)
            curve.append({"step": step, "loss": value, "ld": float(ld.detach()), "nc": nc_score(w, from_tensor(out))})
            log.info("finetune step %d ld %.5f nc %.4f", step, value, curve[-1]["nc"])
        if step == cfg.steps:
            break
        set_lr(opt, cfg.lr_at(step))
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    model.eval()
    return curve

"""Compact neural radiance field: encoding, coarse/fine MLPs, volume rendering, training.

Volume rendering uses the alpha-compositing quadrature::

    delta_i = t_{i+1} - t_i
    alpha_i = 1 - exp(-sigma_i * delta_i)
    T_i     = prod_{j<i} (1 - alpha_j)
    w_i     = T_i * alpha_i
    C       = sum_i w_i c_i  (+ (1 - sum_i w_i) on a white background)

The last interval is either an open-ended sentinel (``far_sentinel=True``,
the usual rendering choice) or closed at ``t_far`` so the sum integrates
exactly over ``[t_near, t_far]``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from torch import nn

from .camera import CameraIntrinsics, CameraPose, RayBatch, rays_for_pose
from .errors import ConfigurationError, NumericError, ValidationError
from .metrics import psnr_from_mse
from .training import TrainConfig, check_finite, seed_everything, set_lr

log = logging.getLogger(__name__)

SENTINEL_DELTA = 1e10


@dataclass(frozen=True)
class EncodingConfig:
    L_pos: int = 10
    L_dir: int = 4
    include_input: bool = True

    def __post_init__(self):
        if self.L_pos < 0 or self.L_dir < 0:
            raise ConfigurationError("encoding octaves must be >= 0")

    def width(self, octaves: int) -> int:
        return 3 * (2 * octaves + (1 if self.include_input else 0))

    @property
    def pos_width(self) -> int:
        return self.width(self.L_pos)

    @property
    def dir_width(self) -> int:
        return self.width(self.L_dir)


@dataclass(frozen=True)
class FieldConfig:
    """MLP shape. Defaults are the full-size network; desk runs shrink them."""

    depth: int = 8
    width: int = 256
    skip: int = 5  # layer index that re-reads the encoded position
    color_width: int = 128
    density_bias: float = -0.1

    def __post_init__(self):
        if self.depth < 1 or self.width < 1 or self.color_width < 1:
            raise ConfigurationError("field depth/width must be >= 1")


@dataclass(frozen=True)
class SamplingConfig:
    n_coarse: int = 64
    n_fine: int = 64
    perturb: bool = True
    white_background: bool = True
    far_sentinel: bool = True
    chunk: int = 2048

    def __post_init__(self):
        if self.n_coarse < 2:
            raise ConfigurationError(f"n_coarse must be >= 2, got {self.n_coarse}")
        if self.n_fine < 0:
            raise ConfigurationError(f"n_fine must be >= 0, got {self.n_fine}")


def positional_encode(v, L: int, include_input: bool = True) -> torch.Tensor:
    """``[v, sin(2^0 pi v), cos(2^0 pi v), ..., sin(2^{L-1} pi v), cos(2^{L-1} pi v)]`` on the last axis."""
    v = torch.as_tensor(v)
    if not torch.all(torch.isfinite(v)):
        raise ValidationError("positional_encode: non-finite input")
    parts = [v] if include_input else []
    for j in range(L):
        arg = (2.0**j) * math.pi * v
        parts += [torch.sin(arg), torch.cos(arg)]
    if not parts:
        return v[..., :0]
    return torch.cat(parts, -1)


class FieldMLP(nn.Module):
    """Maps encoded position and direction to ``(rgb, sigma)``."""

    def __init__(self, enc: EncodingConfig, cfg: FieldConfig):
        super().__init__()
        self.skip = cfg.skip
        layers = []
        for i in range(cfg.depth):
            cin = enc.pos_width if i == 0 else cfg.width
            if i == cfg.skip and i > 0:
                cin += enc.pos_width
            layers.append(nn.Linear(cin, cfg.width))
        self.trunk = nn.ModuleList(layers)
        self.sigma = nn.Linear(cfg.width, 1)
        self.feature = nn.Linear(cfg.width, cfg.width)
        self.color_hidden = nn.Linear(cfg.width + enc.dir_width, cfg.color_width)
        self.color = nn.Linear(cfg.color_width, 3)
        nn.init.constant_(self.sigma.bias, cfg.density_bias)

    def forward(self, x_enc: torch.Tensor, d_enc: torch.Tensor):
        h = x_enc
        for i, layer in enumerate(self.trunk):
            if i == self.skip and i > 0:
                h = torch.cat([x_enc, h], -1)
            h = torch.relu(layer(h))
        sigma = torch.relu(self.sigma(h)).squeeze(-1)
        h = torch.relu(self.color_hidden(torch.cat([self.feature(h), d_enc], -1)))
        return torch.sigmoid(self.color(h)), sigma


class RadianceField(nn.Module):
    def __init__(self, enc: EncodingConfig = EncodingConfig(), cfg: FieldConfig = FieldConfig()):
        super().__init__()
        self.enc = enc
        self.cfg = cfg
        self.coarse = FieldMLP(enc, cfg)
        self.fine = FieldMLP(enc, cfg)

    def config(self) -> dict:
        return {"encoding": asdict(self.enc), "field": asdict(self.cfg)}

    @classmethod
    def from_config(cls, cfg: dict) -> "RadianceField":
        return cls(EncodingConfig(**cfg["encoding"]), FieldConfig(**cfg["field"]))

    def query(self, net: FieldMLP, pts: torch.Tensor, dirs: torch.Tensor):
        """Evaluate ``net`` at points ``(R, S, 3)`` seen along unit directions ``(R, 3)``."""
        x_enc = positional_encode(pts, self.enc.L_pos, self.enc.include_input)
        d_enc = positional_encode(dirs, self.enc.L_dir, self.enc.include_input)
        d_enc = d_enc[:, None, :].expand(*pts.shape[:-1], d_enc.shape[-1])
        return net(x_enc, d_enc)


# --------------------------------------------------------------------------- quadrature


def composite(sigma: torch.Tensor, rgb: torch.Tensor, t: torch.Tensor, white_background: bool = True,
              far_sentinel: bool = True, t_far: Optional[float] = None):
    """Alpha-composite samples along each ray.

    Args:
        sigma: densities ``(R, S)``.
        rgb: colors ``(R, S, 3)``.
        t: sorted sample distances ``(R, S)``.
        far_sentinel: open the last interval to infinity; otherwise close it
            at ``t_far``.

    Returns:
        ``(color (R, 3), weights (R, S))``.
    """
    deltas = t[..., 1:] - t[..., :-1]
    if far_sentinel:
        last = torch.full_like(t[..., :1], SENTINEL_DELTA)
    else:
        if t_far is None:
            raise ValidationError("t_far required when far_sentinel is off")
        last = (t_far - t[..., -1:]).clamp_min(0.0)
    deltas = torch.cat([deltas, last], -1)
    tau = sigma * deltas
    alpha = -torch.expm1(-tau)
    # exclusive cumulative optical depth: T_i = exp(-sum_{j<i} tau_j) = prod_{j<i} (1 - alpha_j)
    depth = torch.cumsum(torch.cat([torch.zeros_like(tau[..., :1]), tau[..., :-1]], -1), -1)
    weights = alpha * torch.exp(-depth)
    color = torch.sum(weights[..., None] * rgb, -2)
    if white_background:
        color = color + (1.0 - weights.sum(-1, keepdim=True))
    return color, weights


def stratified_samples(n_rays: int, n: int, near: float, far: float, perturb: bool,
                       generator: Optional[torch.Generator] = None, dtype=torch.float32) -> torch.Tensor:
    """``n`` depths per ray: evenly spaced, or jittered uniformly within each bin."""
    base = torch.linspace(0.0, 1.0, n, dtype=dtype)
    t = near + (far - near) * base
    t = t.expand(n_rays, n)
    if perturb:
        mids = 0.5 * (t[..., 1:] + t[..., :-1])
        upper = torch.cat([mids, t[..., -1:]], -1)
        lower = torch.cat([t[..., :1], mids], -1)
        u = torch.rand(t.shape, generator=generator, dtype=dtype)
        t = lower + (upper - lower) * u
    return t.contiguous()


def sample_pdf(bins: torch.Tensor, weights: torch.Tensor, n: int, deterministic: bool,
               generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Inverse-CDF sampling of ``n`` depths from piecewise-constant ``weights`` over ``bins``.

    ``bins`` has one more column than ``weights``.
    """
    weights = weights + 1e-5
    pdf = weights / weights.sum(-1, keepdim=True)
    cdf = torch.cat([torch.zeros_like(pdf[..., :1]), torch.cumsum(pdf, -1)], -1)
    if deterministic:
        u = torch.linspace(0.0, 1.0, n, dtype=bins.dtype).expand(*cdf.shape[:-1], n).contiguous()
    else:
        u = torch.rand(*cdf.shape[:-1], n, generator=generator, dtype=bins.dtype)
    idx = torch.searchsorted(cdf.contiguous(), u, right=True)
    below = (idx - 1).clamp(0, cdf.shape[-1] - 1)
    above = idx.clamp(0, cdf.shape[-1] - 1)
    cdf_lo, cdf_hi = torch.gather(cdf, -1, below), torch.gather(cdf, -1, above)
    bin_lo, bin_hi = torch.gather(bins, -1, below), torch.gather(bins, -1, above)
    denom = torch.where(cdf_hi - cdf_lo < 1e-5, torch.ones_like(cdf_hi), cdf_hi - cdf_lo)
    return bin_lo + (u - cdf_lo) / denom * (bin_hi - bin_lo)


class RenderResult(NamedTuple):
    coarse_rgb: torch.Tensor
    fine_rgb: torch.Tensor
    weights: torch.Tensor
    t: torch.Tensor


def _check_output(rgb, sigma, offset: int):
    bad = ~(torch.isfinite(sigma).all(-1) & torch.isfinite(rgb).all(-1).all(-1))
    if bool(bad.any()):
        ray = int(torch.nonzero(bad)[0]) + offset
        raise NumericError(f"non-finite field output on ray {ray}")


def _render_chunk(field: RadianceField, o, d, near, far, scfg: SamplingConfig, generator, offset):
    t = stratified_samples(o.shape[0], scfg.n_coarse, near, far, scfg.perturb, generator, o.dtype)
    pts = o[:, None, :] + t[..., None] * d[:, None, :]
    rgb, sigma = field.query(field.coarse, pts, d)
    _check_output(rgb, sigma, offset)
    coarse, weights = composite(sigma, rgb, t, scfg.white_background, scfg.far_sentinel, far)
    if scfg.n_fine == 0:
        return coarse, coarse, weights, t
    mids = 0.5 * (t[..., 1:] + t[..., :-1])
    t_fine = sample_pdf(mids, weights[..., 1:-1].detach(), scfg.n_fine, not scfg.perturb, generator)
    t_all, _ = torch.sort(torch.cat([t, t_fine.detach()], -1), -1)
    pts = o[:, None, :] + t_all[..., None] * d[:, None, :]
    rgb, sigma = field.query(field.fine, pts, d)
    _check_output(rgb, sigma, offset)
    fine, weights = composite(sigma, rgb, t_all, scfg.white_background, scfg.far_sentinel, far)
    return coarse, fine, weights, t_all


def render_rays(field: RadianceField, rays: Union[RayBatch, Tuple[torch.Tensor, torch.Tensor, float, float]],
                scfg: SamplingConfig = SamplingConfig(), generator: Optional[torch.Generator] = None,
                ) -> RenderResult:
    """Coarse and fine colors plus the fine-pass weights for a batch of rays."""
    if isinstance(rays, RayBatch):
        o = torch.from_numpy(rays.origins).float()
        d = torch.from_numpy(rays.directions).float()
        near, far = rays.t_near, rays.t_far
    else:
        o, d, near, far = rays
    outs = [_render_chunk(field, o[i:i + scfg.chunk], d[i:i + scfg.chunk], near, far, scfg, generator, i)
            for i in range(0, o.shape[0], scfg.chunk)]
    return RenderResult(*(torch.cat(parts, 0) for parts in zip(*outs)))


@torch.no_grad()
def render_view(field: RadianceField, intr: CameraIntrinsics, pose: CameraPose,
                scfg: SamplingConfig = SamplingConfig(), t_near: float = 2.0, t_far: float = 6.0) -> np.ndarray:
    """Full-image render (fine output, no jitter)."""
    scfg = SamplingConfig(**{**asdict(scfg), "perturb": False})
    was_training = field.training
    field.eval()
    try:
        res = render_rays(field, rays_for_pose(intr, pose, t_near, t_far), scfg)
    finally:
        field.train(was_training)
    img = res.fine_rgb.clamp(0.0, 1.0).reshape(intr.height, intr.width, 3)
    return img.numpy().astype(np.float32)


# --------------------------------------------------------------------------- training


@dataclass(frozen=True)
class NerfTrainConfig(TrainConfig):
    steps: int = 20000
    lr: float = 5e-4
    batch_size: int = 1024
    lr_final_ratio: float = 0.1
    precrop_steps: int = 500
    precrop_frac: float = 0.5
    val_every: int = 2000


def _all_rays(frames, intr: CameraIntrinsics, t_near: float, t_far: float):
    origins, dirs, colors = [], [], []
    for frame in frames:
        rays = rays_for_pose(intr, frame.pose, t_near, t_far)
        origins.append(rays.origins)
        dirs.append(rays.directions)
        colors.append(frame.image.reshape(-1, 3))
    as_t = lambda xs: torch.from_numpy(np.concatenate(xs)).float()
    return as_t(origins), as_t(dirs), as_t(colors)


def _center_mask(intr: CameraIntrinsics, frac: float, n_frames: int) -> torch.Tensor:
    j, i = np.meshgrid(np.arange(intr.height), np.arange(intr.width), indexing="ij")
    dh, dw = intr.height * frac / 2, intr.width * frac / 2
    keep = (np.abs(j + 0.5 - intr.height / 2) <= dh) & (np.abs(i + 0.5 - intr.width / 2) <= dw)
    idx = np.nonzero(keep.reshape(-1))[0]
    per = intr.height * intr.width
    return torch.from_numpy(np.concatenate([idx + f * per for f in range(n_frames)]))


def train_nerf(scene, scfg: SamplingConfig = SamplingConfig(), tcfg: NerfTrainConfig = NerfTrainConfig(),
               enc: EncodingConfig = EncodingConfig(), field_cfg: FieldConfig = FieldConfig(),
               val_frames: Sequence = (), t_near: float = 2.0, t_far: float = 6.0,
               ) -> Tuple[RadianceField, List[dict]]:
    """Fit a radiance field to ``scene.frames`` with the coarse + fine photometric loss.

    Returns the field and a log with one row per ``tcfg.log_every`` steps
    (``step``, ``loss``, ``psnr``) plus ``val_psnr`` rows every ``tcfg.val_every``.
    """
    if len(scene.frames) < 2:
        raise ValidationError("train_nerf needs at least 2 frames")
    gen = seed_everything(tcfg.seed)
    field = RadianceField(enc, field_cfg)
    o_all, d_all, c_all = _all_rays(scene.frames, scene.intrinsics, t_near, t_far)
    crop_idx = _center_mask(scene.intrinsics, tcfg.precrop_frac, len(scene.frames)) if tcfg.precrop_steps else None
    opt = torch.optim.Adam(field.parameters(), lr=tcfg.lr)
    history = []
    field.train()
    for step in range(1, tcfg.steps + 1):
        if crop_idx is not None and step <= tcfg.precrop_steps:
            sel = crop_idx[torch.randint(len(crop_idx), (tcfg.batch_size,), generator=gen)]
        else:
            sel = torch.randint(o_all.shape[0], (tcfg.batch_size,), generator=gen)
        res = render_rays(field, (o_all[sel], d_all[sel], t_near, t_far), scfg, gen)
        target = c_all[sel]
        loss_c = torch.mean((res.coarse_rgb - target) ** 2)
        loss_f = torch.mean((res.fine_rgb - target) ** 2)
        loss = loss_c + loss_f if scfg.n_fine else loss_c
        value = check_finite(loss, "train_nerf", step)
        set_lr(opt, tcfg.lr_at(step))
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if step % tcfg.log_every == 0 or step == 1 or step == tcfg.steps:
            row = {"step": step, "loss": value, "psnr": psnr_from_mse(float(loss_f.detach()))}
            history.append(row)
            log.info("nerf step %d loss %.5f psnr %.2f", step, value, row["psnr"])
        if val_frames and (step % tcfg.val_every == 0 or step == tcfg.steps):
            history.append({"step": step, "val_psnr": validation_psnr(field, scene.intrinsics, val_frames, scfg,
                                                                       t_near, t_far)})
            log.info("nerf step %d val psnr %.2f", step, history[-1]["val_psnr"])
    field.eval()
    return field, history


def validation_psnr(field, intr, frames, scfg, t_near=2.0, t_far=6.0) -> float:
    errs = [float(np.mean((render_view(field, intr, f.pose, scfg, t_near, t_far) - f.image) ** 2)) for f in frames]
    return psnr_from_mse(float(np.mean(errs)))

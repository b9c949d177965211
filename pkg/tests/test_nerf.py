import math

import numpy as np
import pytest
import torch

from marknerf.camera import CameraIntrinsics, RayBatch, spherical_pose
from marknerf.dataset import Frame, Scene, load_scene
from marknerf.errors import ConfigurationError, NumericError, ValidationError
from marknerf.nerf import (EncodingConfig, FieldConfig, NerfTrainConfig, RadianceField, SamplingConfig, composite,
                           positional_encode, render_rays, render_view, sample_pdf, stratified_samples, train_nerf,
                           validation_psnr)

SMALL_ENC = EncodingConfig(L_pos=4, L_dir=2)
SMALL_FIELD = FieldConfig(depth=2, width=32, skip=1, color_width=16)


class ConstantField(RadianceField):
    """sigma(x) = sigma0, c(x) = c0 everywhere."""

    def __init__(self, sigma0, c0):
        super().__init__(SMALL_ENC, SMALL_FIELD)
        self.sigma0 = sigma0
        self.c0 = torch.as_tensor(c0, dtype=torch.float64)

    def query(self, net, pts, dirs):
        shape = pts.shape[:-1]
        return self.c0.expand(*shape, 3).to(pts.dtype), torch.full(shape, self.sigma0, dtype=pts.dtype)


def _rays(n, dtype=torch.float64, seed=0):
    g = torch.Generator().manual_seed(seed)
    d = torch.nn.functional.normalize(torch.randn(n, 3, generator=g, dtype=dtype), dim=-1)
    return torch.zeros(n, 3, dtype=dtype), d


# --------------------------------------------------------------------------- encoding


def test_encode_zero_input():
    out = positional_encode(torch.zeros(3), 10)
    assert out.shape == (63,)
    body = out[3:].view(10, 2, 3)
    assert torch.all(body[:, 0] == 0) and torch.all(body[:, 1] == 1)


def test_encode_degenerate():
    v = torch.tensor([0.3, -0.2, 0.9])
    assert torch.equal(positional_encode(v, 0), v)
    assert positional_encode(v, 0, include_input=False).shape == (0,)


def test_encode_hand_values():
    out = positional_encode(torch.tensor([0.5, 0.0, 0.0], dtype=torch.float64), 2)
    # layout: v, sin(pi v), cos(pi v), sin(2 pi v), cos(2 pi v)
    x = out[0::3]
    assert torch.allclose(x, torch.tensor([0.5, 1.0, 0.0, 0.0, -1.0], dtype=torch.float64), atol=1e-12)


def test_encode_width_contract():
    enc = EncodingConfig()
    assert enc.pos_width == 63 and enc.dir_width == 27
    assert positional_encode(torch.zeros(5, 7, 3), 10).shape == (5, 7, 63)
    with pytest.raises(ValidationError):
        positional_encode(torch.tensor([math.nan, 0, 0]), 2)
    with pytest.raises(ConfigurationError):
        EncodingConfig(L_pos=-1)


# --------------------------------------------------------------------------- field


def test_field_output_ranges():
    torch.manual_seed(0)
    field = RadianceField(SMALL_ENC, SMALL_FIELD)
    pts = torch.randn(64, 8, 3) * 3
    dirs = torch.nn.functional.normalize(torch.randn(64, 3), dim=-1)
    rgb, sigma = field.query(field.coarse, pts, dirs)
    assert rgb.shape == (64, 8, 3) and sigma.shape == (64, 8)
    assert torch.all(sigma >= 0) and torch.all((rgb >= 0) & (rgb <= 1))


def test_full_size_layout():
    field = RadianceField()
    trunk = field.coarse.trunk
    assert len(trunk) == 8 and all(layer.out_features == 256 for layer in trunk)
    assert trunk[5].in_features == 256 + 63
    assert field.coarse.feature.out_features == 256
    assert field.coarse.color_hidden.in_features == 256 + 27
    assert field.coarse.color_hidden.out_features == 128


def test_field_config_round_trip():
    field = RadianceField(SMALL_ENC, SMALL_FIELD)
    again = RadianceField.from_config(field.config())
    assert again.enc == field.enc and again.cfg == field.cfg


# --------------------------------------------------------------------------- quadrature


def test_empty_space_renders_white():
    o, d = _rays(16)
    res = render_rays(ConstantField(0.0, [0.2, 0.3, 0.4]), (o, d, 2.0, 6.0),
                      SamplingConfig(n_coarse=8, n_fine=8, perturb=False))
    assert torch.all(res.fine_rgb == 1.0) and torch.all(res.coarse_rgb == 1.0)


@pytest.mark.parametrize("sigma0", [0.05, 0.3, 1.0])
def test_homogeneous_medium_matches_closed_form(sigma0):
    c0 = [0.2, 0.5, 0.9]
    o, d = _rays(4)
    scfg = SamplingConfig(n_coarse=256, n_fine=0, perturb=False, white_background=False, far_sentinel=False)
    res = render_rays(ConstantField(sigma0, c0), (o, d, 2.0, 6.0), scfg)
    expected = torch.tensor(c0, dtype=torch.float64) * (1 - math.exp(-sigma0 * 4.0))
    assert torch.allclose(res.coarse_rgb, expected.expand(4, 3), atol=1e-3)


def test_homogeneous_medium_converges_with_jittered_samples():
    sigma0, c0 = 0.4, [0.7, 0.1, 0.3]
    expected = 0.7 * (1 - math.exp(-sigma0 * 4.0))
    errs = []
    for n in (4, 16, 256):
        scfg = SamplingConfig(n_coarse=n, n_fine=0, perturb=True, white_background=False, far_sentinel=False)
        o, d = _rays(256)
        res = render_rays(ConstantField(sigma0, c0), (o, d, 2.0, 6.0), scfg, torch.Generator().manual_seed(1))
        errs.append(float(torch.mean(torch.abs(res.coarse_rgb[:, 0] - expected))))
    assert errs[2] <= 1e-3
    assert errs[0] > errs[2]


def test_weights_sum_identity_on_random_fields():
    g = torch.Generator().manual_seed(0)
    sigma = torch.rand(10_000, 32, generator=g, dtype=torch.float64) * torch.rand(10_000, 1, generator=g,
                                                                                  dtype=torch.float64) * 20
    rgb = torch.rand(10_000, 32, 3, generator=g, dtype=torch.float64)
    t, _ = torch.sort(2 + 4 * torch.rand(10_000, 32, generator=g, dtype=torch.float64), -1)
    for sentinel in (True, False):
        _, w = composite(sigma, rgb, t, white_background=False, far_sentinel=sentinel, t_far=6.0)
        deltas = torch.cat([t[:, 1:] - t[:, :-1],
                            torch.full_like(t[:, :1], 1e10) if sentinel else 6.0 - t[:, -1:]], -1)
        alpha = 1 - torch.exp(-sigma * deltas)
        total = w.sum(-1)
        assert torch.all(w >= 0)
        assert torch.all(total <= 1 + 1e-9)
        assert torch.allclose(total, 1 - torch.prod(1 - alpha, -1), atol=1e-6)


def test_composite_gradient_matches_finite_differences():
    g = torch.Generator().manual_seed(3)
    sigma = (torch.rand(3, 12, generator=g, dtype=torch.float64) * 2).requires_grad_(True)
    rgb = torch.rand(3, 12, 3, generator=g, dtype=torch.float64).requires_grad_(True)
    t = torch.linspace(2, 6, 12, dtype=torch.float64).expand(3, 12)
    probe = torch.rand(3, 3, generator=g, dtype=torch.float64)

    def f(s, c):
        return torch.sum(composite(s, c, t, True, False, 6.0)[0] * probe)

    f(sigma, rgb).backward()
    h = 1e-6
    for tensor, grad in ((sigma, sigma.grad), (rgb, rgb.grad)):
        flat = tensor.detach().flatten()
        for i in range(0, flat.numel(), 5):
            plus, minus = flat.clone(), flat.clone()
            plus[i] += h
            minus[i] -= h
            args_p = (plus.view_as(tensor), rgb.detach()) if tensor is sigma else (sigma.detach(), plus.view_as(tensor))
            args_m = (minus.view_as(tensor), rgb.detach()) if tensor is sigma else (sigma.detach(), minus.view_as(tensor))
            fd = (float(f(*args_p)) - float(f(*args_m))) / (2 * h)
            a = float(grad.flatten()[i])
            assert abs(a - fd) <= 1e-4 * max(abs(fd), 1e-6) + 1e-9


def test_composite_requires_t_far_when_closed():
    with pytest.raises(ValidationError):
        composite(torch.zeros(1, 4), torch.zeros(1, 4, 3), torch.linspace(2, 6, 4)[None], far_sentinel=False)


def test_stratified_samples_stay_in_bins():
    t = stratified_samples(100, 16, 2.0, 6.0, True, torch.Generator().manual_seed(0))
    assert torch.all(t >= 2.0) and torch.all(t <= 6.0)
    assert torch.all(t[:, 1:] >= t[:, :-1])
    assert torch.equal(stratified_samples(2, 5, 2.0, 6.0, False)[0], torch.linspace(2, 6, 5))


def test_sample_pdf_concentrates_on_heavy_bin():
    bins = torch.linspace(0, 10, 11, dtype=torch.float64)[None]
    weights = torch.zeros(1, 10, dtype=torch.float64)
    weights[0, 7] = 1.0
    s = sample_pdf(bins, weights, 200, deterministic=False, generator=torch.Generator().manual_seed(0))
    frac = float(((s >= 7) & (s <= 8)).double().mean())
    assert frac > 0.9
    det = sample_pdf(bins, weights, 50, deterministic=True)
    assert torch.all(det[:, 1:] >= det[:, :-1])


def test_non_finite_field_output_names_ray():
    class Broken(ConstantField):
        def query(self, net, pts, dirs):
            rgb, sigma = super().query(net, pts, dirs)
            sigma = sigma.clone()
            sigma[2, 0] = math.nan
            return rgb, sigma

    o, d = _rays(5)
    with pytest.raises(NumericError, match="ray 2"):
        render_rays(Broken(0.1, [0.5, 0.5, 0.5]), (o, d, 2.0, 6.0), SamplingConfig(n_coarse=4, n_fine=0))


def test_sampling_config_validation():
    with pytest.raises(ConfigurationError):
        SamplingConfig(n_coarse=1)
    with pytest.raises(ConfigurationError):
        SamplingConfig(n_fine=-1)


def test_render_rays_accepts_ray_batch():
    torch.manual_seed(0)
    field = RadianceField(SMALL_ENC, SMALL_FIELD)
    rb = RayBatch(np.zeros((7, 3)), np.tile([0.0, 0.0, -1.0], (7, 1)))
    res = render_rays(field, rb, SamplingConfig(n_coarse=8, n_fine=4, chunk=3))
    assert res.coarse_rgb.shape == (7, 3) and res.fine_rgb.shape == (7, 3)
    assert res.weights.shape == (7, 12) and res.t.shape == (7, 12)


# --------------------------------------------------------------------------- views and training


def test_render_view_deterministic_and_white_when_empty():
    intr = CameraIntrinsics(8, 6, 10.0)
    pose = spherical_pose(30, 20, 4.0)
    torch.manual_seed(0)
    field = RadianceField(SMALL_ENC, SMALL_FIELD)
    scfg = SamplingConfig(n_coarse=8, n_fine=8)
    a = render_view(field, intr, pose, scfg)
    b = render_view(field, intr, pose, scfg)
    assert a.shape == (6, 8, 3) and np.array_equal(a, b)
    white = render_view(ConstantField(0.0, [0, 0, 0]), intr, pose, scfg)
    assert np.all(white == 1.0)


def _white_scene():
    intr = CameraIntrinsics(8, 8, 10.0)
    frames = [Frame(np.ones((8, 8, 3), np.float32), spherical_pose(a, 30, 4.0)) for a in (0, 90, 180)]
    return Scene(intr, frames)


def test_initial_loss_near_zero_on_white_scene():
    tcfg = NerfTrainConfig(steps=1, batch_size=256, precrop_steps=0, log_every=1)
    _, hist = train_nerf(_white_scene(), SamplingConfig(n_coarse=16, n_fine=16), tcfg, SMALL_ENC,
                         FieldConfig(depth=2, width=32, skip=1, color_width=16, density_bias=-1.0))
    assert hist[0]["step"] == 1 and hist[0]["loss"] < 1e-2


def test_both_networks_are_trained():
    tcfg = NerfTrainConfig(steps=2, batch_size=64, precrop_steps=0, log_every=1, seed=4)
    scene = _white_scene()
    scene.frames[0] = Frame(np.zeros((8, 8, 3), np.float32), scene.frames[0].pose)
    torch.manual_seed(4)
    init = RadianceField(SMALL_ENC, SMALL_FIELD)
    field, _ = train_nerf(scene, SamplingConfig(n_coarse=8, n_fine=8), tcfg, SMALL_ENC, SMALL_FIELD)
    for name in ("coarse", "fine"):
        before = getattr(init, name).color.weight
        after = getattr(field, name).color.weight
        assert not torch.equal(before, after), name


def test_training_reduces_loss_and_fits_training_views(tiny_scene_root):
    scene = load_scene(tiny_scene_root, "train")
    val = load_scene(tiny_scene_root, "val").frames
    scfg = SamplingConfig(n_coarse=16, n_fine=16)
    tcfg = NerfTrainConfig(steps=400, lr=1e-3, batch_size=256, log_every=20, val_every=400, precrop_steps=40)
    field, hist = train_nerf(scene, scfg, tcfg, SMALL_ENC, FieldConfig(depth=3, width=64, skip=2, color_width=32),
                             val)
    losses = [h["loss"] for h in hist if "loss" in h]
    assert losses[-1] < losses[0]
    white = np.mean([np.mean((f.image - 1.0) ** 2) for f in val])
    assert val_psnr_of(hist) > -10 * np.log10(white) + 3.0  # clearly better than an empty white scene
    train_psnr = validation_psnr(field, scene.intrinsics, scene.frames, scfg)
    assert train_psnr >= val_psnr_of(hist)


def val_psnr_of(hist):
    return [h["val_psnr"] for h in hist if "val_psnr" in h][-1]


def test_train_config_validation():
    with pytest.raises(ConfigurationError):
        NerfTrainConfig(steps=0)

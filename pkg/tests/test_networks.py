import io

import numpy as np
import pytest
import torch

from marknerf.embedder import Embedder, embed, train_joint
from marknerf.errors import ConfigurationError, TrainingError, ValidationError
from marknerf.extractor import Extractor, extract, finetune_extractor
from marknerf.metrics import nc
from marknerf.training import TrainConfig, check_finite


def _img(rng, h, w):
    return rng.random((h, w, 3)).astype(np.float32)


def _scrambled(model):
    """A model with non-trivial weights and BN statistics."""
    torch.manual_seed(0)
    for p in model.parameters():
        torch.nn.init.normal_(p, 0, 0.2)
    for m in model.modules():
        if isinstance(m, torch.nn.BatchNorm2d):
            m.running_mean.uniform_(-0.1, 0.1)
            m.running_var.uniform_(0.5, 1.5)
    return model.eval()


@pytest.mark.parametrize("h, w", [(8, 8), (13, 21), (64, 64)])
def test_shape_preservation(rng, h, w):
    emb, ext = Embedder(width=8).eval(), Extractor(width=8).eval()
    k, wm = _img(rng, h, w), _img(rng, h, w)
    assert embed(emb, k, wm).shape == (h, w, 3)
    assert extract(ext, k).shape == (h, w, 3)


def test_full_size_shapes(rng):
    k = _img(rng, 256, 256)
    assert embed(Embedder(), k, k).shape == (256, 256, 3)
    assert extract(Extractor(), k).shape == (256, 256, 3)


@pytest.mark.parametrize("strength", [0.0, 0.01])
def test_untrained_output_in_range(rng, strength):
    emb = _scrambled(Embedder(width=8, strength=strength))
    out = embed(emb, _img(rng, 16, 16), _img(rng, 16, 16))
    assert np.all(np.isfinite(out)) and out.min() >= 0 and out.max() <= 1
    out = extract(_scrambled(Extractor(width=8)), _img(rng, 16, 16))
    assert np.all(np.isfinite(out)) and out.min() >= 0 and out.max() <= 1


def test_bounded_residual(rng):
    emb = _scrambled(Embedder(width=8, strength=0.01))
    k = np.clip(_img(rng, 16, 16), 0.05, 0.95)
    out = embed(emb, k, _img(rng, 16, 16))
    assert np.max(np.abs(out - k)) <= 0.01 + 1e-6
    assert np.max(np.abs(out - k)) > 0


def test_channel_plan():
    emb, ext = Embedder(), Extractor()
    assert [emb.conv_c[0].in_channels, emb.conv_d[0].in_channels, emb.out.in_channels] == [64, 96, 128]
    assert [ext.conv_g[0].in_channels, ext.out.in_channels, ext.out.out_channels] == [64, 96, 3]


@pytest.mark.parametrize("name", ["conv_w", "conv_k", "conv_c", "conv_d"])
def test_embedder_dense_paths_are_live(rng, name):
    emb = _scrambled(Embedder(width=8, strength=0.0))
    k, w = torch.rand(1, 3, 12, 12), torch.rand(1, 3, 12, 12)
    base = emb(k, w)
    handle = getattr(emb, name).register_forward_hook(lambda m, i, o: torch.zeros_like(o))
    try:
        ablated = emb(k, w)
    finally:
        handle.remove()
    assert not torch.allclose(base, ablated)


@pytest.mark.parametrize("name", ["conv_e", "conv_f", "conv_g"])
def test_extractor_dense_paths_are_live(name):
    ext = _scrambled(Extractor(width=8))
    s = torch.rand(1, 3, 12, 12)
    base = ext(s)
    handle = getattr(ext, name).register_forward_hook(lambda m, i, o: torch.zeros_like(o))
    try:
        ablated = ext(s)
    finally:
        handle.remove()
    assert not torch.allclose(base, ablated)


def test_serialization_round_trip_is_bitwise(rng):
    emb = _scrambled(Embedder(width=8, strength=0.0))
    buf = io.BytesIO()
    torch.save(emb.state_dict(), buf)
    buf.seek(0)
    again = Embedder(**emb.config())
    again.load_state_dict(torch.load(buf, weights_only=True))
    k, w = _img(rng, 16, 16), _img(rng, 16, 16)
    assert np.array_equal(embed(again, k, w), embed(emb, k, w))


def test_shape_mismatch_rejected(rng):
    with pytest.raises(ValidationError):
        embed(Embedder(width=8), _img(rng, 8, 8), _img(rng, 8, 9))
    with pytest.raises(ValidationError):
        train_joint([_img(rng, 8, 8)], _img(rng, 8, 9), TrainConfig(steps=1))
    with pytest.raises(ConfigurationError):
        train_joint([], _img(rng, 8, 8), TrainConfig(steps=1))


def test_zero_steps_is_a_configuration_error():
    with pytest.raises(ConfigurationError):
        TrainConfig(steps=0)


def test_joint_training_descends(rng):
    host = _img(rng, 64, 64)
    w = _img(rng, 64, 64)
    cfg = TrainConfig(steps=200, lr=1e-3, batch_size=1, log_every=200)
    _, _, curve = train_joint([host], w, cfg, width=8, strength=0.0)
    assert curve[0]["step"] == 0 and curve[-1]["step"] == 200
    assert curve[-1]["le"] < curve[0]["le"]
    assert set(curve[0]) == {"step", "le", "ld", "loss", "psnr"}


def test_joint_training_is_deterministic(rng):
    host, w = _img(rng, 16, 16), _img(rng, 16, 16)
    cfg = TrainConfig(steps=5, batch_size=2, log_every=1, seed=3)
    a = train_joint([host, host[::-1].copy()], w, cfg, width=8)[2]
    b = train_joint([host, host[::-1].copy()], w, cfg, width=8)[2]
    assert a == b


def test_check_finite_names_step():
    with pytest.raises(TrainingError, match="step 7"):
        check_finite(torch.tensor(float("nan")), "train_joint", 7)


def test_finetune_descends_and_fits(rng):
    torch.manual_seed(0)
    ext = Extractor(width=8)
    s, w = _img(rng, 16, 16), _img(rng, 16, 16)
    curve = finetune_extractor(ext, s, w, TrainConfig(steps=150, lr=1e-2, log_every=150))
    assert curve[-1]["ld"] < curve[0]["ld"]
    assert curve[-1]["nc"] > curve[0]["nc"]
    assert nc(w, extract(ext, s)) == pytest.approx(curve[-1]["nc"], abs=1e-4)


def test_finetune_negatives_push_toward_gray(rng):
    s, other, w = _img(rng, 16, 16), _img(rng, 16, 16), _img(rng, 16, 16)
    torch.manual_seed(0)
    plain = Extractor(width=8)
    finetune_extractor(plain, s, w, TrainConfig(steps=100, lr=1e-2, log_every=100))
    torch.manual_seed(0)
    neg = Extractor(width=8)
    curve = finetune_extractor(neg, s, w, TrainConfig(steps=100, lr=1e-2, log_every=100), [other], 5.0)
    assert curve[-1]["loss"] > curve[-1]["ld"]
    gray = np.full_like(w, 0.5)
    assert np.mean((extract(neg, other) - gray) ** 2) < np.mean((extract(plain, other) - gray) ** 2)


def test_finetune_keeps_batchnorm_statistics(rng):
    ext = _scrambled(Extractor(width=8))
    before = ext.conv_e[1].running_mean.clone()
    finetune_extractor(ext, _img(rng, 16, 16), _img(rng, 16, 16), TrainConfig(steps=3, log_every=1))
    assert torch.equal(before, ext.conv_e[1].running_mean)
    assert not ext.training


def test_finetune_logs_collapsed_output_instead_of_raising(rng):
    ext = Extractor(width=8)
    with torch.no_grad():
        ext.out.bias.fill_(-10.0)
    curve = finetune_extractor(ext, _img(rng, 16, 16), _img(rng, 16, 16), TrainConfig(steps=1, lr=1e-12, log_every=1))
    assert [row["nc"] for row in curve] == [0.0, 0.0]


def test_finetune_shape_mismatch(rng):
    with pytest.raises(ValidationError):
        finetune_extractor(Extractor(width=8), _img(rng, 8, 8), _img(rng, 8, 9), TrainConfig(steps=1))

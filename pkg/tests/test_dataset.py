import json

import numpy as np
import pytest
from PIL import Image as PILImage

from marknerf.camera import rotate_about_z
from marknerf.dataset import build_training_set, load_scene, nearest_frame
from marknerf.embedder import Embedder
from marknerf.errors import ConfigurationError, ValidationError
from marknerf.metrics import psnr
from marknerf.noise import NoiseConfig


def _scene_dir(tmp_path, size=16, n=3, matrix=None):
    (tmp_path / "train").mkdir()
    frames = []
    for i in range(n):
        arr = np.full((size, size, 4), 255, np.uint8)
        arr[..., 0] = 40 * i
        PILImage.fromarray(arr, "RGBA").save(tmp_path / "train" / f"r_{i}.png")
        m = np.eye(4)
        m[:3, 3] = [0, 0, 4 + i]
        frames.append({"file_path": f"./train/r_{i}", "transform_matrix": (matrix if i == 1 and matrix else m.tolist())})
    (tmp_path / "transforms_train.json").write_text(json.dumps({"camera_angle_x": 0.69, "frames": frames}))
    return tmp_path


def test_load_scene_basic(tmp_path):
    scene = load_scene(_scene_dir(tmp_path))
    assert len(scene) == 3
    assert scene.frames[2].image.shape == (16, 16, 3)
    assert scene.frames[2].image[0, 0, 0] == pytest.approx(80 / 255)
    assert scene.intrinsics.width == 16


def test_downscale_contract(tmp_path):
    full = load_scene(_scene_dir(tmp_path, size=32))
    small = load_scene(tmp_path, downscale=8)
    assert small.frames[0].image.shape == (4, 4, 3)
    assert small.intrinsics.focal == pytest.approx(full.intrinsics.focal / 8)
    assert np.allclose(small.frames[1].image, full.frames[1].image[:4, :4], atol=1e-6)


def test_frame_count_read_from_file(tiny_scene_root):
    doc = json.loads((tiny_scene_root / "transforms_train.json").read_text())
    assert len(load_scene(tiny_scene_root, "train")) == len(doc["frames"])


def test_bad_last_row_names_frame(tmp_path):
    bad = np.eye(4)
    bad[3] = [0, 0, 1, 1]
    with pytest.raises(ValidationError, match="frame 1"):
        load_scene(_scene_dir(tmp_path, matrix=bad.tolist()))


def test_missing_split(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_scene(tmp_path, "val")
    with pytest.raises(ConfigurationError):
        load_scene(tmp_path, downscale=0)


def test_nearest_frame(tiny_scene_root):
    scene = load_scene(tiny_scene_root)
    for i, f in enumerate(scene.frames):
        assert nearest_frame(scene, f.pose) == i
    nudged = rotate_about_z(scene.frames[3].pose, 0.5)
    assert nearest_frame(scene, nudged) == 3


def test_identity_path(tiny_scene_root, watermark16):
    scene = load_scene(tiny_scene_root)
    out = build_training_set(scene, watermark16, Embedder(width=8), NoiseConfig(), [])
    for a, b in zip(scene.frames, out.frames):
        assert np.array_equal(a.image, b.image) and a.pose == b.pose


def test_locality(tiny_scene_root, watermark16):
    scene = load_scene(tiny_scene_root)
    emb = Embedder(width=8, strength=0.01)
    torch_seed_weights(emb)
    out = build_training_set(scene, watermark16, emb, NoiseConfig(), [0])
    assert not np.array_equal(out.frames[0].image, scene.frames[0].image)
    for a, b in zip(scene.frames[1:], out.frames[1:]):
        assert np.array_equal(a.image, b.image)
    noisy = build_training_set(scene, watermark16, emb, NoiseConfig(kind="gaussian", seed=1), [0])
    assert np.array_equal(noisy.frames[0].image, out.frames[0].image)
    assert all(not np.array_equal(a.image, b.image) for a, b in zip(scene.frames[1:], noisy.frames[1:]))
    both = build_training_set(scene, watermark16, emb, NoiseConfig(kind="gaussian", seed=1), [0], noise_all=True)
    assert not np.array_equal(both.frames[0].image, out.frames[0].image)


def test_embed_all_respects_residual_floor(tiny_scene_root, watermark16):
    scene = load_scene(tiny_scene_root)
    emb = Embedder(width=8, strength=0.01)
    torch_seed_weights(emb)
    out = build_training_set(scene, watermark16, emb, NoiseConfig(), range(len(scene)))
    # a residual bounded by 0.01 can never drop below 40 dB
    assert all(psnr(a.image, b.image) >= 40.0 for a, b in zip(scene.frames, out.frames))


def test_bad_embed_index(tiny_scene_root, watermark16):
    scene = load_scene(tiny_scene_root)
    with pytest.raises(ConfigurationError):
        build_training_set(scene, watermark16, Embedder(width=8), NoiseConfig(), [99])


def torch_seed_weights(model):
    import torch

    torch.manual_seed(0)
    torch.nn.init.normal_(model.out.weight, 0, 0.3)
    model.eval()

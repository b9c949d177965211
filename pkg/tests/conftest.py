import numpy as np
import pytest
import torch

from marknerf.synthetic import make_watermark, write_scene


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_scene_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("scene16")
    write_scene(root, size=16, counts={"train": 6, "val": 2, "test": 2}, seed=3)
    return root


@pytest.fixture(scope="session")
def watermark16():
    return make_watermark(16, seed=0)


TINY_OVERRIDES = [
    "scene.val_frames=1",
    "joint.steps=10", "joint.width=8", "joint.batch_size=2", "joint.log_every=5",
    "nerf.steps=20", "nerf.depth=2", "nerf.width=32", "nerf.skip=1", "nerf.color_width=16",
    "nerf.L_pos=4", "nerf.L_dir=2", "nerf.n_coarse=8", "nerf.n_fine=8", "nerf.batch_size=128",
    "nerf.precrop_steps=5", "nerf.log_every=5", "nerf.val_every=10",
    "extractor.steps=10", "extractor.log_every=5",
    "sweep.angles=0, 10, 90",
    "attack.kinds=gaussian",
]


@pytest.fixture
def tiny_args(tiny_scene_root, tmp_path):
    """CLI arguments shared by every stage of a seconds-long pipeline run."""

    def make(out=None):
        out = out or tmp_path / "run"
        args = ["--scene", str(tiny_scene_root), "--out", str(out)]
        for o in TINY_OVERRIDES:
            args += ["--set", o]
        return args

    return make


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)

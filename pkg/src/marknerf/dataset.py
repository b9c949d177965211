"""NeRF-synthetic scene ingestion and watermarked training-set assembly."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, List

import numpy as np

from .camera import CameraIntrinsics, CameraPose, pose_distance
from .errors import ConfigurationError, ValidationError
from .imagery import check_image, load_image
from .noise import NoiseConfig, apply_noise


@dataclass(frozen=True)
class Frame:
    image: np.ndarray = field(repr=False)
    pose: CameraPose


@dataclass(frozen=True)
class Scene:
    intrinsics: CameraIntrinsics
    frames: List[Frame]
    name: str = "scene"

    def __post_init__(self):
        if len(self.frames) < 2:
            raise ValidationError(f"scene {self.name!r} needs at least 2 frames, got {len(self.frames)}")
        shape = (self.intrinsics.height, self.intrinsics.width, 3)
        for i, f in enumerate(self.frames):
            if f.image.shape != shape:
                raise ValidationError(f"frame {i}: image {f.image.shape} does not match intrinsics {shape}")

    def __len__(self):
        return len(self.frames)

    @property
    def poses(self) -> List[CameraPose]:
        return [f.pose for f in self.frames]


def _resolve_frame_path(root: Path, file_path: str) -> Path:
    p = root / file_path
    return p if p.suffix else p.with_suffix(".png")


def load_scene(root, split: str = "train", downscale: int = 1) -> Scene:
    """Load ``transforms_<split>.json`` and its frames from ``root``."""
    root = Path(root)
    if downscale < 1:
        raise ConfigurationError(f"downscale must be >= 1, got {downscale}")
    doc_path = root / f"transforms_{split}.json"
    if not doc_path.is_file():
        raise FileNotFoundError(f"missing transforms file: {doc_path}")
    doc = json.loads(doc_path.read_text())
    frames_doc = doc.get("frames") or []
    if "camera_angle_x" not in doc:
        raise ValidationError(f"{doc_path}: camera_angle_x missing")
    poses = []
    for i, fr in enumerate(frames_doc):
        try:
            poses.append(CameraPose(np.array(fr["transform_matrix"], dtype=np.float64)))
        except ValidationError as exc:
            raise ValidationError(f"{doc_path} frame {i} ({fr.get('file_path')}): {exc}") from exc
    images = [load_image(_resolve_frame_path(root, fr["file_path"])) for fr in frames_doc]
    if not images:
        raise ValidationError(f"{doc_path}: no frames")
    h, w = images[0].shape[:2]
    intr = CameraIntrinsics.from_camera_angle_x(w, h, float(doc["camera_angle_x"]))
    if downscale > 1:
        intr = intr.scaled(downscale)
        images = [_downscale(img, downscale) for img in images]
    frames = [Frame(img, pose) for img, pose in zip(images, poses)]
    return Scene(intr, frames, name=root.name)


def _downscale(img: np.ndarray, factor: int) -> np.ndarray:
    h, w = img.shape[0] // factor, img.shape[1] // factor
    # box filter over whole factor x factor blocks
    return img[: h * factor, : w * factor].reshape(h, factor, w, factor, 3).mean((1, 3)).astype(np.float32)


def nearest_frame(scene: Scene, pose: CameraPose) -> int:
    """Index of the frame whose rotation is closest to ``pose`` (ties: nearer camera center)."""
    keys = [(round(pose_distance(f.pose, pose), 9), float(np.linalg.norm(f.pose.center - pose.center)))
            for f in scene.frames]
    return min(range(len(keys)), key=keys.__getitem__)


def build_training_set(scene: Scene, watermark: np.ndarray, embedder, noise_cfg: NoiseConfig,
                       embed_indices: Iterable[int], noise_all: bool = False) -> Scene:
    """Watermark the frames in ``embed_indices`` and pass the rest through the noise layer.

    Poses and intrinsics are untouched. With ``noise_all`` the embedded
    frames are noised too (after embedding). Per-frame noise seeds are
    ``noise_cfg.seed XOR frame_index``.
    """
    from .embedder import embed

    indices = sorted(set(int(i) for i in embed_indices))
    for i in indices:
        if not 0 <= i < len(scene.frames):
            raise ConfigurationError(f"embed index {i} outside 0..{len(scene.frames) - 1}")
    if indices:
        check_image(watermark, "watermark")
    frames = []
    for i, frame in enumerate(scene.frames):
        img = frame.image
        if i in indices:
            img = embed(embedder, img, watermark)
            if noise_all:
                img = apply_noise(img, noise_cfg.for_frame(i))
        else:
            img = apply_noise(img, noise_cfg.for_frame(i))
        frames.append(replace(frame, image=img))
    return Scene(scene.intrinsics, frames, scene.name)

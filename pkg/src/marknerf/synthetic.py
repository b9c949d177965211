"""Procedural stand-ins for NeRF-synthetic scenes and ImageNet-style watermarks.

The generated scene directory has the same layout as the Blender synthetic
datasets (``transforms_{train,val,test}.json`` plus RGBA PNG frames on a
transparent background), so it exercises exactly the ingestion path a real
scene would. Geometry is ray-traced analytically: a textured sphere, a small
sphere and a box resting on a checkered slab.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from PIL import ImageDraw

from .camera import CameraIntrinsics, CameraPose, rays_for_pose, spherical_pose

CAMERA_ANGLE_X = 0.6911112070083618  # same field of view as the Blender scenes
RADIUS = 4.0
LIGHT = np.array([0.4, -0.5, 0.77]) / np.linalg.norm([0.4, -0.5, 0.77])

_SPHERES = [  # center, radius, material id
    (np.array([0.0, 0.0, 0.05]), 0.85, 0),
    (np.array([-0.75, 0.8, -0.35]), 0.4, 1),
]
_BOXES = [  # min corner, max corner, material id
    (np.array([0.45, -1.2, -0.75]), np.array([1.15, -0.5, -0.05]), 2),
    (np.array([-1.3, -1.3, -0.95]), np.array([1.3, 1.3, -0.75]), 3),
]


def _hit_sphere(o, d, center, radius):
    oc = o - center
    b = np.sum(oc * d, -1)
    c = np.sum(oc * oc, -1) - radius**2
    disc = b * b - c
    t = -b - np.sqrt(np.maximum(disc, 0.0))
    return np.where((disc > 0) & (t > 1e-6), t, np.inf)


def _hit_box(o, d, lo, hi):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t0, t1 = (lo - o) * inv, (hi - o) * inv
    tmin = np.nanmax(np.minimum(t0, t1), -1)
    tmax = np.nanmin(np.maximum(t0, t1), -1)
    return np.where((tmax >= tmin) & (tmin > 1e-6), tmin, np.inf)


def _box_normal(p, lo, hi):
    center, half = (lo + hi) / 2, (hi - lo) / 2
    q = (p - center) / half
    axis = np.argmax(np.abs(q), -1)
    n = np.zeros_like(p)
    n[np.arange(len(p)), axis] = np.sign(q[np.arange(len(p)), axis])
    return n


def _albedo(mat, p, n):
    if mat == 0:
        az = np.arctan2(n[:, 1], n[:, 0])
        return np.stack([0.55 + 0.35 * np.sin(3 * az + 2 * n[:, 2]),
                         0.5 + 0.35 * np.sin(5 * n[:, 2] + 1.0),
                         0.5 + 0.35 * np.cos(2 * az - 3 * n[:, 2])], -1)
    if mat == 1:
        return np.tile([0.15, 0.35, 0.85], (len(p), 1)) + 0.1 * np.sin(6 * p[:, :1])
    if mat == 2:
        stripes = 0.5 + 0.5 * np.sin(9 * (p[:, 0] + p[:, 2]))
        return np.stack([0.85 + 0 * stripes, 0.35 + 0.3 * stripes, 0.1 + 0 * stripes], -1)
    check = (np.floor(p[:, 0] * 2.5) + np.floor(p[:, 1] * 2.5)) % 2
    return np.stack([0.35 + 0.3 * check, 0.55 + 0.2 * check, 0.35 + 0.1 * check], -1)


def trace(origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """RGBA radiance for each ray, ``(N, 4)``; misses are transparent."""
    hits = [(_hit_sphere(origins, dirs, c, r), "s", (c, r), m) for c, r, m in _SPHERES]
    hits += [(_hit_box(origins, dirs, lo, hi), "b", (lo, hi), m) for lo, hi, m in _BOXES]
    ts = np.stack([h[0] for h in hits], -1)
    which = np.argmin(ts, -1)
    t = ts[np.arange(len(ts)), which]
    out = np.zeros((len(origins), 4))
    for idx, (_, kind, geom, mat) in enumerate(hits):
        sel = (which == idx) & np.isfinite(t)
        if not np.any(sel):
            continue
        p = origins[sel] + t[sel, None] * dirs[sel]
        n = (p - geom[0]) / geom[1] if kind == "s" else _box_normal(p, *geom)
        shade = 0.35 + 0.65 * np.clip(n @ LIGHT, 0.0, 1.0)
        out[sel, :3] = np.clip(_albedo(mat, p, n) * shade[:, None], 0.0, 1.0)
        out[sel, 3] = 1.0
    return out


def render_rgba(intr: CameraIntrinsics, pose: CameraPose, supersample: int = 2) -> np.ndarray:
    """Anti-aliased RGBA render of the procedural scene, ``(H, W, 4)`` in [0, 1]."""
    hi = CameraIntrinsics(intr.width * supersample, intr.height * supersample, intr.focal * supersample)
    rays = rays_for_pose(hi, pose)
    rgba = trace(rays.origins, rays.directions).reshape(hi.height, hi.width, 4)
    rgba = rgba.reshape(intr.height, supersample, intr.width, supersample, 4).mean((1, 3))
    # premultiplied -> straight alpha for PNG storage
    alpha = rgba[..., 3:]
    rgb = np.where(alpha > 0, rgba[..., :3] / np.maximum(alpha, 1e-8), 0.0)
    return np.concatenate([rgb, alpha], -1)


def _split_poses(split: str, count: int, rng: np.random.Generator):
    if split == "train":
        az = rng.uniform(0.0, 360.0, count)
        el = np.degrees(np.arcsin(rng.uniform(math.sin(math.radians(10)), math.sin(math.radians(75)), count)))
    else:
        offset = 7.0 if split == "val" else 0.0
        az = np.linspace(0.0, 360.0, count, endpoint=False) + offset
        el = np.full(count, 30.0)
    return [spherical_pose(a, e, RADIUS) for a, e in zip(az, el)]


def write_scene(root, size: int = 64, counts=None, seed: int = 0, supersample: int = 2) -> Path:
    """Write a NeRF-synthetic-layout scene under ``root`` and return the path."""
    root = Path(root)
    counts = counts or {"train": 100, "val": 10, "test": 10}
    intr = CameraIntrinsics.from_camera_angle_x(size, size, CAMERA_ANGLE_X)
    rng = np.random.default_rng(seed)
    for split, count in counts.items():
        (root / split).mkdir(parents=True, exist_ok=True)
        frames = []
        for i, pose in enumerate(_split_poses(split, count, rng)):
            rgba = render_rgba(intr, pose, supersample)
            name = f"{split}/r_{i}"
            PILImage.fromarray(np.round(rgba * 255).astype(np.uint8), mode="RGBA").save(root / f"{name}.png")
            frames.append({"file_path": f"./{name}", "transform_matrix": pose.c2w.tolist()})
        doc = {"camera_angle_x": CAMERA_ANGLE_X, "frames": frames}
        (root / f"transforms_{split}.json").write_text(json.dumps(doc, indent=2))
    return root


def make_watermark(size: int = 64, seed: int = 0) -> np.ndarray:
    """A deterministic logo-like RGB watermark, ``(size, size, 3)`` in [0, 1]."""
    rng = np.random.default_rng(seed)
    big = size * 4
    im = PILImage.new("RGB", (big, big), (20, 24, 40))
    draw = ImageDraw.Draw(im)
    palette = [(235, 200, 60), (220, 70, 60), (70, 170, 230), (240, 240, 240), (90, 200, 120)]
    for _ in range(7):
        x0, y0 = rng.uniform(0, big * 0.75, 2)
        ext = rng.uniform(big * 0.15, big * 0.45)
        color = palette[int(rng.integers(len(palette)))]
        box = [x0, y0, min(big, x0 + ext), min(big, y0 + ext)]
        if rng.random() < 0.5:
            draw.ellipse(box, fill=color)
        else:
            draw.rectangle(box, fill=color)
    r = big // 2
    draw.ellipse([r - big // 5, r - big // 5, r + big // 5, r + big // 5], outline=(250, 250, 250), width=big // 24)
    im = im.resize((size, size), PILImage.BILINEAR)
    return np.asarray(im, dtype=np.float32) / 255.0

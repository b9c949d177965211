"""Pinhole cameras, ray generation, and pose algebra for the secret view.

Conventions follow the NeRF-synthetic (Blender) layout: ``c2w`` maps camera
coordinates to world coordinates, the camera looks along its local ``-z``
axis with ``+y`` up, and the world's vertical axis is ``+z``.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

ORTHO_TOL = 1e-5


@dataclass(frozen=True)
class CameraIntrinsics:
    width: int
    height: int
    focal: float

    def __post_init__(self):
        if int(self.width) < 1 or int(self.height) < 1:
            raise ValidationError(f"image size must be >= 1, got {self.width}x{self.height}")
        if not (math.isfinite(self.focal) and self.focal > 0):
            raise ValidationError(f"focal must be positive, got {self.focal}")

    @classmethod
    def from_camera_angle_x(cls, width: int, height: int, camera_angle_x: float) -> "CameraIntrinsics":
        return cls(int(width), int(height), 0.5 * width / math.tan(0.5 * camera_angle_x))

    def scaled(self, factor: int) -> "CameraIntrinsics":
        """Intrinsics after integer downscaling of the image by ``factor``."""
        return CameraIntrinsics(self.width // factor, self.height // factor, self.focal / factor)

    def fingerprint(self) -> str:
        text = f"{self.width} {self.height} {self.focal:.16f}"
        return hashlib.sha256(text.encode()).hexdigest()


def validate_c2w(c2w: np.ndarray, label: str = "pose") -> np.ndarray:
    m = np.asarray(c2w, dtype=np.float64)
    if m.shape != (4, 4):
        raise ValidationError(f"{label}: expected 4x4 matrix, got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValidationError(f"{label}: non-finite entries")
    if np.max(np.abs(m[3] - np.array([0.0, 0.0, 0.0, 1.0]))) > ORTHO_TOL:
        raise ValidationError(f"{label}: last row must be (0, 0, 0, 1), got {m[3].tolist()}")
    r = m[:3, :3]
    if np.max(np.abs(r.T @ r - np.eye(3))) > ORTHO_TOL:
        raise ValidationError(f"{label}: rotation block is not orthonormal")
    if np.linalg.det(r) < 0:
        raise ValidationError(f"{label}: rotation block has determinant -1")
    return m


@dataclass(frozen=True, eq=False)
class CameraPose:
    """Camera-to-world extrinsic. The secret key is one of these."""

    c2w: np.ndarray = field(repr=False)

    def __post_init__(self):
        m = validate_c2w(self.c2w).copy()
        m.setflags(write=False)
        object.__setattr__(self, "c2w", m)

    @property
    def rotation(self) -> np.ndarray:
        return self.c2w[:3, :3]

    @property
    def center(self) -> np.ndarray:
        return self.c2w[:3, 3]

    def __eq__(self, other) -> bool:
        return isinstance(other, CameraPose) and np.array_equal(self.c2w, other.c2w)

    def __hash__(self):
        return hash(self.c2w.tobytes())

    def __repr__(self):
        return f"CameraPose(center={np.round(self.center, 4).tolist()})"


@dataclass(frozen=True)
class RayBatch:
    origins: np.ndarray
    directions: np.ndarray
    t_near: float = 2.0
    t_far: float = 6.0

    def __post_init__(self):
        if self.origins.shape != self.directions.shape or self.origins.ndim != 2 or self.origins.shape[1] != 3:
            raise ValidationError(f"rays must be (N, 3), got {self.origins.shape} / {self.directions.shape}")
        if not 0 <= self.t_near < self.t_far:
            raise ValidationError(f"need 0 <= t_near < t_far, got {self.t_near}, {self.t_far}")

    def __len__(self):
        return self.origins.shape[0]


def camera_directions(intr: CameraIntrinsics) -> np.ndarray:
    """Unnormalized camera-frame directions through pixel centers, ``(H*W, 3)`` row-major."""
    i, j = np.meshgrid(np.arange(intr.width, dtype=np.float64) + 0.5,
                       np.arange(intr.height, dtype=np.float64) + 0.5, indexing="xy")
    dirs = np.stack([(i - 0.5 * intr.width) / intr.focal,
                     -(j - 0.5 * intr.height) / intr.focal,
                     -np.ones_like(i)], axis=-1)
    return dirs.reshape(-1, 3)


def rays_for_pose(intr: CameraIntrinsics, pose: CameraPose, t_near: float = 2.0, t_far: float = 6.0) -> RayBatch:
    """One unit-length ray per pixel, in row-major pixel order."""
    if not isinstance(pose, CameraPose):
        pose = CameraPose(np.asarray(pose))
    dirs = camera_directions(intr) @ pose.rotation.T
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(pose.center, dirs.shape).copy()
    return RayBatch(origins, dirs, t_near, t_far)


def rotation_z(degrees: float) -> np.ndarray:
    if not math.isfinite(degrees):
        raise ValidationError(f"rotation angle must be finite, got {degrees}")
    th = math.radians(degrees)
    c, s = math.cos(th), math.sin(th)
    rz = np.eye(4)
    rz[:2, :2] = [[c, -s], [s, c]]
    return rz


def rotate_about_z(pose: CameraPose, degrees: float) -> CameraPose:
    """Orbit the camera about the world vertical axis by ``degrees``."""
    return CameraPose(rotation_z(degrees) @ pose.c2w)


def pose_distance(a: CameraPose, b: CameraPose) -> float:
    """Geodesic angle between the two rotation blocks, in degrees."""
    r = a.rotation.T @ b.rotation
    # atan2 of sin (skew part) and cos (trace) stays accurate near 0 where acos does not
    sin = 0.5 * np.linalg.norm([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    cos = (np.trace(r) - 1.0) / 2.0
    return math.degrees(math.atan2(float(sin), float(cos)))


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> CameraPose:
    """Pose at ``eye`` looking at ``target`` (camera -z points at the target)."""
    eye = np.asarray(eye, dtype=np.float64)
    back = eye - np.asarray(target, dtype=np.float64)
    back /= np.linalg.norm(back)
    right = np.cross(np.asarray(up, dtype=np.float64), back)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(np.array([0.0, 1.0, 0.0]), back)
    right /= np.linalg.norm(right)
    cam_up = np.cross(back, right)
    c2w = np.eye(4)
    c2w[:3, 0], c2w[:3, 1], c2w[:3, 2], c2w[:3, 3] = right, cam_up, back, eye
    return CameraPose(c2w)


def spherical_pose(azimuth_deg: float, elevation_deg: float, radius: float) -> CameraPose:
    az, el = math.radians(azimuth_deg), math.radians(elevation_deg)
    eye = radius * np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)])
    return look_at(eye)

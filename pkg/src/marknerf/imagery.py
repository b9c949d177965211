"""Pixel containers and PNG I/O.

Images are ``float32`` numpy arrays of shape ``(H, W, 3)`` with values in
``[0, 1]``. Helpers here convert between that layout and the ``(N, 3, H, W)``
tensors the convolutional networks consume.
"""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
import torch
from PIL import Image as PILImage
from PIL import UnidentifiedImageError

from .errors import ImageDecodeError, ValidationError

Image = np.ndarray
PathLike = Union[str, Path]


def check_image(img: np.ndarray, name: str = "image") -> np.ndarray:
    """Validate the Image contract and return ``img`` unchanged."""
    if not isinstance(img, np.ndarray):
        raise ValidationError(f"{name}: expected numpy array, got {type(img).__name__}")
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValidationError(f"{name}: expected shape (H, W, 3), got {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ValidationError(f"{name}: empty image {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValidationError(f"{name}: contains non-finite values")
    if img.min() < 0.0 or img.max() > 1.0:
        raise ValidationError(f"{name}: values outside [0, 1]")
    return img


def check_pair(x: np.ndarray, y: np.ndarray) -> None:
    if tuple(x.shape) != tuple(y.shape):
        raise ValidationError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")


def clamp01(img: np.ndarray) -> np.ndarray:
    """Elementwise ``min(max(x, 0), 1)``; rejects non-finite input."""
    arr = np.asarray(img)
    if not np.all(np.isfinite(arr)):
        raise ValidationError("clamp01: non-finite input")
    return np.clip(arr, 0.0, 1.0).astype(np.float32, copy=False)


def load_image(path: PathLike, target_size: Optional[Tuple[int, int]] = None) -> np.ndarray:
    """Read an 8-bit RGB(A) file into an Image.

    Alpha is composited over white. ``target_size`` is ``(H, W)`` and uses
    bilinear resampling.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such image: {path}")
    try:
        with PILImage.open(path) as im:
            im.load()
            if im.mode in ("RGBA", "LA", "PA") or (im.mode == "P" and "transparency" in im.info):
                rgba = np.asarray(im.convert("RGBA"), dtype=np.float32) / 255.0
                rgb = rgba[..., :3] * rgba[..., 3:] + (1.0 - rgba[..., 3:])
            else:
                rgb = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except (UnidentifiedImageError, OSError) as exc:
        raise ImageDecodeError(f"cannot decode {path}: {exc}") from exc
    if target_size is not None:
        rgb = resize(rgb, target_size)
    return np.ascontiguousarray(np.clip(rgb, 0.0, 1.0), dtype=np.float32)


def resize(img: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    """Bilinear resize to ``(H, W)``."""
    h, w = size
    if (h, w) == img.shape[:2]:
        return img.astype(np.float32, copy=False)
    t = to_tensor(img)
    out = torch.nn.functional.interpolate(t, size=(h, w), mode="bilinear", align_corners=False, antialias=True)
    return from_tensor(out)


def save_image(img: np.ndarray, path: PathLike) -> None:
    """Write an Image as an 8-bit RGB PNG."""
    check_image(img)
    path = Path(path)
    if not path.parent.is_dir():
        raise FileNotFoundError(f"directory does not exist: {path.parent}")
    arr = np.round(img * 255.0).astype(np.uint8)
    PILImage.fromarray(arr, mode="RGB").save(path, format="PNG")


def to_tensor(img: np.ndarray, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """``(H, W, 3)`` array to a ``(1, 3, H, W)`` tensor."""
    return torch.from_numpy(np.ascontiguousarray(img)).to(dtype).permute(2, 0, 1).unsqueeze(0).contiguous()


def from_tensor(t: torch.Tensor) -> np.ndarray:
    """``(1, 3, H, W)`` or ``(3, H, W)`` tensor to an ``(H, W, 3)`` float32 array."""
    t = t.detach()
    if t.ndim == 4:
        if t.shape[0] != 1:
            raise ValidationError(f"expected a single image, got batch of {t.shape[0]}")
        t = t[0]
    return np.ascontiguousarray(t.permute(1, 2, 0).cpu().numpy().astype(np.float32))

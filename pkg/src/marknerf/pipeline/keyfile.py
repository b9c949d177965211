"""The secret-view key file: the ownership credential.

Format (INI text, UTF-8)::

    [key]
    version = 1

    [intrinsics]
    width = 64
    height = 64
    focal = 88.8888888888888857
    fingerprint = <sha256 of "width height focal">

    [extrinsic]          ; camera-to-world, row-major, 16 decimals
    row0 = r00 r01 r02 r03
    ...
    row3 = 0 0 0 1

    [render]             ; everything needed to reproduce the secret render
    t_near, t_far, n_coarse, n_fine, white_background, far_sentinel

    [hashes]             ; sha256 of the artifacts the key vouches for
    field, extractor, watermark

    [seal]               ; sha256 of every byte above this section
    digest = <hex>
"""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict

import numpy as np

from ..camera import CameraIntrinsics, CameraPose
from ..errors import TamperError, ValidationError
from ..nerf import SamplingConfig

KEY_VERSION = 1
_SEAL = "[seal]\n"


def _seal_digest(body: str) -> str:
    return hashlib.sha256(body.encode("utf-8")).hexdigest()


def _unseal(path: Path, text: str) -> str:
    """Return the key body after checking its seal; any edit raises :class:`TamperError`."""
    head, sep, tail = text.rpartition(_SEAL)
    if not sep:
        raise TamperError(f"{path}: key file is not sealed")
    if tail != f"digest = {_seal_digest(head)}\n":
        raise TamperError(f"{path}: key file seal mismatch")
    return head


@dataclass
class SecretKey:
    intrinsics: CameraIntrinsics
    pose: CameraPose
    sampling: SamplingConfig
    t_near: float = 2.0
    t_far: float = 6.0
    hashes: Dict[str, str] = field(default_factory=dict)

    def save(self, path) -> None:
        cp = configparser.ConfigParser()
        cp["key"] = {"version": str(KEY_VERSION)}
        cp["intrinsics"] = {
            "width": str(self.intrinsics.width),
            "height": str(self.intrinsics.height),
            "focal": f"{self.intrinsics.focal:.16f}",
            "fingerprint": self.intrinsics.fingerprint(),
        }
        cp["extrinsic"] = {f"row{i}": " ".join(f"{v:.16f}" for v in self.pose.c2w[i]) for i in range(4)}
        s = self.sampling
        cp["render"] = {
            "t_near": repr(self.t_near), "t_far": repr(self.t_far),
            "n_coarse": str(s.n_coarse), "n_fine": str(s.n_fine),
            "white_background": str(s.white_background).lower(), "far_sentinel": str(s.far_sentinel).lower(),
        }
        cp["hashes"] = dict(sorted(self.hashes.items()))
        buf = io.StringIO()
        cp.write(buf)
        body = buf.getvalue()
        Path(path).write_text(f"{body}{_SEAL}digest = {_seal_digest(body)}\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "SecretKey":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"missing key file: {path}")
        try:
            text = path.read_text(encoding="utf-8")
        except UnicodeDecodeError as exc:
            raise TamperError(f"{path}: key file is not valid UTF-8") from exc
        cp = configparser.ConfigParser()
        try:
            cp.read_string(_unseal(path, text))
            if cp.getint("key", "version") != KEY_VERSION:
                raise ValidationError(f"{path}: unsupported key version")
            intr = CameraIntrinsics(cp.getint("intrinsics", "width"), cp.getint("intrinsics", "height"),
                                    float(cp.get("intrinsics", "focal")))
            rows = [[float(v) for v in cp.get("extrinsic", f"row{i}").split()] for i in range(4)]
            r = cp["render"]
            sampling = SamplingConfig(n_coarse=int(r["n_coarse"]), n_fine=int(r["n_fine"]), perturb=False,
                                      white_background=r.getboolean("white_background"),
                                      far_sentinel=r.getboolean("far_sentinel"))
            key = cls(intr, CameraPose(np.array(rows)), sampling, float(r["t_near"]), float(r["t_far"]),
                      dict(cp["hashes"]) if cp.has_section("hashes") else {})
        except (configparser.Error, KeyError, ValueError) as exc:
            if isinstance(exc, ValidationError):
                raise
            raise ValidationError(f"{path}: malformed key file ({exc})") from exc
        if cp.get("intrinsics", "fingerprint") != intr.fingerprint():
            raise TamperError(f"{path}: intrinsics fingerprint mismatch")
        return key

    def check(self, name: str, digest: str) -> None:
        expected = self.hashes.get(name)
        if expected is None:
            raise TamperError(f"key file has no hash for {name}")
        if expected != digest:
            raise TamperError(f"{name} hash mismatch: key records {expected[:12]}..., artifact is {digest[:12]}...")

"""Declarative run configuration (INI with one section per stage).

Every section maps onto a dataclass below; unknown keys are rejected so a
typo cannot silently fall back to a default. ``dump_config`` writes the fully
resolved configuration next to the run outputs.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Tuple

from ..errors import ConfigurationError

TABLE2_ANGLES = (0.0, 1.0, 3.0, 7.0, 10.0, 15.0, 30.0, 60.0, 90.0, 180.0, 300.0, 340.0)


@dataclass
class RunSection:
    output_dir: str = "runs/default"
    seed: int = 0
    threads: int = 1


@dataclass
class SceneSection:
    root: str = ""
    split: str = "train"
    val_split: str = "val"
    downscale: int = 1
    t_near: float = 2.0
    t_far: float = 6.0
    val_frames: int = 2


@dataclass
class WatermarkSection:
    path: str = ""  # empty: procedural logo watermark
    seed: int = 0


@dataclass
class SecretSection:
    frame: int = 0  # training frame whose pose is the key
    matrix: str = ""  # optional explicit 16 row-major numbers; overrides frame


@dataclass
class EmbedSection:
    indices: str = "nearest"  # nearest | all | comma-separated frame indices
    noise_all: bool = False


@dataclass
class NoiseSection:
    kind: str = "none"
    gaussian_sigma: float = 0.1
    sp_amount: float = 0.02
    speckle_sigma: float = 0.1
    poisson_scale: float = 255.0
    seed: int = 0


@dataclass
class JointSection:
    steps: int = 5000
    lr: float = 1e-4
    batch_size: int = 4
    width: int = 32
    strength: float = 0.01  # max per-pixel embedding residual
    log_every: int = 100


@dataclass
class NerfSection:
    steps: int = 20000
    lr: float = 5e-4
    lr_final_ratio: float = 0.1
    batch_size: int = 1024
    depth: int = 8
    width: int = 256
    skip: int = 5
    color_width: int = 128
    density_bias: float = -0.1
    L_pos: int = 10
    L_dir: int = 4
    n_coarse: int = 64
    n_fine: int = 64
    white_background: bool = True
    precrop_steps: int = 500
    precrop_frac: float = 0.5
    log_every: int = 100
    val_every: int = 2000


@dataclass
class ExtractorSection:
    steps: int = 3000
    lr: float = 1e-4
    warm_start: bool = True
    neg_weight: float = 0.0
    neg_angles: Tuple[float, ...] = (30.0, 90.0, 180.0)
    log_every: int = 100


@dataclass
class LossSection:
    alpha: float = 0.3
    beta: float = 0.3
    gamma: float = 0.5
    mu: float = 0.5


@dataclass
class VerifySection:
    tau: float = 0.85


@dataclass
class SweepSection:
    angles: Tuple[float, ...] = TABLE2_ANGLES


@dataclass
class AttackSection:
    kinds: Tuple[str, ...] = ("gaussian", "salt_pepper", "speckle", "poisson")


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    scene: SceneSection = field(default_factory=SceneSection)
    watermark: WatermarkSection = field(default_factory=WatermarkSection)
    secret: SecretSection = field(default_factory=SecretSection)
    embed: EmbedSection = field(default_factory=EmbedSection)
    noise: NoiseSection = field(default_factory=NoiseSection)
    joint: JointSection = field(default_factory=JointSection)
    nerf: NerfSection = field(default_factory=NerfSection)
    extractor: ExtractorSection = field(default_factory=ExtractorSection)
    loss: LossSection = field(default_factory=LossSection)
    verify: VerifySection = field(default_factory=VerifySection)
    sweep: SweepSection = field(default_factory=SweepSection)
    attack: AttackSection = field(default_factory=AttackSection)

    @property
    def output_dir(self) -> Path:
        return Path(self.run.output_dir)

    def validate(self, require_paths: bool = True) -> "RunConfig":
        if not 0.0 < self.verify.tau < 1.0:
            raise ConfigurationError(f"verify.tau must lie in (0, 1), got {self.verify.tau}")
        if require_paths:
            if not self.scene.root:
                raise ConfigurationError("scene.root is required")
            if not Path(self.scene.root).is_dir():
                raise ConfigurationError(f"scene.root does not exist: {self.scene.root}")
            if self.watermark.path and not Path(self.watermark.path).is_file():
                raise ConfigurationError(f"watermark.path does not exist: {self.watermark.path}")
        return self


def _parse(value: str, typ, where: str):
    try:
        if typ is bool:
            low = value.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if typ is int:
            return int(value)
        if typ is float:
            return float(value)
        if typ is str:
            return value.strip()
        if typ == Tuple[float, ...]:
            return tuple(float(v) for v in value.replace(",", " ").split())
        if typ == Tuple[str, ...]:
            return tuple(v for v in value.replace(",", " ").split())
    except ValueError as exc:
        raise ConfigurationError(f"{where}: cannot parse {value!r}") from exc
    raise ConfigurationError(f"{where}: unsupported field type {typ}")


def _format(value) -> str:
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    return str(value)


def _field_types(section_cls):
    import typing

    hints = typing.get_type_hints(section_cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(section_cls)}


def apply_override(cfg: RunConfig, dotted: str, value: str) -> None:
    """Set ``section.key`` from its text form."""
    if "." not in dotted:
        raise ConfigurationError(f"override {dotted!r} must look like section.key")
    sec_name, key = dotted.split(".", 1)
    section = getattr(cfg, sec_name, None)
    if section is None or not dataclasses.is_dataclass(section):
        raise ConfigurationError(f"unknown config section {sec_name!r}")
    types = _field_types(type(section))
    if key not in types:
        raise ConfigurationError(f"unknown config key {dotted!r}")
    setattr(section, key, _parse(value, types[key], dotted))


def load_config(path=None, overrides: Sequence[str] = ()) -> RunConfig:
    """Read an INI run config (optional) and apply ``section.key=value`` overrides."""
    cfg = RunConfig()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigurationError(f"config file not found: {path}")
        cp = configparser.ConfigParser()
        cp.optionxform = str
        cp.read(path)
        for sec in cp.sections():
            for key, value in cp[sec].items():
                apply_override(cfg, f"{sec}.{key}", value)
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} must look like section.key=value")
        k, v = item.split("=", 1)
        apply_override(cfg, k.strip(), v)
    return cfg


def dump_config(cfg: RunConfig, path: Optional[Path] = None) -> str:
    cp = configparser.ConfigParser()
    cp.optionxform = str
    for f in dataclasses.fields(cfg):
        section = getattr(cfg, f.name)
        cp[f.name] = {k: _format(v) for k, v in dataclasses.asdict(section).items()}
    import io

    buf = io.StringIO()
    cp.write(buf)
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text

"""Pipeline stages: joint pre-training, NeRF fitting, secret-view fine-tuning, verification.

Each ``cmd_*`` function reads a :class:`RunConfig`, consumes the artifacts of
earlier stages from the run directory and writes its own. All randomness is
seeded from the config, so identical configs reproduce identical files.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .. import metrics
from ..camera import CameraPose, rotate_about_z
from ..dataset import Scene, build_training_set, load_scene, nearest_frame
from ..embedder import embed, train_joint
from ..errors import ConfigurationError, ValidationError
from ..extractor import Extractor, extract, finetune_extractor
from ..imagery import load_image, resize, save_image
from ..metrics import LossWeights
from ..nerf import EncodingConfig, FieldConfig, NerfTrainConfig, SamplingConfig, render_view, train_nerf
from ..noise import NoiseConfig
from ..synthetic import make_watermark
from ..training import TrainConfig, seed_everything
from .checkpoint import (image_digest, load_embedder, load_extractor, load_field, save_checkpoint,
                         sha256_file)
from .config import RunConfig
from .keyfile import SecretKey

log = logging.getLogger(__name__)

LpipsFn = Callable[[np.ndarray, np.ndarray], float]


# checkpoints that shaped the watermarked model without being needed to verify it
PROVENANCE = ("embedder", "extractor_joint")


class RunPaths:
    """File names inside a run directory."""

    def __init__(self, root):
        self.root = Path(root)

    def __getattr__(self, name):
        names = {
            "config": "config.ini",
            "watermark": "watermark.png",
            "embedder": "embedder.ckpt",
            "extractor_joint": "extractor_joint.ckpt",
            "joint_curve": "joint_curve.csv",
            "embedding": "embedding.csv",
            "embedded_frame": "embedded_frame.png",
            "field": "field.ckpt",
            "nerf_log": "nerf_log.csv",
            "extractor": "extractor.ckpt",
            "key": "secret.key",
            "finetune_log": "finetune_log.csv",
            "extraction": "extraction.csv",
            "secret_render": "secret_render.png",
            "extracted": "extracted.png",
            "verification": "verification.json",
            "angles": "angles.csv",
            "angles_plot": "angles.png",
            "attacks": "attacks.csv",
            "attacks_plot": "attacks_nc.png",
        }
        if name not in names:
            raise AttributeError(name)
        return self.root / names[name]

    def provenance(self) -> Dict[str, Path]:
        """Upstream checkpoints present in the run; the key vouches for these too."""
        return {name: getattr(self, name) for name in PROVENANCE if getattr(self, name).is_file()}


# --------------------------------------------------------------------------- config adapters


def loss_weights(cfg: RunConfig) -> LossWeights:
    return LossWeights(**asdict(cfg.loss))


def noise_config(cfg: RunConfig, kind: Optional[str] = None) -> NoiseConfig:
    n = asdict(cfg.noise)
    if kind is not None:
        n["kind"] = kind
    return NoiseConfig(**n)


def sampling_config(cfg: RunConfig) -> SamplingConfig:
    return SamplingConfig(n_coarse=cfg.nerf.n_coarse, n_fine=cfg.nerf.n_fine,
                          white_background=cfg.nerf.white_background)


def nerf_configs(cfg: RunConfig):
    n = cfg.nerf
    tcfg = NerfTrainConfig(steps=n.steps, lr=n.lr, batch_size=n.batch_size, seed=cfg.run.seed,
                           log_every=n.log_every, lr_final_ratio=n.lr_final_ratio,
                           precrop_steps=n.precrop_steps, precrop_frac=n.precrop_frac, val_every=n.val_every)
    enc = EncodingConfig(L_pos=n.L_pos, L_dir=n.L_dir)
    fcfg = FieldConfig(depth=n.depth, width=n.width, skip=n.skip, color_width=n.color_width,
                       density_bias=n.density_bias)
    return tcfg, enc, fcfg


def write_csv(path, rows: Sequence[dict], fieldnames: Optional[Sequence[str]] = None) -> None:
    rows = list(rows)
    if fieldnames is None:
        fieldnames = []
        for r in rows:
            fieldnames += [k for k in r if k not in fieldnames]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames, restval="", lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: _fmt(v) for k, v in r.items()})


def _fmt(v):
    if isinstance(v, float):
        return "inf" if math.isinf(v) else repr(v)
    return v


def read_csv(path) -> List[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# --------------------------------------------------------------------------- shared inputs


def load_train_scene(cfg: RunConfig) -> Scene:
    return load_scene(cfg.scene.root, cfg.scene.split, cfg.scene.downscale)


def load_val_frames(cfg: RunConfig):
    if cfg.scene.val_frames <= 0:
        return []
    try:
        val = load_scene(cfg.scene.root, cfg.scene.val_split, cfg.scene.downscale)
    except FileNotFoundError:
        log.warning("no %s split under %s; skipping validation", cfg.scene.val_split, cfg.scene.root)
        return []
    return val.frames[: cfg.scene.val_frames]


def load_watermark(cfg: RunConfig, height: int, width: int) -> np.ndarray:
    if cfg.watermark.path:
        return load_image(cfg.watermark.path, (height, width))
    w = make_watermark(max(height, width), cfg.watermark.seed)
    return resize(w, (height, width))


def secret_pose(cfg: RunConfig, scene: Scene) -> CameraPose:
    if cfg.secret.matrix.strip():
        values = [float(v) for v in cfg.secret.matrix.replace(",", " ").split()]
        if len(values) != 16:
            raise ConfigurationError(f"secret.matrix needs 16 numbers, got {len(values)}")
        return CameraPose(np.array(values).reshape(4, 4))
    if not 0 <= cfg.secret.frame < len(scene.frames):
        raise ConfigurationError(f"secret.frame {cfg.secret.frame} outside 0..{len(scene.frames) - 1}")
    return scene.frames[cfg.secret.frame].pose


def embed_indices(cfg: RunConfig, scene: Scene, pose: CameraPose) -> List[int]:
    spec = cfg.embed.indices.strip().lower()
    if spec == "nearest":
        return [nearest_frame(scene, pose)]
    if spec == "all":
        return list(range(len(scene.frames)))
    if spec in ("", "none"):
        return []
    return [int(v) for v in spec.replace(",", " ").split()]


# --------------------------------------------------------------------------- stages


def cmd_train_joint(cfg: RunConfig) -> Dict[str, Path]:
    """Pre-train embedder and extractor together on the scene's training frames."""
    paths = RunPaths(cfg.output_dir)
    paths.root.mkdir(parents=True, exist_ok=True)
    scene = load_train_scene(cfg)
    intr = scene.intrinsics
    w = load_watermark(cfg, intr.height, intr.width)
    save_image(w, paths.watermark)
    j = cfg.joint
    tcfg = TrainConfig(steps=j.steps, lr=j.lr, batch_size=j.batch_size, seed=cfg.run.seed, log_every=j.log_every)
    emb, ext, curve = train_joint([f.image for f in scene.frames], w, tcfg, loss_weights(cfg), j.width, j.strength)
    save_checkpoint(paths.embedder, "embedder", emb)
    save_checkpoint(paths.extractor_joint, "extractor", ext)
    write_csv(paths.joint_curve, curve, ["step", "le", "ld", "loss", "psnr"])
    rows = []
    for i in embed_indices(cfg, scene, secret_pose(cfg, scene)):
        k = scene.frames[i].image
        k_prime = embed(emb, k, w)
        rows.append({"frame": i, "psnr": metrics.psnr(k, k_prime), "ssim": metrics.ssim(k, k_prime),
                     "decoded_nc": metrics.nc_score(w, extract(ext, k_prime))})
    write_csv(paths.embedding, rows, ["frame", "psnr", "ssim", "decoded_nc"])
    return {"embedder": paths.embedder, "extractor_joint": paths.extractor_joint}


def fit_field(cfg: RunConfig, noise: NoiseConfig, field_path: Path, log_path: Path):
    """Build the watermarked, noised training set and fit a radiance field to it."""
    paths = RunPaths(cfg.output_dir)
    scene = load_train_scene(cfg)
    intr = scene.intrinsics
    w = load_image(paths.watermark) if paths.watermark.is_file() else load_watermark(cfg, intr.height, intr.width)
    emb = load_embedder(paths.embedder)
    pose = secret_pose(cfg, scene)
    train_set = build_training_set(scene, w, emb, noise, embed_indices(cfg, scene, pose), cfg.embed.noise_all)
    tcfg, enc, fcfg = nerf_configs(cfg)
    scfg = sampling_config(cfg)
    field_model, history = train_nerf(train_set, scfg, tcfg, enc, fcfg, load_val_frames(cfg),
                                      cfg.scene.t_near, cfg.scene.t_far)
    extra = {"sampling": asdict(scfg), "t_near": cfg.scene.t_near, "t_far": cfg.scene.t_far,
             "noise": asdict(noise)}
    digest = save_checkpoint(field_path, "field", field_model, extra)
    write_csv(log_path, history, ["step", "loss", "psnr", "val_psnr"])
    return field_model, train_set, digest


def cmd_train_nerf(cfg: RunConfig) -> Dict[str, Path]:
    paths = RunPaths(cfg.output_dir)
    if not paths.embedder.is_file():
        raise ConfigurationError(f"embedder checkpoint missing ({paths.embedder}); run train-joint first")
    _, train_set, _ = fit_field(cfg, noise_config(cfg), paths.field, paths.nerf_log)
    idx = embed_indices(cfg, train_set, secret_pose(cfg, train_set))
    if idx:
        save_image(train_set.frames[idx[0]].image, paths.embedded_frame)
    return {"field": paths.field}


def secret_render(cfg: RunConfig, field_model, pose: CameraPose, intr) -> np.ndarray:
    return render_view(field_model, intr, pose, sampling_config(cfg), cfg.scene.t_near, cfg.scene.t_far)


def cmd_finetune_extractor(cfg: RunConfig) -> Dict[str, Path]:
    """Render the secret view, overfit the extractor to it, and issue the key file."""
    paths = RunPaths(cfg.output_dir)
    if not paths.field.is_file():
        raise ConfigurationError(f"field checkpoint missing ({paths.field}); run train-nerf first")
    scene = load_train_scene(cfg)
    intr = scene.intrinsics
    pose = secret_pose(cfg, scene)
    w = load_image(paths.watermark)
    field_model, _ = load_field(paths.field)
    s = secret_render(cfg, field_model, pose, intr)
    x = cfg.extractor
    if x.warm_start:
        model = load_extractor(paths.extractor_joint)
    else:
        seed_everything(cfg.run.seed)
        model = Extractor(cfg.joint.width)
    negatives = [secret_render(cfg, field_model, rotate_about_z(pose, a), intr) for a in x.neg_angles] \
        if x.neg_weight > 0 else []
    tcfg = TrainConfig(steps=x.steps, lr=x.lr, seed=cfg.run.seed, log_every=x.log_every)
    curve = finetune_extractor(model, s, w, tcfg, negatives, x.neg_weight, loss_weights(cfg))
    write_csv(paths.finetune_log, curve, ["step", "loss", "ld", "nc"])
    ext_digest = save_checkpoint(paths.extractor, "extractor", model)
    w_prime = extract(model, s)
    save_image(s, paths.secret_render)
    save_image(w_prime, paths.extracted)
    write_csv(paths.extraction, [{"nc": metrics.nc_score(w, w_prime), "psnr": metrics.psnr(w, w_prime),
                                  "ssim": metrics.ssim(w, w_prime)}])
    key = SecretKey(intr, pose, SamplingConfig(**{**asdict(sampling_config(cfg)), "perturb": False}),
                    cfg.scene.t_near, cfg.scene.t_far,
                    {"field": sha256_file(paths.field), "extractor": ext_digest, "watermark": image_digest(w),
                     **{name: sha256_file(getattr(paths, name)) for name in PROVENANCE
                        if getattr(paths, name).is_file()}})
    key.save(paths.key)
    return {"extractor": paths.extractor, "key": paths.key}


# --------------------------------------------------------------------------- verification


@dataclass
class VerificationReport:
    nc: float
    psnr_db: float
    ssim: float
    tau: float
    decision: str
    pose: List[List[float]]
    rotation_deg: float = 0.0
    hashes: Dict[str, str] = field(default_factory=dict)

    @property
    def accepted(self) -> bool:
        return self.decision == "accept"

    def to_json(self) -> str:
        d = asdict(self)
        d["psnr_db"] = "inf" if math.isinf(self.psnr_db) else self.psnr_db
        return json.dumps(d, indent=2, sort_keys=True) + "\n"


def evaluate_view(field_model, model: Extractor, key: SecretKey, pose: CameraPose, w: np.ndarray,
                  lpips: Optional[LpipsFn] = None) -> dict:
    """Render ``pose`` with the key's camera, extract, and score against ``w``."""
    s = render_view(field_model, key.intrinsics, pose, key.sampling, key.t_near, key.t_far)
    w_prime = extract(model, s)
    row = {"nc": metrics.nc_score(w, w_prime), "psnr": metrics.psnr(w, w_prime), "ssim": metrics.ssim(w, w_prime)}
    if lpips is not None:
        row["lpips"] = float(lpips(w, w_prime))
    return row


def verify(field_path, extractor_path, key_path, watermark: np.ndarray, tau: float,
           rotate_deg: float = 0.0, provenance: Optional[Dict[str, Path]] = None) -> VerificationReport:
    """Check artifact hashes, render the key view, extract and decide ``nc >= tau``.

    ``provenance`` maps further artifact names (e.g. the embedder checkpoint)
    to files whose hashes the key also records.

    Raises :class:`TamperError` if any artifact differs from the key file's record.
    """
    if not 0.0 <= tau <= 1.0:
        raise ConfigurationError(f"tau must lie in [0, 1], got {tau}")
    key = SecretKey.load(key_path)
    hashes = {"field": sha256_file(field_path), "extractor": sha256_file(extractor_path),
              "watermark": image_digest(watermark)}
    for name, path in (provenance or {}).items():
        hashes[name] = sha256_file(path)
    for name, digest in hashes.items():
        key.check(name, digest)
    if watermark.shape != (key.intrinsics.height, key.intrinsics.width, 3):
        raise ValidationError(f"watermark {watermark.shape} does not match key resolution")
    field_model, _ = load_field(field_path)
    model = load_extractor(extractor_path)
    pose = rotate_about_z(key.pose, rotate_deg) if rotate_deg else key.pose
    row = evaluate_view(field_model, model, key, pose, watermark)
    hashes["key"] = sha256_file(key_path)
    return VerificationReport(nc=row["nc"], psnr_db=row["psnr"], ssim=row["ssim"], tau=tau,
                              decision="accept" if row["nc"] >= tau else "reject",
                              pose=pose.c2w.tolist(), rotation_deg=float(rotate_deg), hashes=hashes)


def cmd_verify(cfg: RunConfig, rotate_deg: float = 0.0, tau: Optional[float] = None,
               out: Optional[Path] = None) -> VerificationReport:
    paths = RunPaths(cfg.output_dir)
    report = verify(paths.field, paths.extractor, paths.key, load_image(paths.watermark),
                    cfg.verify.tau if tau is None else tau, rotate_deg, paths.provenance())
    Path(out or paths.verification).write_text(report.to_json())
    return report


# --------------------------------------------------------------------------- experiments


def cmd_sweep_angles(cfg: RunConfig, angles: Optional[Sequence[float]] = None,
                     lpips: Optional[LpipsFn] = None) -> List[dict]:
    """Extraction quality as the key pose orbits about the vertical axis."""
    from .report import plot_angles

    paths = RunPaths(cfg.output_dir)
    angles = tuple(cfg.sweep.angles if angles is None else angles)
    key = SecretKey.load(paths.key)
    field_model, _ = load_field(paths.field)
    model = load_extractor(paths.extractor)
    w = load_image(paths.watermark)
    rows = []
    for a in angles:
        pose = rotate_about_z(key.pose, a) if a else key.pose
        row = {"angle": float(a), **evaluate_view(field_model, model, key, pose, w, lpips)}
        row.setdefault("lpips", "")
        rows.append(row)
        log.info("angle %.1f: psnr %.2f ssim %.4f nc %.4f", a, row["psnr"], row["ssim"], row["nc"])
    write_csv(paths.angles, rows, ["angle", "psnr", "ssim", "nc", "lpips"])
    plot_angles(rows, paths.angles_plot)
    return rows


def cmd_attack_suite(cfg: RunConfig, kinds: Optional[Sequence[str]] = None) -> List[dict]:
    """Retrain the field on noise-attacked training sets and extract with the owner's extractor."""
    from .report import plot_attacks

    paths = RunPaths(cfg.output_dir)
    kinds = tuple(cfg.attack.kinds if kinds is None else kinds)
    key = SecretKey.load(paths.key)
    model = load_extractor(paths.extractor)
    w = load_image(paths.watermark)
    rows = []
    for kind in kinds:
        sub = paths.root / "attacks" / kind
        sub.mkdir(parents=True, exist_ok=True)
        field_model, _, digest = fit_field(cfg, noise_config(cfg, kind), sub / "field.ckpt", sub / "nerf_log.csv")
        row = evaluate_view(field_model, model, key, key.pose, w)
        row = {"kind": kind, "ber": 0.0 if math.isinf(row["psnr"]) else 1.0 / row["psnr"], **row,
               "field_sha256": digest}
        rows.append(row)
        log.info("attack %s: ber %.5f nc %.4f", kind, row["ber"], row["nc"])
    write_csv(paths.attacks, rows, ["kind", "ber", "nc", "psnr", "ssim", "field_sha256"])
    plot_attacks(rows, paths.attacks_plot)
    return rows

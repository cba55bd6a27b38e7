"""Two-stage training orchestration.

Stage 1 trains all three networks and the textures with per-hit
compositing; stage 2 freezes the opacity network, switches to the
aggregated-feature integrator and ramps the straight-through binarization
blend from 0 to 1. One epoch visits every training frame once in a
shuffled order; the scene BVH is rebuilt (per frame pose) at the start of
each epoch and stamped with the epoch index.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import cameras, renderer, tracer
from .lattice import PrismLattice
from .neural import AdamState, EncoderConfig, FieldConfig, FieldSet, adam_state_for, adam_step
from .renderer import RaySampleBatch, SceneGeometry, TextureSet, build_scene, make_ray_batch
from .rig import PoseParams, RigModel

log = logging.getLogger(__name__)


class TrainError(Exception):
    pass


@dataclass
class TrainConfig:
    rays_per_batch: int = 2**16
    batches_per_stage: int = 90_000
    lr_networks: float = 5e-5
    lr_textures: float = 5e-4
    lambda_start: float = 0.0
    lambda_end: float = 1.0
    alpha_loss_weight: float = 1.0
    seed: int = 0
    snapshot_every: int = 0  # 0 = only at stage end
    threads: int = 0  # 0 = leave torch defaults
    field_config: FieldConfig = field(default_factory=FieldConfig)

    def validate(self) -> None:
        if self.rays_per_batch <= 0 or self.batches_per_stage <= 0:
            raise TrainError("ray and batch counts must be positive")
        if not (0.0 <= self.lambda_start <= self.lambda_end <= 1.0):
            raise TrainError("lambda ramp bounds must satisfy 0 <= start <= end <= 1")


def profile_config(name: str, seed: int = 0) -> TrainConfig:
    """Desk-scale profiles; `paper` keeps the published constants."""
    if name == "paper":
        return TrainConfig(seed=seed)
    if name == "small":
        return TrainConfig(
            rays_per_batch=4096,
            batches_per_stage=5000,
            lr_networks=2e-3,
            lr_textures=5e-3,
            seed=seed,
            field_config=FieldConfig(
                encoder=EncoderConfig(
                    levels=10, base_resolution=16, finest_resolution=512, log2_table_size=15
                ),
                hidden_width=64,
                hidden_layers=3,
                seed=seed,
            ),
        )
    if name == "tiny":
        return TrainConfig(
            rays_per_batch=2048,
            batches_per_stage=500,
            lr_networks=5e-3,
            lr_textures=2e-2,
            seed=seed,
            field_config=FieldConfig(
                encoder=EncoderConfig(
                    levels=8, base_resolution=16, finest_resolution=256, log2_table_size=13
                ),
                hidden_width=64,
                hidden_layers=3,
                seed=seed,
            ),
        )
    raise TrainError(f"unknown profile {name!r} (expected tiny, small or paper)")


# ---------------------------------------------------------------------------
# dataset

@dataclass
class Frame:
    image_srgb: np.ndarray  # (H, W, 3) f4 in [0, 1], premultiplied over black
    bg_mask: np.ndarray  # (H, W) bool, True = background
    intrinsics: np.ndarray  # (3, 3)
    cam_to_world: np.ndarray  # (4, 4)
    pose: PoseParams
    split: str
    name: str


@dataclass
class Dataset:
    width: int
    height: int
    frames: list[Frame]
    rig_path: Path

    def train_frames(self) -> list[Frame]:
        return [f for f in self.frames if f.split == "train"]

    def val_frames(self) -> list[Frame]:
        return [f for f in self.frames if f.split == "val"]


def load_dataset(path: str | Path) -> Dataset:
    from PIL import Image

    path = Path(path)
    doc_path = path / "frames.json" if path.is_dir() else path
    if not doc_path.exists():
        raise FileNotFoundError(f"dataset manifest not found: {doc_path}")
    with open(doc_path) as f:
        doc = json.load(f)
    root = doc_path.parent
    frames = []
    for entry in doc["frames"]:
        img = np.asarray(Image.open(root / entry["image"]), dtype=np.float32) / 255.0
        mask = np.asarray(Image.open(root / entry["mask"])) > 127
        k = np.asarray(entry["intrinsics"], dtype=np.float64)
        c2w = np.asarray(entry["extrinsics"], dtype=np.float64)
        cameras.validate_camera(k, c2w)
        if img.shape[:2] != (doc["height"], doc["width"]):
            raise TrainError(f"{entry['image']}: resolution differs from dataset header")
        pose = PoseParams(
            shape_coeffs=np.asarray(entry["shape_coeffs"], dtype=np.float64),
            expr_coeffs=np.asarray(entry["expr_coeffs"], dtype=np.float64),
            joint_rotations=np.asarray(entry["joint_rotations"], dtype=np.float64),
            global_transform=np.asarray(entry["global_transform"], dtype=np.float64),
        )
        frames.append(
            Frame(
                image_srgb=img[:, :, :3],
                bg_mask=mask,
                intrinsics=k,
                cam_to_world=c2w,
                pose=pose,
                split=entry.get("split", "train"),
                name=entry["image"],
            )
        )
    return Dataset(
        width=doc["width"], height=doc["height"], frames=frames,
        rig_path=root / doc.get("rig", "rig/rig.json"),
    )


@dataclass
class PixelBatch:
    frame: Frame
    rows: np.ndarray
    cols: np.ndarray
    origins: np.ndarray
    dirs: np.ndarray
    gt_srgb: np.ndarray
    bg: np.ndarray


def sample_batch(
    dataset: Dataset,
    rng: np.random.Generator,
    n_rays: int,
    frame_index: int | None = None,
) -> PixelBatch:
    """Uniform pixel sample (without replacement) from one frame.

    The frame is chosen uniformly among training frames unless given. When
    more rays than pixels are requested, sampling falls back to replacement
    with a warning.
    """
    frames = dataset.train_frames()
    if not frames:
        raise TrainError("dataset has no training frames")
    if frame_index is None:
        frame = frames[int(rng.integers(len(frames)))]
    else:
        frame = frames[frame_index]
    n_pixels = dataset.width * dataset.height
    if n_rays > n_pixels:
        log.warning("requested %d rays from a %d-pixel frame; sampling with replacement",
                    n_rays, n_pixels)
        flat = rng.integers(0, n_pixels, size=n_rays)
    else:
        flat = rng.choice(n_pixels, size=n_rays, replace=False)
    rows, cols = np.divmod(flat, dataset.width)
    origins, dirs = cameras.rays_for_pixels(frame.intrinsics, frame.cam_to_world, cols, rows)
    return PixelBatch(
        frame=frame,
        rows=rows,
        cols=cols,
        origins=origins,
        dirs=dirs,
        gt_srgb=frame.image_srgb[rows, cols],
        bg=frame.bg_mask[rows, cols],
    )


# ---------------------------------------------------------------------------
# training loop

@dataclass
class TrainState:
    fields: FieldSet
    textures: TextureSet
    net_adam: AdamState
    tex_adam: AdamState


def _scene_cache(rig: RigModel, lat: PrismLattice, frames: list[Frame]) -> list[SceneGeometry]:
    # poses are fixed per frame, so posed geometry is computed once;
    # the BVH over it is still rebuilt every epoch
    return [build_scene(rig, lat, f.pose) for f in frames]


def lambda_schedule(batch_idx: int, total: int, lo: float, hi: float) -> float:
    if total <= 1:
        return hi
    return lo + (hi - lo) * (batch_idx / (total - 1))


def run_stage(
    stage: int,
    cfg: TrainConfig,
    rig: RigModel,
    lat: PrismLattice,
    fields: FieldSet,
    textures: TextureSet,
    dataset: Dataset,
    out_dir: str | Path,
    loss_writer=None,
) -> Path:
    """Run one training stage; returns the final checkpoint path."""
    cfg.validate()
    if cfg.threads:
        torch.set_num_threads(cfg.threads)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed + stage)

    if stage == 2:
        fields.freeze("opacity")
    net_adam = adam_state_for(fields.trainable_parameters(), cfg.lr_networks)
    tex_adam = adam_state_for(textures.parameters_list(), cfg.lr_textures)

    frames = dataset.train_frames()
    scenes = _scene_cache(rig, lat, frames)
    bvhs: dict[int, tracer.Bvh] = {}
    epoch = -1
    order: list[int] = []

    last_good = None
    t_start = time.time()
    for b in range(cfg.batches_per_stage):
        if not order:
            epoch += 1
            order = list(rng.permutation(len(frames)))
            bvhs = {
                fi: tracer.build_bvh(scenes[fi].tri_verts, epoch_stamp=epoch)
                for fi in range(len(frames))
            }
        fi = order.pop()
        batch = _trace_batch(dataset, rng, cfg.rays_per_batch, fi, scenes[fi], bvhs[fi])

        if stage == 1:
            loss, parts = renderer.stage_loss(
                batch, fields, textures, stage=1, binarize=False,
                alpha_weight=cfg.alpha_loss_weight,
            )
        else:
            lam = lambda_schedule(b, cfg.batches_per_stage, cfg.lambda_start, cfg.lambda_end)
            loss, parts = renderer.blended_loss(
                batch, fields, textures, lam, stage=2, alpha_weight=cfg.alpha_loss_weight,
            )
        if not torch.isfinite(loss):
            raise TrainError(
                f"stage {stage} batch {b}: loss is not finite; last good checkpoint: {last_good}"
            )

        for group in (fields.trainable_parameters(), textures.parameters_list()):
            for p in group:
                if p.grad is not None:
                    p.grad = None
        loss.backward()
        params = fields.trainable_parameters()
        adam_step(params, [p.grad for p in params], net_adam)
        tex_params = textures.parameters_list()
        adam_step(tex_params, [p.grad for p in tex_params], tex_adam)

        if loss_writer is not None:
            loss_writer.writerow(
                [stage, b, epoch, f"{float(loss):.6f}",
                 f"{parts['photo']:.6f}", f"{parts['alpha']:.6f}",
                 f"{parts.get('lambda', 0.0):.4f}"]
            )
        if b % 50 == 0 or b == cfg.batches_per_stage - 1:
            log.info("stage %d batch %d/%d loss %.5f (photo %.5f alpha %.5f) %.1fs",
                     stage, b, cfg.batches_per_stage, float(loss),
                     parts["photo"], parts["alpha"], time.time() - t_start)
        if cfg.snapshot_every and (b + 1) % cfg.snapshot_every == 0:
            last_good = _save_checkpoint(out_dir / f"stage{stage}_b{b + 1:06d}.json",
                                         fields, textures, cfg, stage)
    final = _save_checkpoint(out_dir / f"stage{stage}_final.json", fields, textures, cfg, stage)
    return final


def _trace_batch(
    dataset: Dataset,
    rng: np.random.Generator,
    n_rays: int,
    frame_index: int,
    scene: SceneGeometry,
    bvh: tracer.Bvh,
) -> RaySampleBatch:
    px = sample_batch(dataset, rng, n_rays, frame_index=frame_index)
    res = tracer.trace_rays(bvh, scene.tri_verts, scene.tri_kinds, px.origins, px.dirs)
    return make_ray_batch(scene, res, px.origins, px.dirs, px.gt_srgb, px.bg)


def _save_checkpoint(path: Path, fields: FieldSet, textures: TextureSet,
                     cfg: TrainConfig, stage: int) -> Path:
    fields.save(
        path,
        extra_meta={"stage": stage, "seed": cfg.seed},
        extra_buffers={
            "texture/face": textures.face.detach().numpy().astype("<f4"),
            "texture/face_alpha": textures.face_alpha.detach().numpy().astype("<f4"),
            "texture/cavity": textures.cavity.detach().numpy().astype("<f4"),
        },
    )
    return path


def load_checkpoint(path: str | Path) -> tuple[FieldSet, TextureSet, dict]:
    fields, meta, extra = FieldSet.load(path)
    textures = TextureSet(
        face=extra["texture/face"],
        face_alpha=extra["texture/face_alpha"],
        cavity=extra["texture/cavity"],
    )
    return fields, textures, meta


def run_training(
    cfg: TrainConfig,
    rig: RigModel,
    lat: PrismLattice,
    dataset: Dataset,
    out_dir: str | Path,
    stages: tuple[int, ...] = (1, 2),
    resume_from: str | Path | None = None,
) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(cfg.seed)
    if resume_from is not None:
        fields, textures, _ = load_checkpoint(resume_from)
    else:
        fields = FieldSet(cfg.field_config)
        textures = TextureSet.from_rig(rig)
    if 2 in stages and 1 not in stages and resume_from is None:
        raise TrainError("stage 2 requires a stage-1 checkpoint (use resume_from)")

    with open(out_dir / "loss.csv", "a", newline="") as f:
        writer = csv.writer(f)
        if f.tell() == 0:
            writer.writerow(["stage", "batch", "epoch", "loss", "photo", "alpha", "lambda"])
        final = Path(resume_from) if resume_from else None
        for stage in stages:
            final = run_stage(stage, cfg, rig, lat, fields, textures, dataset, out_dir,
                              loss_writer=writer)
    with open(out_dir / "train_config.json", "w") as f:
        json.dump(_config_to_dict(cfg), f, indent=1)
        f.write("\n")
    return final


def _config_to_dict(cfg: TrainConfig) -> dict:
    d = {k: v for k, v in cfg.__dict__.items() if k != "field_config"}
    fc = cfg.field_config
    d["field_config"] = {**fc.encoder.__dict__, "hidden_width": fc.hidden_width,
                         "hidden_layers": fc.hidden_layers,
                         "color_hidden_width": fc.color_hidden_width,
                         "color_hidden_layers": fc.color_hidden_layers,
                         "seed": fc.seed}
    return d


def config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    fc = d.pop("field_config", None)
    cfg = TrainConfig(**d)
    if fc:
        fc = dict(fc)
        enc = EncoderConfig(
            levels=fc.pop("levels"),
            features_per_entry=fc.pop("features_per_entry"),
            base_resolution=fc.pop("base_resolution"),
            finest_resolution=fc.pop("finest_resolution"),
            log2_table_size=fc.pop("log2_table_size"),
        )
        cfg = replace(cfg, field_config=FieldConfig(encoder=enc, **fc))
    return cfg


# ---------------------------------------------------------------------------
# full-frame evaluation with the ray renderer

def render_frame_rays(
    rig: RigModel,
    lat: PrismLattice,
    fields: FieldSet,
    textures: TextureSet,
    frame: Frame,
    width: int,
    height: int,
    stage: int = 2,
    binarize: bool = True,
    chunk: int = 8192,
) -> np.ndarray:
    """Render a full frame with the hybrid ray integrator; returns sRGB f4."""
    scene = build_scene(rig, lat, frame.pose)
    bvh = tracer.build_bvh(scene.tri_verts)
    origins, dirs = cameras.rays_for_image(frame.intrinsics, frame.cam_to_world, width, height)
    out = np.zeros((height * width, 3), dtype=np.float32)
    integrate = renderer.integrate_stage1 if stage == 1 else renderer.integrate_stage2
    with torch.no_grad():
        for s in range(0, origins.shape[0], chunk):
            o, d = origins[s : s + chunk], dirs[s : s + chunk]
            res = tracer.trace_rays(bvh, scene.tri_verts, scene.tri_kinds, o, d)
            batch = make_ray_batch(
                scene, res, o, d,
                np.zeros((o.shape[0], 3), dtype=np.float32),
                np.zeros(o.shape[0], dtype=bool),
            )
            comp = integrate(batch, fields, textures, binarize=binarize)
            out[s : s + chunk] = renderer.srgb_encode(comp.rgb).numpy()
    return np.clip(out.reshape(height, width, 3), 0.0, 1.0)

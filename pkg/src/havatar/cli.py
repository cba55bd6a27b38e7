"""Command-line entry point.

Subcommands: synth (synthetic dataset), lattice (build + cache), train
(stage 1|2|both), export (distill to a triangle asset), render (headless
frames), eval (PSNR/SSIM against ground truth), inspect (file summaries).
Logs go to stderr; data only to files.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("havatar")


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except FileNotFoundError as e:
        log.error("%s", e)
        return 1
    except Exception as e:  # noqa: BLE001 - single CLI error boundary
        if args.verbose:
            raise
        log.error("%s: %s", type(e).__name__, e)
        return 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="havatar", description=__doc__)
    p.add_argument("--verbose", action="store_true", help="debug logging and tracebacks")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate the synthetic rig + dataset")
    _common(sp)
    sp.add_argument("--views", type=int, default=None, help="override training view count")
    sp.add_argument("--image-size", type=int, default=None)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("lattice", help="build and cache the prism lattice")
    _common(sp)
    sp.add_argument("--rig", required=True, help="rig.json or its directory")
    sp.add_argument("--mask", default="scalp")
    sp.add_argument("--factor", type=int, default=4, choices=(4, 16))
    sp.add_argument("--layers", type=int, default=6)
    sp.add_argument("--height", type=float, default=None,
                    help="meters per layer (default: patch diagonal / 64)")
    sp.set_defaults(func=cmd_lattice)

    sp = sub.add_parser("train", help="run training stages")
    _common(sp)
    sp.add_argument("--data", required=True, help="dataset directory")
    sp.add_argument("--lattice", required=True, help="lattice cache json")
    sp.add_argument("--stage", default="both", choices=("1", "2", "both"))
    sp.add_argument("--config", default=None, help="JSON file overriding config keys")
    sp.add_argument("--resume", default=None, help="checkpoint to continue from")
    sp.add_argument("--threads", type=int, default=0)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("export", help="distill a checkpoint into a triangle asset")
    _common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--lattice", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--max-grid", type=int, default=256)
    sp.set_defaults(func=cmd_export)

    sp = sub.add_parser("render", help="rasterize an asset for dataset cameras")
    _common(sp)
    sp.add_argument("--asset", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", default="val", choices=("train", "val", "all"))
    sp.set_defaults(func=cmd_render)

    sp = sub.add_parser("eval", help="PSNR/SSIM of rendered frames vs ground truth")
    _common(sp)
    sp.add_argument("--renders", required=True, help="directory of rendered PNGs")
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", default="val", choices=("train", "val", "all"))
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("inspect", help="summarize a rig/lattice/asset/dataset file")
    sp.add_argument("path")
    sp.set_defaults(func=cmd_inspect)
    return p


def _common(sp: argparse.ArgumentParser) -> None:
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--profile", default="tiny", choices=("tiny", "small", "paper"))
    sp.add_argument("--out", required=True, help="output directory")


def _scene_spec(args):
    from .datagen import SceneSpec

    spec = SceneSpec(seed=args.seed)
    if args.profile == "small":
        spec.image_size = 128
        spec.orbit.n_train = 24
        spec.face_texture_size = 256
    elif args.profile == "paper":
        spec.image_size = 512
        spec.orbit.n_train = 64
        spec.face_texture_size = 1024
        spec.cavity_texture_size = 256
    if getattr(args, "views", None):
        spec.orbit.n_train = args.views
    if getattr(args, "image_size", None):
        spec.image_size = args.image_size
    return spec


def cmd_synth(args) -> int:
    from .datagen import SyntheticScene, emit_dataset

    spec = _scene_spec(args)
    scene = SyntheticScene(spec)
    out = emit_dataset(scene, args.out)
    log.info("dataset written to %s (%d frames)", out, spec.orbit.n_train + spec.orbit.n_val)
    return 0


def _default_layer_height(args, profile: str) -> tuple[int, float | None]:
    # keep the lattice a touch taller than the synthetic fuzz shell
    from .datagen import SceneSpec

    if args.height is not None or args.layers != 6:
        return args.layers, args.height
    fuzz = SceneSpec().fuzz_height
    layers = 6
    return layers, 1.05 * fuzz / layers


def cmd_lattice(args) -> int:
    from .lattice import build_lattice, save_lattice
    from .rig import load_rig

    rig = load_rig(args.rig)
    layers, height = _default_layer_height(args, args.profile)
    lat = build_lattice(rig, args.mask, args.factor, layers, height)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_lattice(lat, out / "lattice.json")
    log.info(
        "lattice: %d base tris, %d layers, %d triangles, %d shell verts",
        lat.base_triangles.shape[0], lat.num_layers, lat.n_triangles, lat.shell_vertex_count,
    )
    return 0


def _load_train_inputs(args):
    from .lattice import load_lattice
    from .rig import load_rig
    from .trainer import load_dataset

    dataset = load_dataset(args.data)
    rig = load_rig(dataset.rig_path)
    lat_path = Path(args.lattice)
    if lat_path.is_dir():
        lat_path = lat_path / "lattice.json"
    lat = load_lattice(lat_path)
    return dataset, rig, lat


def cmd_train(args) -> int:
    from .trainer import config_from_dict, profile_config, run_training

    cfg = profile_config(args.profile, seed=args.seed)
    if args.config:
        with open(args.config) as f:
            overrides = json.load(f)
        base = json.loads(json.dumps(_cfg_dict(cfg)))
        base.update(overrides)
        cfg = config_from_dict(base)
    if args.threads:
        cfg.threads = args.threads
    dataset, rig, lat = _load_train_inputs(args)
    stages = (1, 2) if args.stage == "both" else (int(args.stage),)
    final = run_training(cfg, rig, lat, dataset, args.out, stages=stages,
                         resume_from=args.resume)
    log.info("final checkpoint: %s", final)
    print(final)
    return 0


def _cfg_dict(cfg) -> dict:
    from .trainer import _config_to_dict

    return _config_to_dict(cfg)


def cmd_export(args) -> int:
    from .export import export_avatar
    from .trainer import load_checkpoint

    dataset, rig, lat = _load_train_inputs(args)
    fields, textures, _ = load_checkpoint(args.checkpoint)
    path, report = export_avatar(
        rig, lat, fields, textures, dataset.train_frames(),
        dataset.width, dataset.height, args.out, max_grid=args.max_grid,
    )
    log.info("asset written to %s (kept %d lattice tris, pruned %d)",
             path, report.kept_count, report.pruned_count)
    return 0


def _frames_for_split(dataset, split: str):
    if split == "all":
        return list(enumerate(dataset.frames))
    return [(i, f) for i, f in enumerate(dataset.frames) if f.split == split]


def cmd_render(args) -> int:
    from PIL import Image

    from .export import read_asset
    from .rasterizer import FrameRequest, rasterize
    from .trainer import load_dataset

    dataset = load_dataset(args.data)
    asset = read_asset(args.asset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, frame in _frames_for_split(dataset, args.split):
        req = FrameRequest(
            intrinsics=frame.intrinsics,
            cam_to_world=frame.cam_to_world,
            pose=frame.pose,
            width=dataset.width,
            height=dataset.height,
        )
        img = rasterize(asset, req)
        Image.fromarray(img).save(out / f"render_{i:04d}.png")
    log.info("rendered %d frames to %s", len(_frames_for_split(dataset, args.split)), out)
    return 0


def cmd_eval(args) -> int:
    from PIL import Image

    from .metrics import psnr, ssim
    from .trainer import load_dataset

    dataset = load_dataset(args.data)
    renders = Path(args.renders)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, frame in _frames_for_split(dataset, args.split):
        rp = renders / f"render_{i:04d}.png"
        if not rp.exists():
            raise FileNotFoundError(f"missing render {rp}")
        pred = np.asarray(Image.open(rp), dtype=np.float64)[:, :, :3] / 255.0
        gt = frame.image_srgb.astype(np.float64)
        rows.append((frame.name, psnr(pred, gt), ssim(pred, gt)))
    csv_path = out / "metrics.csv"
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["frame", "psnr_db", "ssim"])
        for name, p_val, s_val in rows:
            w.writerow([name, f"{p_val:.4f}", f"{s_val:.6f}"])
        mean_p = float(np.mean([r[1] for r in rows]))
        mean_s = float(np.mean([r[2] for r in rows]))
        w.writerow(["mean", f"{mean_p:.4f}", f"{mean_s:.6f}"])
    log.info("metrics: mean PSNR %.2f dB, mean SSIM %.4f -> %s", mean_p, mean_s, csv_path)
    print(f"{mean_p:.4f}")
    return 0


def cmd_inspect(args) -> int:
    path = Path(args.path)
    if path.is_dir():
        for candidate in ("rig.json", "avatar.json", "lattice.json", "frames.json"):
            if (path / candidate).exists():
                path = path / candidate
                break
    if not path.exists():
        raise FileNotFoundError(f"nothing to inspect at {args.path}")
    if path.name == "frames.json":
        with open(path) as f:
            doc = json.load(f)
        print(f"dataset: {doc['width']}x{doc['height']}, {len(doc['frames'])} frames")
        for fr in doc["frames"]:
            print(f"  {fr['image']} split={fr.get('split', 'train')}")
        return 0
    with open(path) as f:
        manifest = json.load(f)
    print(f"{manifest.get('format')} v{manifest.get('version')}")
    for key in ("counts", "atlas_grid", "region_masks", "num_layers", "stage"):
        if key in manifest:
            print(f"  {key}: {manifest[key]}")
    total = sum(e["nbytes"] for e in manifest.get("buffers", {}).values())
    print(f"  buffers: {len(manifest.get('buffers', {}))} ({total} bytes)")
    for name, entry in manifest.get("buffers", {}).items():
        print(f"    {name}: {entry['dtype']} {entry['shape']}")
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Procedural synthetic head scene and ground-truth dataset generator.

The scene is a UV-sphere "head" with a mouth hole, region masks, two bump
blendshapes, a two-joint skeleton, and an analytic fuzz shell (smooth
density + color fields over the scalp cap) standing in for hair. Ground
truth images come from dense ray marching of the analytic fields composited
over the analytically textured mesh, so the trained model can be verified
against images the pipeline never produced itself. All geometry and fields
are deterministic functions of the scene spec.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import cameras
from .rig import (
    KIND_BASE,
    PoseParams,
    RigModel,
    fill_mouth_cavity,
    save_rig,
)

TAU = 2.0 * np.pi


@dataclass
class OrbitSpec:
    n_train: int = 8
    n_val: int = 2
    radius: float = 0.42
    fov_x_deg: float = 40.0
    azimuth_span_deg: float = 80.0  # symmetric around the front
    elevations_deg: tuple[float, float] = (16.0, 30.0)


@dataclass
class SceneSpec:
    seed: int = 0
    sphere_radius: float = 0.1
    n_azimuth: int = 24
    n_polar: int = 16
    mouth_center_polar_deg: float = 115.0
    mouth_radius_deg: float = 17.0
    scalp_polar_deg: float = 48.0
    n_blendshapes: int = 2
    fuzz_height: float = 0.03
    fuzz_extinction: float = 260.0
    face_texture_size: int = 128
    cavity_texture_size: int = 64
    image_size: int = 64
    orbit: OrbitSpec = field(default_factory=OrbitSpec)


# ---------------------------------------------------------------------------
# analytic appearance fields

def _sphere_dir(polar: np.ndarray, azim: np.ndarray) -> np.ndarray:
    """Unit direction; polar measured from +y (up), azimuth around y from +z."""
    s = np.sin(polar)
    return np.stack([s * np.sin(azim), np.cos(polar), s * np.cos(azim)], axis=-1)


def face_albedo(uv: np.ndarray) -> np.ndarray:
    """Smooth skin-like pattern; u-dependence fades toward the poles."""
    u, v = uv[..., 0], uv[..., 1]
    ring = np.sin(np.pi * v)
    r = 0.72 + 0.16 * np.sin(TAU * 2.0 * u) * ring + 0.06 * np.cos(np.pi * 3.0 * v)
    g = 0.52 + 0.12 * np.cos(TAU * 2.0 * u + 1.0) * ring + 0.08 * np.sin(np.pi * 2.0 * v)
    b = 0.42 + 0.10 * np.sin(TAU * u + 2.0) * ring * np.cos(np.pi * v)
    return np.clip(np.stack([r, g, b], axis=-1), 0.0, 1.0)


def cavity_albedo(uv: np.ndarray) -> np.ndarray:
    u, v = uv[..., 0], uv[..., 1]
    r = 0.42 + 0.10 * np.sin(TAU * u) * np.sin(np.pi * v)
    g = 0.12 + 0.05 * np.sin(np.pi * v)
    b = 0.11 + 0.04 * np.cos(TAU * u)
    return np.clip(np.stack([r, g, b], axis=-1), 0.0, 1.0)


def _smoothstep(e0: float, e1: float, x: np.ndarray) -> np.ndarray:
    t = np.clip((x - e0) / (e1 - e0), 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


class SyntheticScene:
    """Analytic fields plus the generated rig (base mesh with cavity filled)."""

    def __init__(self, spec: SceneSpec):
        self.spec = spec
        self.rig = generate_rig(spec)

    # density/color are functions of canonical position (meters)
    def fuzz_density(self, p: np.ndarray) -> np.ndarray:
        sp = self.spec
        rho = np.linalg.norm(p, axis=-1)
        h = (rho - sp.sphere_radius) / sp.fuzz_height
        with np.errstate(invalid="ignore", divide="ignore"):
            cos_pol = np.clip(p[..., 1] / np.maximum(rho, 1e-12), -1.0, 1.0)
        polar = np.arccos(cos_pol)
        azim = np.arctan2(p[..., 0], p[..., 2])
        radial = _smoothstep(0.08, 0.22, h) * (1.0 - _smoothstep(0.68, 0.95, h))
        cap = 1.0 - _smoothstep(
            np.deg2rad(sp.scalp_polar_deg) - np.deg2rad(9.0),
            np.deg2rad(sp.scalp_polar_deg),
            polar,
        )
        wob = 0.82 + 0.18 * np.sin(5.0 * azim) * np.sin(7.0 * polar + 1.0)
        return np.clip(radial * cap * wob, 0.0, 1.0)

    def fuzz_color(self, p: np.ndarray) -> np.ndarray:
        rho = np.maximum(np.linalg.norm(p, axis=-1), 1e-12)
        cos_pol = np.clip(p[..., 1] / rho, -1.0, 1.0)
        polar = np.arccos(cos_pol)
        azim = np.arctan2(p[..., 0], p[..., 2])
        mod = 0.8 + 0.2 * np.sin(3.0 * azim + 1.0) * np.cos(4.0 * polar)
        base = np.array([0.32, 0.22, 0.12])
        return np.clip(base * mod[..., None], 0.0, 1.0)


# ---------------------------------------------------------------------------
# procedural rig

def generate_rig(spec: SceneSpec) -> RigModel:
    """UV sphere head with a mouth hole, cavity fill, masks and blendshapes."""
    sp = spec
    na, npo = sp.n_azimuth, sp.n_polar
    # grid rows 0..npo (poles included), seam column duplicated for UVs
    rows = []
    uvs = []
    for i in range(npo + 1):
        v = i / npo
        polar = np.pi * v
        for j in range(na + 1):
            u = j / na
            azim = TAU * u + np.pi  # seam at the back (azim = pi)
            rows.append(_sphere_dir(np.array(polar), np.array(azim)))
            uvs.append((u, v))
    dirs = np.asarray(rows)
    verts = sp.sphere_radius * dirs
    uvs = np.asarray(uvs)

    def vid(i, j):
        return i * (na + 1) + j

    tris = []
    for i in range(npo):
        for j in range(na):
            a, b = vid(i, j), vid(i, j + 1)
            c, d = vid(i + 1, j), vid(i + 1, j + 1)
            if i > 0:  # skip degenerate fan at the top pole row
                tris.append([a, c, b])
            if i < npo - 1:
                tris.append([b, c, d])
    tris = np.asarray(tris, dtype=np.int32)

    # carve the mouth hole
    mouth_dir = _sphere_dir(
        np.deg2rad(np.array(sp.mouth_center_polar_deg)), np.array(0.0)
    )
    centroid_dirs = dirs[tris].mean(axis=1)
    centroid_dirs /= np.linalg.norm(centroid_dirs, axis=1, keepdims=True)
    ang_to_mouth = np.arccos(np.clip(centroid_dirs @ mouth_dir, -1.0, 1.0))
    hole = ang_to_mouth < np.deg2rad(sp.mouth_radius_deg)
    kept = tris[~hole]
    ang_kept = ang_to_mouth[~hole]

    # masks on the kept triangulation
    centroid_dirs = centroid_dirs[~hole]
    polar_kept = np.arccos(np.clip(centroid_dirs[:, 1], -1.0, 1.0))
    scalp = np.nonzero(polar_kept < np.deg2rad(sp.scalp_polar_deg))[0]

    # rim = kept triangles sharing an edge with the removed region
    rim = []
    removed_edges = set()
    for tri in tris[hole]:
        for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
            removed_edges.add((min(a, b), max(a, b)))
    for ti, tri in enumerate(kept):
        for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
            if (min(a, b), max(a, b)) in removed_edges:
                rim.append(ti)
                break
    rim = np.asarray(sorted(set(rim)), dtype=np.int64)

    near_mouth = (ang_kept > np.deg2rad(sp.mouth_radius_deg + 4.0)) & (
        ang_kept < np.deg2rad(sp.mouth_radius_deg + 16.0)
    )
    face_hair = np.nonzero(near_mouth)[0]
    face_hair = np.setdiff1d(face_hair, rim)
    face_hair = np.setdiff1d(face_hair, scalp)

    # two bump blendshapes along the surface normal
    brow_dir = _sphere_dir(np.deg2rad(np.array(78.0)), np.array(0.35))
    cheek_dir = _sphere_dir(np.deg2rad(np.array(102.0)), np.array(0.7))
    vdirs = dirs

    def bump(center, sigma_deg, amp):
        ang = np.arccos(np.clip(vdirs @ center, -1.0, 1.0))
        w = np.exp(-0.5 * (ang / np.deg2rad(sigma_deg)) ** 2)
        w = np.where(ang < np.deg2rad(3.0 * sigma_deg), w, 0.0)
        return amp * w[:, None] * vdirs

    bank = [bump(brow_dir, 11.0, 0.012), bump(cheek_dir, 13.0, 0.010)]
    if sp.n_blendshapes:
        blendshapes = np.stack(bank[: sp.n_blendshapes])
    else:
        blendshapes = np.zeros((0, verts.shape[0], 3))

    # two joints: root and a lower "neck"; weights blend with height
    joint_parents = np.array([-1, 0], dtype=np.int32)
    joint_rest = np.stack([np.eye(4), np.eye(4)]).astype(np.float32)
    joint_rest[1, 1, 3] = -0.9 * sp.sphere_radius
    w_neck = _smoothstep(-0.2 * sp.sphere_radius, -0.9 * sp.sphere_radius, verts[:, 1]) * 0.6
    lbs = np.stack([1.0 - w_neck, w_neck], axis=1)

    # small deterministic corrective bank, one per rotation-matrix entry of
    # the non-root joint
    n = verts.shape[0]
    p_feats = 9
    idx = np.arange(n)
    corr = np.zeros((p_feats, n, 3))
    for pf in range(p_feats):
        phase = np.sin(0.37 * idx + pf) * np.cos(0.21 * idx - pf)
        corr[pf] = 5e-4 * phase[:, None] * vdirs

    ts = sp.face_texture_size
    cs = sp.cavity_texture_size
    textures = {
        "face": np.full((ts, ts, 3), 128, dtype=np.uint8),
        "face_alpha": np.full((ts, ts), 255, dtype=np.uint8),
        "cavity": np.full((cs, cs, 3), 128, dtype=np.uint8),
    }

    rig = RigModel(
        template_vertices=verts.astype(np.float32),
        uvs=uvs.astype(np.float32),
        triangles=kept.astype(np.int32),
        triangle_kinds=np.full(len(kept), KIND_BASE, dtype=np.int32),
        blendshape_offsets=blendshapes.astype(np.float32),
        n_shape=0,
        joint_parents=joint_parents,
        joint_rest=joint_rest,
        lbs_weights=lbs.astype(np.float32),
        pose_corrective_offsets=corr.astype(np.float32),
        region_masks={
            "scalp": scalp.astype(np.int32),
            "face-hair": face_hair.astype(np.int32),
            "mouth-rim": rim.astype(np.int32),
        },
        textures=textures,
    )
    rig.validate()
    return fill_mouth_cavity(rig)


# ---------------------------------------------------------------------------
# ground-truth rendering (independent of the training renderer and tracer)

def _mesh_nearest_hit(
    rig: RigModel, origins: np.ndarray, dirs: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Brute-force nearest intersection against the full rig mesh.

    Returns (t, tri_id, uv) with t = inf and tri_id = -1 for misses.
    """
    verts = rig.template_vertices.astype(np.float64)
    tris = rig.triangles.astype(np.int64)
    v0 = verts[tris[:, 0]]
    e1 = verts[tris[:, 1]] - v0
    e2 = verts[tris[:, 2]] - v0
    n_rays = origins.shape[0]
    best_t = np.full(n_rays, np.inf)
    best_tri = np.full(n_rays, -1, dtype=np.int64)
    best_uv = np.zeros((n_rays, 2))
    chunk = max(1, 2_000_000 // max(len(tris), 1))
    for s in range(0, n_rays, chunk):
        o = origins[s : s + chunk]
        d = dirs[s : s + chunk]
        p = np.cross(d[:, None, :], e2[None])
        det = np.einsum("tk,rtk->rt", e1, p)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / det
            tv = o[:, None, :] - v0[None]
            u = np.einsum("rtk,rtk->rt", tv, p) * inv
            q = np.cross(tv, e1[None])
            v = np.einsum("rk,rtk->rt", d, q) * inv
            t = np.einsum("tk,rtk->rt", e2, q) * inv
        ok = (np.abs(det) > 1e-14) & (u >= 0) & (v >= 0) & (u + v <= 1.0) & (t > 1e-6)
        t = np.where(ok, t, np.inf)
        arg = t.argmin(axis=1)
        rows = np.arange(t.shape[0])
        tmin = t[rows, arg]
        hit = np.isfinite(tmin)
        best_t[s : s + chunk] = tmin
        best_tri[s : s + chunk] = np.where(hit, arg, -1)
        uu = u[rows, arg]
        vv = v[rows, arg]
        uv_c = rig.uvs.astype(np.float64)[tris[arg]]
        bary = np.stack([1.0 - uu - vv, uu, vv], axis=1)
        best_uv[s : s + chunk] = np.einsum("rk,rkc->rc", bary, uv_c) * hit[:, None]
    return best_t, best_tri, best_uv


def _srgb_encode_np(x: np.ndarray) -> np.ndarray:
    x = np.clip(x, 0.0, None)
    return np.where(x <= 0.0031308, 12.92 * x, 1.055 * np.maximum(x, 0.0031308) ** (1 / 2.4) - 0.055)


def render_ground_truth(
    scene: SyntheticScene,
    k: np.ndarray,
    cam_to_world: np.ndarray,
    width: int,
    height: int,
    n_steps: int = 256,
) -> tuple[np.ndarray, np.ndarray]:
    """Reference image (sRGB u8) + background mask by dense ray marching.

    Marches the analytic fuzz density through the shell around the head and
    composites over the analytically textured mesh. The mask marks pixels
    whose accumulated alpha stays below 1e-3.
    """
    sp = scene.spec
    origins, dirs = cameras.rays_for_image(k, cam_to_world, width, height)
    t_mesh, tri_hit, uv_hit = _mesh_nearest_hit(scene.rig, origins, dirs)

    mesh_rgb = np.zeros((origins.shape[0], 3))
    hit = tri_hit >= 0
    kinds = scene.rig.triangle_kinds[np.maximum(tri_hit, 0)]
    is_cav = hit & (kinds != KIND_BASE)
    is_base = hit & (kinds == KIND_BASE)
    mesh_rgb[is_base] = face_albedo(uv_hit[is_base])
    mesh_rgb[is_cav] = cavity_albedo(uv_hit[is_cav])

    # fuzz shell bounds: sphere of radius r_outer
    r_out = sp.sphere_radius + sp.fuzz_height
    oc = origins
    b = np.einsum("rk,rk->r", oc, dirs)
    c = np.einsum("rk,rk->r", oc, oc) - r_out * r_out
    disc = b * b - c
    has_shell = disc > 0
    sq = np.sqrt(np.maximum(disc, 0.0))
    t0 = np.maximum(-b - sq, 0.0)
    t1 = np.minimum(-b + sq, t_mesh)
    span = np.maximum(t1 - t0, 0.0) * has_shell

    trans = np.ones(origins.shape[0])
    rgb = np.zeros((origins.shape[0], 3))
    dt = span / n_steps
    for i in range(n_steps):
        tm = t0 + (i + 0.5) * dt
        x = origins + tm[:, None] * dirs
        dens = scene.fuzz_density(x)
        a = 1.0 - np.exp(-sp.fuzz_extinction * dens * dt)
        rgb += (trans * a)[:, None] * scene.fuzz_color(x)
        trans = trans * (1.0 - a)

    rgb += (trans * hit)[:, None] * mesh_rgb
    acc = (1.0 - trans) + trans * hit
    mask = acc < 1e-3

    img = _srgb_encode_np(rgb).reshape(height, width, 3)
    img_u8 = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    return img_u8, mask.reshape(height, width)


# ---------------------------------------------------------------------------
# dataset emission

def orbit_frames(spec: SceneSpec) -> list[dict]:
    """Camera list: train azimuths spread over the span, val between them."""
    orb = spec.orbit
    half = orb.azimuth_span_deg / 2.0
    entries = []
    az_train = np.linspace(-half, half, orb.n_train)
    for i, az in enumerate(az_train):
        el = orb.elevations_deg[i % len(orb.elevations_deg)]
        entries.append({"azimuth": float(az), "elevation": float(el), "split": "train"})
    if orb.n_val:
        az_val = np.linspace(-half / 2.0, half / 2.0, orb.n_val)
        el_mid = float(np.mean(orb.elevations_deg))
        for az in az_val:
            # offset so validation cameras never coincide with training ones
            entries.append(
                {"azimuth": float(az + half / (2.0 * orb.n_train)), "elevation": el_mid,
                 "split": "val"}
            )
    return entries


def emit_dataset(scene: SyntheticScene, out_dir: str | Path, n_steps: int = 256) -> Path:
    """Write rig + frames.json + per-frame image/mask PNGs; returns out_dir."""
    sp = scene.spec
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_rig(scene.rig, out_dir / "rig")

    w = h = sp.image_size
    k = cameras.intrinsics_from_fov(sp.orbit.fov_x_deg, w, h)
    identity = scene.rig.identity_pose()
    frames = []
    for i, cam in enumerate(orbit_frames(sp)):
        c2w = cameras.orbit_camera(
            np.zeros(3), sp.orbit.radius, cam["azimuth"], cam["elevation"]
        )
        img, mask = render_ground_truth(scene, k, c2w, w, h, n_steps=n_steps)
        img_name = f"frame_{i:04d}.png"
        mask_name = f"mask_{i:04d}.png"
        Image.fromarray(img).save(out_dir / img_name)
        Image.fromarray((mask * 255).astype(np.uint8)).save(out_dir / mask_name)
        frames.append(
            {
                "image": img_name,
                "mask": mask_name,
                "split": cam["split"],
                "intrinsics": k.tolist(),
                "extrinsics": c2w.tolist(),
                "shape_coeffs": identity.shape_coeffs.tolist(),
                "expr_coeffs": identity.expr_coeffs.tolist(),
                "joint_rotations": identity.joint_rotations.tolist(),
                "global_transform": identity.global_transform.tolist(),
            }
        )
    doc = {
        "width": w,
        "height": h,
        "color_space": "srgb-premultiplied-black",
        "rig": "rig/rig.json",
        "frames": frames,
    }
    with open(out_dir / "frames.json", "w") as f:
        json.dump(doc, f, indent=1)
        f.write("\n")
    with open(out_dir / "scene.json", "w") as f:
        json.dump({"spec": _spec_to_dict(sp)}, f, indent=1)
        f.write("\n")
    return out_dir


def _spec_to_dict(sp: SceneSpec) -> dict:
    d = dict(sp.__dict__)
    d["orbit"] = dict(sp.orbit.__dict__)
    d["orbit"]["elevations_deg"] = list(sp.orbit.elevations_deg)
    return d


def spec_from_dict(d: dict) -> SceneSpec:
    orb = d.pop("orbit", {})
    orb["elevations_deg"] = tuple(orb.get("elevations_deg", (16.0, 30.0)))
    return SceneSpec(orbit=OrbitSpec(**orb), **d)

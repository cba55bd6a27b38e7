"""CPU rasterizer for exported avatars, mirroring the two-pass viewer.

Pass 1 skins all vertices (blendshapes + correctives + LBS + global),
projects, and rasterizes with a depth test, perspective-correct
barycentrics and the top-left fill rule. Base/cavity fragments sample their
textures with an alpha test; lattice fragments sample the alpha atlas
(alpha test at 0.5) and both feature atlases, then run the color network
with the per-pixel view direction. Pass 2 converts linear RGB to sRGB.
Deterministic: identical inputs yield bitwise-identical images.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .export import ExportedAvatar
from .rig import (
    KIND_LATTICE,
    PoseParams,
    blend_vertices,
    pose_feature_vector,
    skin_points,
)


class RasterError(Exception):
    pass


@dataclass
class FrameRequest:
    intrinsics: np.ndarray  # (3, 3)
    cam_to_world: np.ndarray  # (4, 4)
    pose: PoseParams
    width: int
    height: int
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def validate(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise RasterError("output resolution must be positive")


def skin_asset(asset: ExportedAvatar, pose: PoseParams) -> np.ndarray:
    """Posed asset vertices; the same deformation path the rig uses."""
    shaped = blend_vertices(
        asset.vertices,
        asset.blendshape_offsets,
        pose.coeffs,
        asset.pose_correctives,
        pose_feature_vector(pose),
    )
    return skin_points(shaped, asset.lbs_weights, asset.joint_parents, asset.joint_rest, pose)


def sample_bilinear_np(tex: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """u8 or float texture, clamp-to-edge, texel centers at (i+0.5)/size."""
    h, w = tex.shape[0], tex.shape[1]
    squeeze = tex.ndim == 2
    t = tex[:, :, None] if squeeze else tex
    t = t.astype(np.float64) / (255.0 if tex.dtype == np.uint8 else 1.0)
    x = uv[:, 0] * w - 0.5
    y = uv[:, 1] * h - 0.5
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    x0c = np.clip(x0, 0, w - 1)
    x1c = np.clip(x0 + 1, 0, w - 1)
    y0c = np.clip(y0, 0, h - 1)
    y1c = np.clip(y0 + 1, 0, h - 1)
    out = (
        t[y0c, x0c] * (1 - fx) * (1 - fy)
        + t[y0c, x1c] * fx * (1 - fy)
        + t[y1c, x0c] * (1 - fx) * fy
        + t[y1c, x1c] * fx * fy
    )
    return out[:, 0] if squeeze else out


@dataclass
class _GBuffer:
    depth: np.ndarray  # (H, W) camera z, +inf empty
    kind: np.ndarray  # (H, W) i4, -1 empty
    uv: np.ndarray  # (H, W, 2)
    world: np.ndarray  # (H, W, 3) fragment world position


def rasterize(asset: ExportedAvatar, req: FrameRequest) -> np.ndarray:
    """Render the asset; returns an (H, W, 3) u8 sRGB image."""
    req.validate()
    posed = skin_asset(asset, req.pose)
    gbuf = _raster_pass(asset, posed, req)
    linear = _shade_pass(asset, gbuf, req)
    srgb = _srgb_encode_np(linear)
    return np.round(np.clip(srgb, 0.0, 1.0) * 255.0).astype(np.uint8)


def _raster_pass(asset: ExportedAvatar, posed: np.ndarray, req: FrameRequest) -> _GBuffer:
    h, w = req.height, req.width
    r = req.cam_to_world[:3, :3]
    t = req.cam_to_world[:3, 3]
    p_cam = (posed - t) @ r
    k = req.intrinsics
    z = p_cam[:, 2]
    # triangles with any vertex at or behind the eye plane are culled rather
    # than clipped; desk-scale cameras sit well outside the head
    with np.errstate(divide="ignore", invalid="ignore"):
        sx = (k[0, 0] * p_cam[:, 0] + k[0, 1] * p_cam[:, 1]) / z + k[0, 2]
        sy = (k[1, 1] * p_cam[:, 1]) / z + k[1, 2]

    gbuf = _GBuffer(
        depth=np.full((h, w), np.inf),
        kind=np.full((h, w), -1, dtype=np.int32),
        uv=np.zeros((h, w, 2)),
        world=np.zeros((h, w, 3)),
    )

    tris = asset.triangles
    uvs = asset.uvs.astype(np.float64)
    alpha_tex = asset.textures["alpha"]
    face_alpha_tex = asset.textures["face_alpha"]

    for ti in range(tris.shape[0]):
        i0, i1, i2 = (int(v) for v in tris[ti])
        if z[i0] <= 1e-9 or z[i1] <= 1e-9 or z[i2] <= 1e-9:
            continue
        x0, y0 = sx[i0], sy[i0]
        x1, y1 = sx[i1], sy[i1]
        x2, y2 = sx[i2], sy[i2]
        area = (x1 - x0) * (y2 - y0) - (y1 - y0) * (x2 - x0)
        if area == 0.0:
            continue
        xmin = max(int(np.floor(min(x0, x1, x2) - 0.5)), 0)
        xmax = min(int(np.ceil(max(x0, x1, x2) - 0.5)), w - 1)
        ymin = max(int(np.floor(min(y0, y1, y2) - 0.5)), 0)
        ymax = min(int(np.ceil(max(y0, y1, y2) - 0.5)), h - 1)
        if xmin > xmax or ymin > ymax:
            continue
        px, py = np.meshgrid(
            np.arange(xmin, xmax + 1) + 0.5, np.arange(ymin, ymax + 1) + 0.5, indexing="xy"
        )
        # signed edge functions, flipped to render both windings
        sgn = 1.0 if area > 0 else -1.0
        e0 = sgn * ((x2 - x1) * (py - y1) - (y2 - y1) * (px - x1))
        e1 = sgn * ((x0 - x2) * (py - y2) - (y0 - y2) * (px - x2))
        e2 = sgn * ((x1 - x0) * (py - y0) - (y1 - y0) * (px - x0))
        inside = (
            _edge_accept(e0, x2 - x1 if sgn > 0 else x1 - x2, y2 - y1 if sgn > 0 else y1 - y2)
            & _edge_accept(e1, x0 - x2 if sgn > 0 else x2 - x0, y0 - y2 if sgn > 0 else y2 - y0)
            & _edge_accept(e2, x1 - x0 if sgn > 0 else x0 - x1, y1 - y0 if sgn > 0 else y0 - y1)
        )
        if not inside.any():
            continue
        rows, cols = np.nonzero(inside)
        l0 = e0[rows, cols] / (sgn * area)
        l1 = e1[rows, cols] / (sgn * area)
        l2 = e2[rows, cols] / (sgn * area)
        # perspective correction
        iz = l0 / z[i0] + l1 / z[i1] + l2 / z[i2]
        b0 = (l0 / z[i0]) / iz
        b1 = (l1 / z[i1]) / iz
        b2 = (l2 / z[i2]) / iz
        frag_z = 1.0 / iz
        frag_uv = (
            b0[:, None] * uvs[i0] + b1[:, None] * uvs[i1] + b2[:, None] * uvs[i2]
        )

        kind = int(asset.tri_kinds[ti])
        if kind == KIND_LATTICE:
            a = sample_bilinear_np(alpha_tex, frag_uv)
        elif kind == 1:  # base: alpha-tested against the face alpha map
            a = sample_bilinear_np(face_alpha_tex, frag_uv)
        else:  # cavity is opaque
            a = np.ones(frag_uv.shape[0])
        keep = a >= 0.5
        if not keep.any():
            continue
        rows, cols = rows[keep], cols[keep]
        frag_z = frag_z[keep]
        frag_uv = frag_uv[keep]
        b0, b1, b2 = b0[keep], b1[keep], b2[keep]

        yy, xx = rows + ymin, cols + xmin
        closer = frag_z < gbuf.depth[yy, xx]
        if not closer.any():
            continue
        yy, xx = yy[closer], xx[closer]
        gbuf.depth[yy, xx] = frag_z[closer]
        gbuf.kind[yy, xx] = kind
        gbuf.uv[yy, xx] = frag_uv[closer]
        frag_world = (
            b0[closer][:, None] * posed[i0]
            + b1[closer][:, None] * posed[i1]
            + b2[closer][:, None] * posed[i2]
        )
        gbuf.world[yy, xx] = frag_world
    return gbuf


def _edge_accept(e: np.ndarray, dx: float, dy: float) -> np.ndarray:
    """Top-left rule: strictly inside, or on a top or left edge."""
    top_left = (dy < 0.0) or (dy == 0.0 and dx > 0.0)
    return (e > 0.0) | ((e == 0.0) & top_left)


def _shade_pass(asset: ExportedAvatar, gbuf: _GBuffer, req: FrameRequest) -> np.ndarray:
    h, w = gbuf.kind.shape
    out = np.tile(np.asarray(req.background, dtype=np.float64), (h, w, 1))
    cam_center = req.cam_to_world[:3, 3]

    for kind, tex_name in ((1, "face"), (2, "cavity")):
        m = gbuf.kind == kind
        if m.any():
            out[m] = sample_bilinear_np(asset.textures[tex_name], gbuf.uv[m])

    m = gbuf.kind == KIND_LATTICE
    if m.any():
        fa = sample_bilinear_np(asset.textures["feat_a"], gbuf.uv[m])
        fb = sample_bilinear_np(asset.textures["feat_b"], gbuf.uv[m])
        feats = np.concatenate([fa, fb], axis=1)
        d = gbuf.world[m] - cam_center
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        mlp = asset.color_mlp()
        with torch.no_grad():
            rgb = mlp(
                torch.cat(
                    [
                        torch.as_tensor(feats, dtype=torch.float32),
                        torch.as_tensor(d, dtype=torch.float32),
                    ],
                    dim=1,
                )
            ).numpy()
        out[m] = rgb
    return out


def _srgb_encode_np(x: np.ndarray) -> np.ndarray:
    x = np.clip(x, 0.0, None)
    return np.where(
        x <= 0.0031308, 12.92 * x, 1.055 * np.maximum(x, 0.0031308) ** (1 / 2.4) - 0.055
    )

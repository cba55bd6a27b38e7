"""Distill the trained hybrid model into a rigged triangle asset.

Pruning walks every training-view pixel ray front to back through the
lattice, keeps the first triangle whose predicted opacity reaches 0.5, and
drops everything never recorded. Each kept triangle gets a 16x16 atlas cell
filled by evaluating the opacity/feature networks at canonical points
placed by a low-distortion square-to-triangle map; the triangle is split in
two so its four UV corners are exactly the cell corners. Vertices are
duplicated per unique UV, and everything (mesh, skinning, textures, color
network weights) is serialized into a self-contained asset.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import cameras, tracer
from .io_util import ContainerError, read_container, write_container
from .lattice import PrismLattice, canonical_points
from .neural import FEATURE_DIM, FieldSet, Mlp
from .renderer import SceneGeometry, TextureSet, build_scene
from .rig import KIND_BASE, KIND_CAVITY, KIND_LATTICE, RigModel

ASSET_FORMAT = "havatar-avatar"
ASSET_VERSION = 1

CELL = 16  # texels per atlas cell side

TEXTURE_FILES = {
    "alpha": "alpha.png",
    "feat_a": "featA.png",
    "feat_b": "featB.png",
    "face": "face.png",
    "face_alpha": "face_alpha.png",
    "cavity": "cavity.png",
}


class ExportError(Exception):
    pass


# ---------------------------------------------------------------------------
# square <-> triangle mapping

def square_to_bary(uv: np.ndarray) -> np.ndarray:
    """Low-distortion unit-square -> barycentric map (fold along the diagonal).

    (0,0)->corner A, (1,0)->B, (0,1)->C, (1,1)->midpoint of BC. Area
    preserving up to the fold; inverse is bary_to_square.
    """
    u = np.array(uv[..., 0], dtype=np.float64, copy=True)
    v = np.array(uv[..., 1], dtype=np.float64, copy=True)
    upper = v > u
    u2 = np.where(upper, u * 0.5, u - v * 0.5)
    v2 = np.where(upper, v - u * 0.5, v * 0.5)
    return np.stack([1.0 - u2 - v2, u2, v2], axis=-1)


def bary_to_square(bary: np.ndarray) -> np.ndarray:
    b1 = np.asarray(bary[..., 1], dtype=np.float64)
    b2 = np.asarray(bary[..., 2], dtype=np.float64)
    upper = b2 > b1
    u = np.where(upper, 2.0 * b1, b1 + b2)
    v = np.where(upper, b2 + b1, 2.0 * b2)
    return np.stack([u, v], axis=-1)


# ---------------------------------------------------------------------------
# pruning

@dataclass
class PruneReport:
    kept: np.ndarray  # sorted lattice triangle ids
    per_view_hits: list[int]  # recorded first-opaque hits per view
    pruned_count: int

    @property
    def kept_count(self) -> int:
        return self.kept.shape[0]


def prune(
    lat: PrismLattice,
    fields: FieldSet,
    rig: RigModel,
    views: list,
    width: int,
    height: int,
    chunk: int = 16384,
) -> PruneReport:
    """First-opaque-hit visibility over all training views.

    Each view's pixel rays walk their lattice hit lists front to back; the
    first hit with opacity >= 0.5 is recorded. Base/cavity hits end a walk.
    """
    if not views:
        raise ExportError("prune needs at least one training view")
    kept: set[int] = set()
    per_view = []
    with torch.no_grad():
        for frame in views:
            scene = build_scene(rig, lat, frame.pose)
            bvh = tracer.build_bvh(scene.tri_verts)
            origins, dirs = cameras.rays_for_image(
                frame.intrinsics, frame.cam_to_world, width, height
            )
            recorded = 0
            for s in range(0, origins.shape[0], chunk):
                res = tracer.trace_rays(
                    bvh, scene.tri_verts, scene.tri_kinds,
                    origins[s : s + chunk], dirs[s : s + chunk],
                )
                hit_tris = _first_opaque_hits(scene, res, fields)
                recorded += hit_tris.size
                kept.update(hit_tris.tolist())
            per_view.append(recorded)
    kept_arr = np.asarray(sorted(kept), dtype=np.int64)
    return PruneReport(
        kept=kept_arr,
        per_view_hits=per_view,
        pruned_count=int(lat.n_triangles - kept_arr.size),
    )


def _first_opaque_hits(scene: SceneGeometry, res: tracer.TraceResult, fields: FieldSet) -> np.ndarray:
    """Lattice triangle ids recorded by the walk, one per ray at most."""
    if res.n_hits == 0:
        return np.zeros(0, dtype=np.int64)
    is_lat = res.kind == KIND_LATTICE
    if not is_lat.any():
        return np.zeros(0, dtype=np.int64)
    lat_tris = scene.lattice_tri_of_soup(res.tri_id[is_lat])
    pts = canonical_points(scene.lattice, lat_tris, res.bary[is_lat])
    alpha = fields.forward_opacity(torch.as_tensor(pts, dtype=torch.float32)).numpy()
    opaque = alpha >= 0.5
    # hits are CSR-sorted by (ray, t); the first opaque lattice hit per ray
    # wins, and base/cavity terminators (always last) cannot precede it
    flat_idx = np.nonzero(is_lat)[0][opaque]
    if flat_idx.size == 0:
        return np.zeros(0, dtype=np.int64)
    ray_of_hit = np.searchsorted(res.ray_ptr, flat_idx, side="right") - 1
    first_per_ray = np.unique(ray_of_hit, return_index=True)[1]
    return lat_tris[opaque][first_per_ray]


# ---------------------------------------------------------------------------
# atlas baking

@dataclass
class AtlasBake:
    grid: int  # G cells per side
    alpha: np.ndarray  # (G*16, G*16) u8, values in {0, 255}
    feat_a: np.ndarray  # (G*16, G*16, 4) u8
    feat_b: np.ndarray  # (G*16, G*16, 4) u8
    cell_of_tri: dict[int, int]  # kept lattice tri id -> cell index (row-major)


def bake_atlases(
    lat: PrismLattice,
    kept: np.ndarray,
    fields: FieldSet,
    max_grid: int = 256,
) -> AtlasBake:
    """Fill one 16x16 cell per kept triangle with network evaluations.

    Sample points are texel centers (i+0.5)/16 pushed through the
    square->triangle map, so bilinear lookups at bake points are exact.
    Alpha is thresholded to {0,255}; the 8 feature channels split into two
    RGBA images.
    """
    kept = np.asarray(kept, dtype=np.int64)
    if kept.size == 0:
        raise ExportError("bake_atlases needs a nonempty kept set")
    g = int(np.ceil(np.sqrt(kept.size)))
    if g > max_grid:
        raise ExportError(
            f"{kept.size} kept triangles need a {g}x{g} cell grid, over the {max_grid} budget"
        )
    side = g * CELL

    ij = (np.arange(CELL) + 0.5) / CELL
    sq_u, sq_v = np.meshgrid(ij, ij, indexing="xy")  # [row, col] = [v, u]
    sq = np.stack([sq_u.ravel(), sq_v.ravel()], axis=1)  # (256, 2)
    bary = square_to_bary(sq)  # (256, 3)

    corners = lat.all_vertices[lat.lattice_triangles[kept]]  # (n, 3, 3)
    pts = np.einsum("sk,nkc->nsc", bary, corners).reshape(-1, 3)
    extent = np.maximum(lat.bbox_max - lat.bbox_min, 1e-12)
    pts01 = np.clip((pts - lat.bbox_min) / extent, 0.0, 1.0)

    with torch.no_grad():
        tp = torch.as_tensor(pts01, dtype=torch.float32)
        alpha = fields.forward_opacity(tp).numpy()
        feats = fields.forward_feature(tp).numpy()

    alpha_img = np.zeros((side, side), dtype=np.uint8)
    feat_a = np.zeros((side, side, 4), dtype=np.uint8)
    feat_b = np.zeros((side, side, 4), dtype=np.uint8)
    alpha_cells = (alpha.reshape(kept.size, CELL, CELL) >= 0.5).astype(np.uint8) * 255
    feat_q = np.round(np.clip(feats, 0.0, 1.0) * 255.0).astype(np.uint8)
    feat_cells = feat_q.reshape(kept.size, CELL, CELL, FEATURE_DIM)

    cell_of_tri = {}
    for n, tri in enumerate(kept):
        gy, gx = divmod(n, g)
        sl = np.s_[gy * CELL : (gy + 1) * CELL, gx * CELL : (gx + 1) * CELL]
        alpha_img[sl] = alpha_cells[n]
        feat_a[sl] = feat_cells[n, :, :, 0:4]
        feat_b[sl] = feat_cells[n, :, :, 4:8]
        cell_of_tri[int(tri)] = n
    return AtlasBake(grid=g, alpha=alpha_img, feat_a=feat_a, feat_b=feat_b,
                     cell_of_tri=cell_of_tri)


def cell_uv_corners(grid: int, cell: int) -> np.ndarray:
    """UVs of a cell's four corners, rows (00, 10, 01, 11), in atlas [0,1]^2."""
    gy, gx = divmod(cell, grid)
    u0, v0 = gx / grid, gy / grid
    du = 1.0 / grid
    return np.array(
        [[u0, v0], [u0 + du, v0], [u0, v0 + du], [u0 + du, v0 + du]]
    )


# ---------------------------------------------------------------------------
# asset assembly

@dataclass
class ExportedAvatar:
    vertices: np.ndarray  # (V, 3) f4 canonical
    uvs: np.ndarray  # (V, 2) f4
    triangles: np.ndarray  # (F, 3) i4
    tri_kinds: np.ndarray  # (F,) i4
    tri_cells: np.ndarray  # (F,) i4 atlas cell per lattice triangle, -1 otherwise
    blendshape_offsets: np.ndarray  # (S, V, 3) f4
    n_shape: int
    lbs_weights: np.ndarray  # (V, J) f4
    pose_correctives: np.ndarray  # (P, V, 3) f4
    joint_parents: np.ndarray
    joint_rest: np.ndarray
    atlas_grid: int
    color_weights: list[np.ndarray]
    color_biases: list[np.ndarray]
    textures: dict[str, np.ndarray]  # name -> u8 image (see TEXTURE_FILES)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_joints(self) -> int:
        return self.joint_parents.shape[0]

    def color_mlp(self) -> Mlp:
        widths = [self.color_weights[0].shape[1]] + [w.shape[0] for w in self.color_weights]
        mlp = Mlp(widths)
        mlp.load_arrays(self.color_weights, self.color_biases)
        return mlp

    def identity_pose(self):
        from .rig import PoseParams

        n_expr = self.blendshape_offsets.shape[0] - self.n_shape
        return PoseParams.identity(self.n_shape, n_expr, self.n_joints)


def assemble_asset(
    rig: RigModel,
    lat: PrismLattice,
    report: PruneReport,
    bake: AtlasBake,
    fields: FieldSet,
    textures: TextureSet,
) -> ExportedAvatar:
    """Merge base mesh, cavity and kept lattice triangles into one rigged mesh.

    Lattice triangles are split along the A-to-midpoint(BC) median so the two
    halves carry the four cell-corner UVs; every (source vertex, uv) pair
    becomes one asset vertex, which de-duplicates base vertices and keeps
    per-cell lattice corners distinct. Unreferenced vertices are compacted
    away.
    """
    s_total = rig.n_blendshapes
    p_total = rig.pose_corrective_offsets.shape[0]
    if lat.inherited_correctives.shape[0] not in (0, p_total):
        raise ExportError("lattice corrective bank does not match the rig")
    if set(bake.cell_of_tri) != set(int(t) for t in report.kept):
        raise ExportError("atlas bake does not cover the pruned kept set")

    out_pos: list[np.ndarray] = []
    out_uv: list[np.ndarray] = []
    out_shapes: list[np.ndarray] = []  # (S, 3) per vertex
    out_lbs: list[np.ndarray] = []
    out_corr: list[np.ndarray] = []  # (P, 3) per vertex
    vert_key: dict[tuple, int] = {}

    def add_vertex(key: tuple, pos, uv, shapes, lbs, corr) -> int:
        if key in vert_key:
            return vert_key[key]
        idx = len(out_pos)
        vert_key[key] = idx
        out_pos.append(np.asarray(pos, dtype=np.float64))
        out_uv.append(np.asarray(uv, dtype=np.float64))
        out_shapes.append(np.asarray(shapes, dtype=np.float64).reshape(s_total, 3))
        out_lbs.append(np.asarray(lbs, dtype=np.float64))
        out_corr.append(np.asarray(corr, dtype=np.float64).reshape(p_total, 3))
        return idx

    tris: list[list[int]] = []
    kinds: list[int] = []
    cells: list[int] = []

    # base + cavity triangles keep their rig UVs
    for ti in range(rig.n_triangles):
        tri = rig.triangles[ti]
        ids = []
        for v in tri:
            v = int(v)
            uv = rig.uvs[v]
            key = ("rig", v, round(float(uv[0]), 8), round(float(uv[1]), 8))
            corr = (
                rig.pose_corrective_offsets[:, v]
                if p_total
                else np.zeros((0, 3))
            )
            ids.append(
                add_vertex(
                    key,
                    rig.template_vertices[v],
                    uv,
                    rig.blendshape_offsets[:, v] if s_total else np.zeros((0, 3)),
                    rig.lbs_weights[v],
                    corr,
                )
            )
        tris.append(ids)
        kinds.append(int(rig.triangle_kinds[ti]))
        cells.append(-1)

    # kept lattice triangles: split along the median, UVs at cell corners
    lat_banks = lat.shell_blendshape_offsets.reshape(s_total, -1, 3) if s_total else None
    n_shell = lat.shell_vertex_count
    all_verts = lat.all_vertices
    for tri_id, cell in bake.cell_of_tri.items():
        corners = lat.lattice_triangles[tri_id]
        uv4 = cell_uv_corners(bake.grid, cell)  # A, B, C, M(BC)

        def lat_vertex_data(gv: int):
            local = gv % n_shell
            shapes = lat_banks[:, gv] if s_total else np.zeros((0, 3))
            corr = (
                lat.inherited_correctives[:, local]
                if lat.inherited_correctives.shape[0]
                else np.zeros((p_total, 3))
            )
            return all_verts[gv], shapes, lat.inherited_lbs[local], corr

        data = [lat_vertex_data(int(g)) for g in corners]
        mid_pos = 0.5 * (data[1][0] + data[2][0])
        mid_shapes = 0.5 * (data[1][1] + data[2][1])
        mid_lbs = 0.5 * (data[1][2] + data[2][2])
        mid_corr = 0.5 * (data[1][3] + data[2][3])

        ia = add_vertex(("lat", tri_id, 0), data[0][0], uv4[0], data[0][1], data[0][2], data[0][3])
        ib = add_vertex(("lat", tri_id, 1), data[1][0], uv4[1], data[1][1], data[1][2], data[1][3])
        ic = add_vertex(("lat", tri_id, 2), data[2][0], uv4[2], data[2][1], data[2][2], data[2][3])
        im = add_vertex(("lat", tri_id, 3), mid_pos, uv4[3], mid_shapes, mid_lbs, mid_corr)
        tris.append([ia, ib, im])
        kinds.append(KIND_LATTICE)
        cells.append(cell)
        tris.append([ia, im, ic])
        kinds.append(KIND_LATTICE)
        cells.append(cell)

    cw, cb = fields.mlp_color.export_arrays()

    def tex_u8(t: torch.Tensor) -> np.ndarray:
        return np.round(np.clip(t.detach().numpy(), 0.0, 1.0) * 255.0).astype(np.uint8)

    asset = ExportedAvatar(
        vertices=np.asarray(out_pos, dtype=np.float32),
        uvs=np.asarray(out_uv, dtype=np.float32),
        triangles=np.asarray(tris, dtype=np.int32),
        tri_kinds=np.asarray(kinds, dtype=np.int32),
        tri_cells=np.asarray(cells, dtype=np.int32),
        blendshape_offsets=(
            np.transpose(np.asarray(out_shapes, dtype=np.float32), (1, 0, 2))
            if s_total
            else np.zeros((0, len(out_pos), 3), dtype=np.float32)
        ),
        n_shape=rig.n_shape,
        lbs_weights=np.asarray(out_lbs, dtype=np.float32),
        pose_correctives=(
            np.transpose(np.asarray(out_corr, dtype=np.float32), (1, 0, 2))
            if p_total
            else np.zeros((0, len(out_pos), 3), dtype=np.float32)
        ),
        joint_parents=rig.joint_parents.copy(),
        joint_rest=rig.joint_rest.copy(),
        atlas_grid=bake.grid,
        color_weights=cw,
        color_biases=cb,
        textures={
            "alpha": bake.alpha,
            "feat_a": bake.feat_a,
            "feat_b": bake.feat_b,
            "face": tex_u8(textures.face),
            "face_alpha": tex_u8(textures.face_alpha),
            "cavity": tex_u8(textures.cavity),
        },
    )
    if np.asarray(tris).size and np.asarray(tris).max() >= asset.n_vertices:
        raise ExportError("dangling vertex index after assembly")
    return asset


def export_avatar(
    rig: RigModel,
    lat: PrismLattice,
    fields: FieldSet,
    textures: TextureSet,
    views: list,
    width: int,
    height: int,
    out_dir: str | Path,
    max_grid: int = 256,
) -> tuple[Path, PruneReport]:
    """prune -> bake -> assemble -> write; the full distillation pipeline."""
    report = prune(lat, fields, rig, views, width, height)
    if report.kept_count == 0:
        bake = AtlasBake(
            grid=1,
            alpha=np.zeros((CELL, CELL), dtype=np.uint8),
            feat_a=np.zeros((CELL, CELL, 4), dtype=np.uint8),
            feat_b=np.zeros((CELL, CELL, 4), dtype=np.uint8),
            cell_of_tri={},
        )
    else:
        bake = bake_atlases(lat, report.kept, fields, max_grid=max_grid)
    asset = assemble_asset(rig, lat, report, bake, fields, textures)
    path = write_asset(asset, out_dir)
    return path, report


# ---------------------------------------------------------------------------
# asset serialization

def write_asset(asset: ExportedAvatar, out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    buffers = {
        "vertices": asset.vertices.astype("<f4"),
        "uvs": asset.uvs.astype("<f4"),
        "triangles": asset.triangles.astype("<i4"),
        "tri_kinds": asset.tri_kinds.astype("<i4"),
        "tri_cells": asset.tri_cells.astype("<i4"),
        "blendshape_offsets": asset.blendshape_offsets.astype("<f4"),
        "lbs_weights": asset.lbs_weights.astype("<f4"),
        "pose_correctives": asset.pose_correctives.astype("<f4"),
        "joint_parents": asset.joint_parents.astype("<i4"),
        "joint_rest": asset.joint_rest.astype("<f4"),
    }
    for i, (w, b) in enumerate(zip(asset.color_weights, asset.color_biases)):
        buffers[f"color/layer{i}/weight"] = w.astype("<f4")
        buffers[f"color/layer{i}/bias"] = b.astype("<f4")
    meta = {
        "counts": {
            "vertices": asset.n_vertices,
            "triangles": asset.triangles.shape[0],
            "shape_blendshapes": asset.n_shape,
            "expr_blendshapes": asset.blendshape_offsets.shape[0] - asset.n_shape,
            "joints": asset.n_joints,
        },
        "atlas_grid": asset.atlas_grid,
        "cell_size": CELL,
        "color_layers": [list(w.shape) for w in asset.color_weights],
        "textures": {},
    }
    for name, fname in TEXTURE_FILES.items():
        img = asset.textures[name]
        Image.fromarray(img).save(out_dir / fname)
        meta["textures"][name] = {"file": fname, "size": [img.shape[0], img.shape[1]]}
    write_container(out_dir / "avatar.json", ASSET_FORMAT, ASSET_VERSION, meta, buffers)
    return out_dir / "avatar.json"


def read_asset(path: str | Path) -> ExportedAvatar:
    path = Path(path)
    if path.is_dir():
        path = path / "avatar.json"
    meta, b = read_container(path, ASSET_FORMAT, ASSET_VERSION)
    n_layers = len(meta["color_layers"])
    weights = [b[f"color/layer{i}/weight"] for i in range(n_layers)]
    biases = [b[f"color/layer{i}/bias"] for i in range(n_layers)]
    textures = {}
    for name, entry in meta["textures"].items():
        fp = path.parent / entry["file"]
        if not fp.exists():
            raise ContainerError(f"asset texture missing: {fp}")
        textures[name] = np.asarray(Image.open(fp))
    return ExportedAvatar(
        vertices=b["vertices"],
        uvs=b["uvs"],
        triangles=b["triangles"],
        tri_kinds=b["tri_kinds"],
        tri_cells=b["tri_cells"],
        blendshape_offsets=b["blendshape_offsets"],
        n_shape=meta["counts"]["shape_blendshapes"],
        lbs_weights=b["lbs_weights"],
        pose_correctives=b["pose_correctives"],
        joint_parents=b["joint_parents"],
        joint_rest=b["joint_rest"],
        atlas_grid=meta["atlas_grid"],
        color_weights=weights,
        color_biases=biases,
        textures=textures,
    )

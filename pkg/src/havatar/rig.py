"""Generic blendshape + linear-blend-skinning head rig.

A rig is a template mesh with blendshape banks, a small skeleton with LBS
weights, optional pose-corrective offsets, named triangle region masks and
learnable texture slots. The on-disk format is a ``rig.json`` manifest plus
a ``rig.bin`` buffer file (see io_util) and PNG texture initializations;
any morphable head model can be converted into it offline.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .io_util import ContainerError, read_container, write_container

log = logging.getLogger(__name__)

RIG_FORMAT = "havatar-rig"
RIG_VERSION = 1

# Triangle kinds, shared across the whole pipeline.
KIND_LATTICE = 0
KIND_BASE = 1
KIND_CAVITY = 2

TEXTURE_SLOTS = ("face", "face_alpha", "cavity")


class RigError(Exception):
    pass


class RigValidationError(RigError):
    """A loaded or constructed rig violates a structural invariant."""


@dataclass(frozen=True)
class PoseParams:
    """Pose of a rig: blendshape coefficients, joint rotations, rigid transform."""

    shape_coeffs: np.ndarray  # (S_shape,)
    expr_coeffs: np.ndarray  # (S_expr,)
    joint_rotations: np.ndarray  # (J, 4) unit quaternions, (w, x, y, z)
    global_transform: np.ndarray  # (4, 4) rigid transform applied last

    def validate(self) -> None:
        norms = np.linalg.norm(self.joint_rotations, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-6):
            raise RigValidationError(
                f"joint_rotations: quaternion norms deviate from 1 by up to "
                f"{np.abs(norms - 1.0).max():.2e}"
            )

    @property
    def coeffs(self) -> np.ndarray:
        return np.concatenate([self.shape_coeffs, self.expr_coeffs])

    @staticmethod
    def identity(n_shape: int, n_expr: int, n_joints: int) -> "PoseParams":
        quats = np.zeros((n_joints, 4))
        quats[:, 0] = 1.0
        return PoseParams(
            shape_coeffs=np.zeros(n_shape),
            expr_coeffs=np.zeros(n_expr),
            joint_rotations=quats,
            global_transform=np.eye(4),
        )


@dataclass
class RigModel:
    """Immutable after load; all arrays little-endian views of the file buffers."""

    template_vertices: np.ndarray  # (N, 3) f4, canonical meters
    uvs: np.ndarray  # (N, 2) f4 in [0, 1]
    triangles: np.ndarray  # (T, 3) i4
    triangle_kinds: np.ndarray  # (T,) i4, KIND_BASE or KIND_CAVITY
    blendshape_offsets: np.ndarray  # (S_total, N, 3) f4, shape bank then expression bank
    n_shape: int
    joint_parents: np.ndarray  # (J,) i4, -1 for root
    joint_rest: np.ndarray  # (J, 4, 4) f4 rest-pose world transforms
    lbs_weights: np.ndarray  # (N, J) f4, rows sum to 1
    pose_corrective_offsets: np.ndarray  # (P, N, 3) f4, P = 9*(J-1) or 0
    region_masks: dict[str, np.ndarray] = field(default_factory=dict)  # name -> (k,) i4 tri ids
    textures: dict[str, np.ndarray] = field(default_factory=dict)  # slot -> u8 image

    @property
    def n_vertices(self) -> int:
        return self.template_vertices.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    @property
    def n_blendshapes(self) -> int:
        return self.blendshape_offsets.shape[0]

    @property
    def n_expr(self) -> int:
        return self.n_blendshapes - self.n_shape

    @property
    def n_joints(self) -> int:
        return self.joint_parents.shape[0]

    def identity_pose(self) -> PoseParams:
        return PoseParams.identity(self.n_shape, self.n_expr, self.n_joints)

    def validate(self) -> None:
        n, t = self.n_vertices, self.n_triangles
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= n):
            raise RigValidationError("triangles: vertex index out of range")
        if self.blendshape_offsets.shape[1:] != (n, 3):
            raise RigValidationError(
                f"blendshape_offsets: expected per-shape rows ({n}, 3), "
                f"got {self.blendshape_offsets.shape[1:]}"
            )
        if not (0 <= self.n_shape <= self.n_blendshapes):
            raise RigValidationError("n_shape: outside blendshape bank")
        row_sums = self.lbs_weights.sum(axis=1)
        if self.lbs_weights.min() < 0:
            raise RigValidationError("lbs_weights: negative weight")
        if not np.allclose(row_sums, 1.0, atol=1e-5):
            bad = int(np.abs(row_sums - 1.0).argmax())
            raise RigValidationError(
                f"lbs_weights: row {bad} sums to {row_sums[bad]:.6f}, expected 1"
            )
        p_expected = 9 * max(self.n_joints - 1, 0)
        if self.pose_corrective_offsets.shape[0] not in (0, p_expected):
            raise RigValidationError(
                f"pose_corrective_offsets: {self.pose_corrective_offsets.shape[0]} banks, "
                f"expected 0 or {p_expected}"
            )
        seen: set[int] = set()
        for name, ids in self.region_masks.items():
            ids = np.asarray(ids)
            if ids.size and (ids.min() < 0 or ids.max() >= t):
                raise RigValidationError(f"region_masks[{name!r}]: triangle index out of range")
            overlap = seen.intersection(ids.tolist())
            if overlap:
                raise RigValidationError(
                    f"region_masks[{name!r}]: overlaps another mask at triangle {min(overlap)}"
                )
            seen.update(ids.tolist())


# ---------------------------------------------------------------------------
# pose math

def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """(…, 4) unit quaternions (w, x, y, z) -> (…, 3, 3) rotation matrices."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    m = np.empty(q.shape[:-1] + (3, 3))
    m[..., 0, 0] = 1 - 2 * (y * y + z * z)
    m[..., 0, 1] = 2 * (x * y - w * z)
    m[..., 0, 2] = 2 * (x * z + w * y)
    m[..., 1, 0] = 2 * (x * y + w * z)
    m[..., 1, 1] = 1 - 2 * (x * x + z * z)
    m[..., 1, 2] = 2 * (y * z - w * x)
    m[..., 2, 0] = 2 * (x * z - w * y)
    m[..., 2, 1] = 2 * (y * z + w * x)
    m[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def pose_feature_vector(params: PoseParams) -> np.ndarray:
    """Flattened R(q_j) - I entries for every non-root joint; zero at identity."""
    rots = quat_to_matrix(params.joint_rotations[1:])
    if rots.shape[0] == 0:
        return np.zeros(0)
    return (rots - np.eye(3)).reshape(-1)


def joint_world_transforms(
    parents: np.ndarray, rest_world: np.ndarray, joint_rotations: np.ndarray
) -> np.ndarray:
    """Posed world transform per joint: local rest chained with the local rotation."""
    j = parents.shape[0]
    rest_world = rest_world.astype(np.float64)
    rot = quat_to_matrix(joint_rotations)
    posed = np.empty((j, 4, 4))
    for i in range(j):
        local = np.eye(4)
        local[:3, :3] = rot[i]
        if parents[i] < 0:
            rest_local = rest_world[i]
            posed[i] = rest_local @ local
        else:
            rest_local = np.linalg.inv(rest_world[parents[i]]) @ rest_world[i]
            posed[i] = posed[parents[i]] @ rest_local @ local
    return posed


def skin_points(
    points: np.ndarray,
    lbs_weights: np.ndarray,
    parents: np.ndarray,
    rest_world: np.ndarray,
    params: PoseParams,
) -> np.ndarray:
    """LBS + global transform. Pure; linear in `points` for fixed weights/pose."""
    posed_world = joint_world_transforms(parents, rest_world, params.joint_rotations)
    skin_mats = posed_world @ np.linalg.inv(rest_world.astype(np.float64))  # (J, 4, 4)
    per_vertex = np.einsum("nj,jab->nab", lbs_weights.astype(np.float64), skin_mats)
    pts = np.asarray(points, dtype=np.float64)
    out = np.einsum("nab,nb->na", per_vertex[:, :3, :3], pts) + per_vertex[:, :3, 3]
    g = np.asarray(params.global_transform, dtype=np.float64)
    return out @ g[:3, :3].T + g[:3, 3]


def blend_vertices(
    base: np.ndarray,
    blendshape_offsets: np.ndarray,
    coeffs: np.ndarray,
    corrective_offsets: np.ndarray,
    pose_features: np.ndarray,
) -> np.ndarray:
    out = np.asarray(base, dtype=np.float64).copy()
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.shape[0] != blendshape_offsets.shape[0]:
        raise RigError(
            f"coefficient count {coeffs.shape[0]} does not match "
            f"{blendshape_offsets.shape[0]} blendshapes"
        )
    nz = np.nonzero(coeffs)[0]
    if nz.size:
        out += np.einsum("s,snk->nk", coeffs[nz], blendshape_offsets[nz].astype(np.float64))
    if corrective_offsets.shape[0]:
        if pose_features.shape[0] != corrective_offsets.shape[0]:
            raise RigError("pose feature count does not match corrective bank")
        nz = np.nonzero(pose_features)[0]
        if nz.size:
            out += np.einsum(
                "p,pnk->nk", pose_features[nz], corrective_offsets[nz].astype(np.float64)
            )
    return out


def deform(rig: RigModel, params: PoseParams) -> np.ndarray:
    """Posed vertex positions (N, 3): blendshapes + correctives, LBS, global."""
    params.validate()
    if params.joint_rotations.shape[0] != rig.n_joints:
        raise RigError(
            f"pose has {params.joint_rotations.shape[0]} joint rotations, "
            f"rig has {rig.n_joints} joints"
        )
    shaped = blend_vertices(
        rig.template_vertices,
        rig.blendshape_offsets,
        params.coeffs,
        rig.pose_corrective_offsets,
        pose_feature_vector(params),
    )
    return skin_points(shaped, rig.lbs_weights, rig.joint_parents, rig.joint_rest, params)


# ---------------------------------------------------------------------------
# mouth cavity fill

def _boundary_loop_of_mask(rig: RigModel, mask_tris: np.ndarray) -> list[int]:
    """Ordered closed loop of vertices on the mesh boundary adjacent to the mask."""
    edge_count: dict[tuple[int, int], int] = {}
    for tri in rig.triangles:
        for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
            key = (min(a, b), max(a, b))
            edge_count[key] = edge_count.get(key, 0) + 1
    boundary: set[tuple[int, int]] = set()
    for ti in mask_tris:
        tri = rig.triangles[ti]
        for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
            key = (min(a, b), max(a, b))
            if edge_count[key] == 1:
                boundary.add(key)
    if not boundary:
        raise RigError("mouth-rim mask has no boundary edges to fill")
    adj: dict[int, list[int]] = {}
    for a, b in boundary:
        adj.setdefault(int(a), []).append(int(b))
        adj.setdefault(int(b), []).append(int(a))
    for v, nbrs in adj.items():
        if len(nbrs) != 2:
            raise RigError(f"rim boundary is not a simple loop: vertex {v} has {len(nbrs)} edges")
    start = min(adj)
    loop = [start, adj[start][0]]
    while True:
        prev, cur = loop[-2], loop[-1]
        nxt = adj[cur][0] if adj[cur][0] != prev else adj[cur][1]
        if nxt == start:
            break
        loop.append(nxt)
        if len(loop) > len(adj):
            raise RigError("rim boundary does not close into a single loop")
    if len(loop) != len(adj):
        raise RigError("rim boundary contains more than one loop")
    return loop


def _project_loop_2d(points: np.ndarray) -> np.ndarray:
    """Project a near-planar loop onto its best-fit plane, returning 2D coords."""
    center = points.mean(axis=0)
    p = points - center
    _, _, vt = np.linalg.svd(p, full_matrices=False)
    return p @ vt[:2].T


def _ear_clip(poly2d: np.ndarray) -> list[tuple[int, int, int]]:
    k = poly2d.shape[0]
    idx = list(range(k))
    area2 = 0.0
    for i in range(k):
        x0, y0 = poly2d[i]
        x1, y1 = poly2d[(i + 1) % k]
        area2 += x0 * y1 - x1 * y0
    if area2 < 0:
        idx.reverse()

    def cross(a, b, c):
        return (poly2d[b, 0] - poly2d[a, 0]) * (poly2d[c, 1] - poly2d[a, 1]) - (
            poly2d[b, 1] - poly2d[a, 1]
        ) * (poly2d[c, 0] - poly2d[a, 0])

    def inside(a, b, c, p):
        d1, d2, d3 = cross(a, b, p), cross(b, c, p), cross(c, a, p)
        return d1 >= -1e-12 and d2 >= -1e-12 and d3 >= -1e-12

    tris = []
    guard = 0
    while len(idx) > 3 and guard < 4 * k * k:
        guard += 1
        clipped = False
        for i in range(len(idx)):
            a, b, c = idx[i - 1], idx[i], idx[(i + 1) % len(idx)]
            if cross(a, b, c) <= 1e-14:
                continue
            if any(inside(a, b, c, p) for p in idx if p not in (a, b, c)):
                continue
            tris.append((a, b, c))
            idx.pop(i)
            clipped = True
            break
        if not clipped:
            break
    if len(idx) == 3:
        tris.append((idx[0], idx[1], idx[2]))
        return tris
    # convex fallback: fan from vertex 0
    return [(0, i, i + 1) for i in range(1, k - 1)]


def fill_mouth_cavity(rig: RigModel, mask_name: str = "mouth-rim") -> RigModel:
    """Triangulate the mouth-rim boundary loop and append cavity triangles.

    Rim vertices are duplicated so cavity triangles carry their own UVs into
    the cavity texture; duplicated vertices copy skinning and blendshape data.
    An empty or missing rim mask is a warned no-op.
    """
    mask = rig.region_masks.get(mask_name)
    if mask is None or len(mask) == 0:
        log.warning("rig has no %r mask; mouth cavity left open", mask_name)
        return rig
    loop = _boundary_loop_of_mask(rig, np.asarray(mask))
    k = len(loop)
    loop_idx = np.asarray(loop, dtype=np.int64)

    pts = rig.template_vertices[loop_idx].astype(np.float64)
    p2 = _project_loop_2d(pts)
    lo, hi = p2.min(axis=0), p2.max(axis=0)
    uv = (p2 - lo) / np.maximum(hi - lo, 1e-12)

    n0 = rig.n_vertices
    new_ids = np.arange(n0, n0 + k, dtype=np.int32)
    tris2d = _ear_clip(p2)
    cavity_tris = np.asarray(
        [[new_ids[a], new_ids[b], new_ids[c]] for a, b, c in tris2d], dtype=np.int32
    )

    out = replace(
        rig,
        template_vertices=np.concatenate([rig.template_vertices, rig.template_vertices[loop_idx]]),
        uvs=np.concatenate([rig.uvs, uv.astype(rig.uvs.dtype)]),
        triangles=np.concatenate([rig.triangles, cavity_tris]),
        triangle_kinds=np.concatenate(
            [rig.triangle_kinds, np.full(len(cavity_tris), KIND_CAVITY, dtype=np.int32)]
        ),
        blendshape_offsets=np.concatenate(
            [rig.blendshape_offsets, rig.blendshape_offsets[:, loop_idx]], axis=1
        ),
        lbs_weights=np.concatenate([rig.lbs_weights, rig.lbs_weights[loop_idx]]),
        pose_corrective_offsets=(
            np.concatenate(
                [rig.pose_corrective_offsets, rig.pose_corrective_offsets[:, loop_idx]], axis=1
            )
            if rig.pose_corrective_offsets.shape[0]
            else rig.pose_corrective_offsets.reshape(0, n0 + k, 3)
        ),
        region_masks=dict(rig.region_masks),
        textures=dict(rig.textures),
    )
    out.validate()
    return out


# ---------------------------------------------------------------------------
# file format

def save_rig(rig: RigModel, out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    buffers = {
        "template_vertices": rig.template_vertices.astype("<f4"),
        "uvs": rig.uvs.astype("<f4"),
        "triangles": rig.triangles.astype("<i4"),
        "triangle_kinds": rig.triangle_kinds.astype("<i4"),
        "blendshape_offsets": rig.blendshape_offsets.astype("<f4"),
        "joint_parents": rig.joint_parents.astype("<i4"),
        "joint_rest": rig.joint_rest.astype("<f4"),
        "lbs_weights": rig.lbs_weights.astype("<f4"),
        "pose_corrective_offsets": rig.pose_corrective_offsets.astype("<f4"),
    }
    for name, ids in rig.region_masks.items():
        buffers[f"mask/{name}"] = np.asarray(ids, dtype="<i4")
    meta = {
        "counts": {
            "vertices": rig.n_vertices,
            "triangles": rig.n_triangles,
            "shape_blendshapes": rig.n_shape,
            "expr_blendshapes": rig.n_expr,
            "joints": rig.n_joints,
            "pose_features": rig.pose_corrective_offsets.shape[0],
        },
        "region_masks": sorted(rig.region_masks),
        "textures": {},
    }
    for slot in TEXTURE_SLOTS:
        img = rig.textures[slot]
        fname = f"rig_{slot}.png"
        Image.fromarray(img).save(out_dir / fname)
        meta["textures"][slot] = {"file": fname, "size": [img.shape[0], img.shape[1]]}
    write_container(out_dir / "rig.json", RIG_FORMAT, RIG_VERSION, meta, buffers)
    return out_dir / "rig.json"


def load_rig(path: str | Path) -> RigModel:
    """Load and validate a rig. `path` is the rig.json file or its directory."""
    path = Path(path)
    if path.is_dir():
        path = path / "rig.json"
    if not path.exists():
        raise FileNotFoundError(f"rig manifest not found: {path}")
    manifest, buffers = read_container(path, RIG_FORMAT, RIG_VERSION)
    masks = {}
    for name in manifest.get("region_masks", []):
        key = f"mask/{name}"
        if key not in buffers:
            raise ContainerError(f"{path}: manifest names mask {name!r} but buffer is missing")
        masks[name] = buffers[key]
    textures = {}
    for slot, entry in manifest["textures"].items():
        img = np.asarray(Image.open(path.parent / entry["file"]))
        textures[slot] = img
    counts = manifest["counts"]
    rig = RigModel(
        template_vertices=buffers["template_vertices"],
        uvs=buffers["uvs"],
        triangles=buffers["triangles"],
        triangle_kinds=buffers["triangle_kinds"],
        blendshape_offsets=buffers["blendshape_offsets"],
        n_shape=counts["shape_blendshapes"],
        joint_parents=buffers["joint_parents"],
        joint_rest=buffers["joint_rest"],
        lbs_weights=buffers["lbs_weights"],
        pose_corrective_offsets=buffers["pose_corrective_offsets"],
        region_masks=masks,
        textures=textures,
    )
    rig.validate()
    return rig

"""Rigged prism lattice over marked rig regions.

A marked triangle region is midpoint-subdivided (factor 4 or 16), then
extruded along area-weighted vertex normals into a stack of up to 16 prism
layers. The extrusion is re-run on every blendshape-displaced patch so the
lattice itself carries blendshape offsets, and lattice vertices inherit the
LBS weights and pose correctives of their base vertices, so the whole stack
deforms with the rig. Lattice triangles (shell caps plus prism side faces)
are the sample surfaces for the volumetric field; hits on them are mapped
back to the canonical unit cube.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .io_util import read_container, write_container
from .rig import PoseParams, RigModel, blend_vertices, pose_feature_vector, skin_points

LATTICE_FORMAT = "havatar-lattice"
LATTICE_VERSION = 1

MAX_LAYERS = 16


class LatticeError(Exception):
    pass


@dataclass
class SubdividedPatch:
    positions: np.ndarray  # (n, 3) f8 canonical
    triangles: np.ndarray  # (m, 3) i4, local indices
    blendshape_offsets: np.ndarray  # (S, n, 3) f8
    lbs_weights: np.ndarray  # (n, J) f8
    pose_correctives: np.ndarray  # (P, n, 3) f8

    @property
    def n_vertices(self) -> int:
        return self.positions.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]


@dataclass
class PrismLattice:
    num_layers: int
    subdiv_factor: int
    height_per_layer: float
    base_triangles: np.ndarray  # (m, 3) i4 into shell-0 vertices
    shells: np.ndarray  # (L+1, n, 3) f8 canonical
    shell_blendshape_offsets: np.ndarray  # (S, L+1, n, 3) f8
    inherited_lbs: np.ndarray  # (n, J) f8, identical on every shell
    inherited_correctives: np.ndarray  # (P, n, 3) f8
    prisms: np.ndarray  # (m*L, 2) i4 rows (layer, base_triangle)
    lattice_triangles: np.ndarray  # (F, 3) i4, global ids shell*n + local
    edges: np.ndarray  # (E, 2) i4 edges of the subdivided patch
    bbox_min: np.ndarray  # (3,) canonical bounding box over all shells
    bbox_max: np.ndarray

    @property
    def shell_vertex_count(self) -> int:
        return self.shells.shape[1]

    @property
    def n_triangles(self) -> int:
        return self.lattice_triangles.shape[0]

    @property
    def all_vertices(self) -> np.ndarray:
        """Canonical shell vertices flattened shell-major, (n*(L+1), 3)."""
        return self.shells.reshape(-1, 3)

    def triangle_canonical(self) -> np.ndarray:
        """(F, 3, 3) canonical corner positions of every lattice triangle."""
        return self.all_vertices[self.lattice_triangles]


# ---------------------------------------------------------------------------
# subdivision

def _midpoint_subdivide(patch: SubdividedPatch) -> SubdividedPatch:
    midpoint: dict[tuple[int, int], int] = {}
    positions = [p for p in patch.positions]
    offs = list(np.swapaxes(patch.blendshape_offsets, 0, 1))  # per-vertex (S, 3)
    lbs = [w for w in patch.lbs_weights]
    corr = list(np.swapaxes(patch.pose_correctives, 0, 1)) if patch.pose_correctives.shape[0] else None

    def mid(a: int, b: int) -> int:
        key = (min(a, b), max(a, b))
        if key in midpoint:
            return midpoint[key]
        positions.append(0.5 * (positions[a] + positions[b]))
        offs.append(0.5 * (offs[a] + offs[b]))
        lbs.append(0.5 * (lbs[a] + lbs[b]))
        if corr is not None:
            corr.append(0.5 * (corr[a] + corr[b]))
        midpoint[key] = len(positions) - 1
        return midpoint[key]

    tris = []
    for a, b, c in patch.triangles:
        ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
        tris += [[a, ab, ca], [ab, b, bc], [ca, bc, c], [ab, bc, ca]]

    n = len(positions)
    s = patch.blendshape_offsets.shape[0]
    p = patch.pose_correctives.shape[0]
    return SubdividedPatch(
        positions=np.asarray(positions),
        triangles=np.asarray(tris, dtype=np.int32),
        blendshape_offsets=(
            np.swapaxes(np.asarray(offs), 0, 1) if s else np.zeros((0, n, 3))
        ),
        lbs_weights=np.asarray(lbs),
        pose_correctives=(
            np.swapaxes(np.asarray(corr), 0, 1) if corr is not None else np.zeros((0, n, 3))
        ),
    )


def subdivide_region(rig: RigModel, mask_name: str, factor: int) -> SubdividedPatch:
    """Extract the masked triangles as a local patch and midpoint-subdivide.

    Adjacent marked triangles share midpoint vertices, so the subdivided
    patch is watertight wherever the source region was. Midpoint attributes
    (positions, blendshape offsets, LBS weights, correctives) are averages
    of the edge endpoints.
    """
    if factor not in (4, 16):
        raise LatticeError(f"subdivision factor must be 4 or 16, got {factor}")
    mask = rig.region_masks.get(mask_name)
    if mask is None or len(mask) == 0:
        raise LatticeError(f"region mask {mask_name!r} is missing or empty")
    tri_ids = np.asarray(mask, dtype=np.int64)
    tris = rig.triangles[tri_ids]
    used = np.unique(tris)
    local = {int(g): i for i, g in enumerate(used)}
    local_tris = np.vectorize(local.get)(tris).astype(np.int32)
    s = rig.blendshape_offsets.shape[0]
    p = rig.pose_corrective_offsets.shape[0]
    patch = SubdividedPatch(
        positions=rig.template_vertices[used].astype(np.float64),
        triangles=local_tris,
        blendshape_offsets=(
            rig.blendshape_offsets[:, used].astype(np.float64)
            if s
            else np.zeros((0, used.size, 3))
        ),
        lbs_weights=rig.lbs_weights[used].astype(np.float64),
        pose_correctives=(
            rig.pose_corrective_offsets[:, used].astype(np.float64)
            if p
            else np.zeros((0, used.size, 3))
        ),
    )
    rounds = 1 if factor == 4 else 2
    for _ in range(rounds):
        patch = _midpoint_subdivide(patch)
    return patch


# ---------------------------------------------------------------------------
# extrusion

def patch_edges(triangles: np.ndarray) -> np.ndarray:
    """Unique undirected edges of a triangle patch, sorted rows, (E, 2)."""
    e = np.concatenate([triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]])
    e = np.sort(e, axis=1)
    return np.unique(e, axis=0)


def vertex_normals(positions: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Area-weighted vertex normals; raises naming any zero-area triangle."""
    v0 = positions[triangles[:, 0]]
    v1 = positions[triangles[:, 1]]
    v2 = positions[triangles[:, 2]]
    fn = np.cross(v1 - v0, v2 - v0)  # magnitude = 2 * area
    areas = np.linalg.norm(fn, axis=1)
    scale = np.abs(positions).max() + 1.0
    bad = np.nonzero(areas < 1e-14 * scale * scale)[0]
    if bad.size:
        raise LatticeError(f"degenerate patch triangle {int(bad[0])} (zero area)")
    acc = np.zeros_like(positions)
    for k in range(3):
        np.add.at(acc, triangles[:, k], fn)
    norms = np.linalg.norm(acc, axis=1)
    bad = np.nonzero(norms < 1e-14)[0]
    if bad.size:
        raise LatticeError(f"vertex {int(bad[0])}: area-weighted normal cancels to zero")
    return acc / norms[:, None]


def _extrude_shells(positions: np.ndarray, triangles: np.ndarray, n_layers: int, h: float) -> np.ndarray:
    normals = vertex_normals(positions, triangles)
    ks = np.arange(n_layers + 1, dtype=np.float64)
    return positions[None] + ks[:, None, None] * h * normals[None]


def extrude_lattice(
    patch: SubdividedPatch,
    rig: RigModel,
    n_layers: int,
    height_per_layer: float,
    subdiv_factor: int = 4,
) -> PrismLattice:
    """Build the prism lattice: shells, side faces, per-blendshape offsets.

    Shell k = base + k*h*normal. The same extrusion runs on every
    blendshape-displaced patch (normals recomputed, so extrusion follows the
    displaced surface) and the delta from the canonical shells becomes the
    lattice's own blendshape bank. Side quads of each prism are split along
    the diagonal anchored at the lowest global vertex index; shared side
    faces between stacked prisms are stored once.
    """
    if not (1 <= n_layers <= MAX_LAYERS):
        raise LatticeError(f"layer count must be in 1..{MAX_LAYERS}, got {n_layers}")
    if height_per_layer <= 0:
        raise LatticeError("height_per_layer must be positive")

    shells = _extrude_shells(patch.positions, patch.triangles, n_layers, height_per_layer)
    s = patch.blendshape_offsets.shape[0]
    n = patch.n_vertices
    banks = np.zeros((s, n_layers + 1, n, 3))
    for si in range(s):
        displaced = patch.positions + patch.blendshape_offsets[si]
        banks[si] = _extrude_shells(displaced, patch.triangles, n_layers, height_per_layer) - shells

    m = patch.n_triangles
    edges = patch_edges(patch.triangles)
    e = edges.shape[0]

    tris = np.empty((m * (n_layers + 1) + 2 * e * n_layers, 3), dtype=np.int32)
    # caps: one copy of the patch triangulation per shell
    for k in range(n_layers + 1):
        tris[k * m : (k + 1) * m] = patch.triangles + k * n
    # sides: two triangles per patch edge per layer, diagonal from the lowest
    # global vertex index (edge rows are sorted, shell k ids < shell k+1 ids,
    # so that corner is always a0 = edges[:,0] + k*n)
    cursor = m * (n_layers + 1)
    for k in range(n_layers):
        a0 = edges[:, 0] + k * n
        b0 = edges[:, 1] + k * n
        a1 = edges[:, 0] + (k + 1) * n
        b1 = edges[:, 1] + (k + 1) * n
        tris[cursor : cursor + e] = np.stack([a0, b0, b1], axis=1)
        cursor += e
        tris[cursor : cursor + e] = np.stack([a0, b1, a1], axis=1)
        cursor += e

    layers, base_tri = np.meshgrid(np.arange(n_layers), np.arange(m), indexing="ij")
    prisms = np.stack([layers.ravel(), base_tri.ravel()], axis=1).astype(np.int32)

    flat = shells.reshape(-1, 3)
    return PrismLattice(
        num_layers=n_layers,
        subdiv_factor=subdiv_factor,
        height_per_layer=float(height_per_layer),
        base_triangles=patch.triangles.astype(np.int32),
        shells=shells,
        shell_blendshape_offsets=banks,
        inherited_lbs=patch.lbs_weights,
        inherited_correctives=patch.pose_correctives,
        prisms=prisms,
        lattice_triangles=tris,
        edges=edges.astype(np.int32),
        bbox_min=flat.min(axis=0),
        bbox_max=flat.max(axis=0),
    )


def build_lattice(
    rig: RigModel,
    mask_name: str,
    factor: int,
    n_layers: int,
    height_per_layer: float | None = None,
) -> PrismLattice:
    """Subdivide + extrude in one call; default height is patch diagonal / 64."""
    patch = subdivide_region(rig, mask_name, factor)
    if height_per_layer is None:
        diag = float(np.linalg.norm(patch.positions.max(axis=0) - patch.positions.min(axis=0)))
        height_per_layer = diag / 64.0
    return extrude_lattice(patch, rig, n_layers, height_per_layer, subdiv_factor=factor)


def expected_triangle_count(n_base_tris: int, n_edges: int, n_layers: int) -> int:
    """Closed form: caps on every shell plus two triangles per edge per layer."""
    return n_base_tris * (n_layers + 1) + 2 * n_edges * n_layers


# ---------------------------------------------------------------------------
# posing and canonical mapping

def pose_lattice(lat: PrismLattice, rig: RigModel, params: PoseParams) -> np.ndarray:
    """Posed shell vertices, flat shell-major (n*(L+1), 3).

    Same evaluation path as rig deformation: blendshape sum on the shell
    banks, inherited correctives, inherited LBS, then the global transform.
    """
    params.validate()
    n_sets = lat.shells.shape[0]
    n = lat.shell_vertex_count
    flat_banks = lat.shell_blendshape_offsets.reshape(
        lat.shell_blendshape_offsets.shape[0], n_sets * n, 3
    )
    corr = (
        np.tile(lat.inherited_correctives, (1, n_sets, 1))
        if lat.inherited_correctives.shape[0]
        else np.zeros((0, n_sets * n, 3))
    )
    shaped = blend_vertices(
        lat.all_vertices, flat_banks, params.coeffs, corr, pose_feature_vector(params)
    )
    weights = np.tile(lat.inherited_lbs, (n_sets, 1))
    return skin_points(shaped, weights, rig.joint_parents, rig.joint_rest, params)


def canonical_points(lat: PrismLattice, tri_ids: np.ndarray, bary: np.ndarray) -> np.ndarray:
    """Barycentric points on canonical lattice triangles, mapped into [0,1]^3.

    Pose-invariant by construction: only (tri_id, barycentric) enter. The
    normalization box is the canonical bounding box stored at build time.
    """
    tri_ids = np.asarray(tri_ids, dtype=np.int64)
    if tri_ids.size and (tri_ids.min() < 0 or tri_ids.max() >= lat.n_triangles):
        raise LatticeError("lattice triangle id out of range")
    bary = np.asarray(bary, dtype=np.float64)
    if bary.size and np.abs(bary.sum(axis=-1) - 1.0).max() > 1e-6:
        raise LatticeError("barycentric coordinates must sum to 1")
    corners = lat.all_vertices[lat.lattice_triangles[tri_ids]]  # (B, 3, 3)
    pts = np.einsum("bk,bkc->bc", bary, corners)
    extent = np.maximum(lat.bbox_max - lat.bbox_min, 1e-12)
    return np.clip((pts - lat.bbox_min) / extent, 0.0, 1.0)


def canonical_point(lat: PrismLattice, tri_id: int, bary) -> np.ndarray:
    return canonical_points(lat, np.asarray([tri_id]), np.asarray([bary]))[0]


# ---------------------------------------------------------------------------
# cache format

def save_lattice(lat: PrismLattice, json_path: str | Path) -> None:
    meta = {
        "num_layers": lat.num_layers,
        "subdiv_factor": lat.subdiv_factor,
        "height_per_layer": lat.height_per_layer,
    }
    buffers = {
        "base_triangles": lat.base_triangles.astype("<i4"),
        "shells": lat.shells.astype("<f8"),
        "shell_blendshape_offsets": lat.shell_blendshape_offsets.astype("<f8"),
        "inherited_lbs": lat.inherited_lbs.astype("<f8"),
        "inherited_correctives": lat.inherited_correctives.astype("<f8"),
        "prisms": lat.prisms.astype("<i4"),
        "lattice_triangles": lat.lattice_triangles.astype("<i4"),
        "edges": lat.edges.astype("<i4"),
        "bbox_min": lat.bbox_min.astype("<f8"),
        "bbox_max": lat.bbox_max.astype("<f8"),
    }
    write_container(Path(json_path), LATTICE_FORMAT, LATTICE_VERSION, meta, buffers)


def load_lattice(json_path: str | Path) -> PrismLattice:
    meta, b = read_container(Path(json_path), LATTICE_FORMAT, LATTICE_VERSION)
    return PrismLattice(
        num_layers=meta["num_layers"],
        subdiv_factor=meta["subdiv_factor"],
        height_per_layer=meta["height_per_layer"],
        base_triangles=b["base_triangles"],
        shells=b["shells"],
        shell_blendshape_offsets=b["shell_blendshape_offsets"],
        inherited_lbs=b["inherited_lbs"],
        inherited_correctives=b["inherited_correctives"],
        prisms=b["prisms"],
        lattice_triangles=b["lattice_triangles"],
        edges=b["edges"],
        bbox_min=b["bbox_min"],
        bbox_max=b["bbox_max"],
    )

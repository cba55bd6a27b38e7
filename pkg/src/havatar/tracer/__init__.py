"""BVH-accelerated multi-hit ray tracing over the posed scene.

The scene is one triangle soup (posed base mesh + cavity fill + lattice)
with a kind tag per triangle. A traced ray yields every lattice hit between
t_min and the nearest base/cavity hit, sorted by t, capped at 64 entries,
with the blocking hit appended last. Raw intersection enumeration runs in a
compiled kernel when available (``havatar.tracer._kernels``) and in a pure
Python twin otherwise; set ``HAVATAR_PURE_PYTHON=1`` to force the fallback.
Ordering, duplicate suppression, termination and the hit cap are shared
numpy code so both backends have identical semantics.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from ..rig import KIND_LATTICE
from .build import Bvh, TracerError, build_bvh

if os.environ.get("HAVATAR_PURE_PYTHON", "") not in ("", "0"):
    from . import _pytrace as _impl
else:
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]
    except ImportError:  # extension not built
        from . import _pytrace as _impl  # type: ignore[no-redef]

__all__ = [
    "Bvh",
    "Hit",
    "TraceResult",
    "TracerError",
    "backend_name",
    "build_bvh",
    "trace",
    "trace_rays",
]

T_MIN_DEFAULT = 1e-4
MAX_HITS_DEFAULT = 64
MERGE_T_EPS = 1e-6


def backend_name() -> str:
    return _impl.BACKEND_NAME


@dataclass(frozen=True)
class Hit:
    t: float
    tri_id: int
    kind: int
    bary: np.ndarray  # (3,) barycentric (w0, w1, w2), w0 = 1 - u - v


@dataclass
class TraceResult:
    """CSR hit lists for a batch of rays, sorted by t within each ray."""

    ray_ptr: np.ndarray  # (R+1,) i8
    t: np.ndarray  # (H,) f8
    tri_id: np.ndarray  # (H,) i8
    kind: np.ndarray  # (H,) u8
    bary: np.ndarray  # (H, 3) f8
    truncated: np.ndarray  # (R,) bool — true when the 64-entry cap dropped hits

    @property
    def n_rays(self) -> int:
        return self.ray_ptr.shape[0] - 1

    @property
    def n_hits(self) -> int:
        return self.t.shape[0]

    def hits_for_ray(self, r: int) -> list[Hit]:
        a, b = self.ray_ptr[r], self.ray_ptr[r + 1]
        return [
            Hit(float(self.t[i]), int(self.tri_id[i]), int(self.kind[i]), self.bary[i])
            for i in range(a, b)
        ]


def trace_rays(
    bvh: Bvh,
    tri_verts: np.ndarray,
    tri_kinds: np.ndarray,
    origins: np.ndarray,
    dirs: np.ndarray,
    t_min: float = T_MIN_DEFAULT,
    max_hits: int = MAX_HITS_DEFAULT,
) -> TraceResult:
    origins = np.ascontiguousarray(origins, dtype=np.float64)
    dirs = np.ascontiguousarray(dirs, dtype=np.float64)
    if origins.ndim != 2 or origins.shape[1] != 3 or origins.shape != dirs.shape:
        raise TracerError("origins/dirs must both be (R, 3)")
    if not np.isfinite(origins).all() or not np.isfinite(dirs).all():
        raise TracerError("ray origins/directions contain NaN or inf")
    if (np.abs(dirs).max(axis=1) == 0.0).any():
        raise TracerError("ray direction is zero")
    tri_verts = np.ascontiguousarray(tri_verts, dtype=np.float64)
    tri_kinds = np.asarray(tri_kinds)

    ray_ids, t, tri, u, v = _impl.enumerate_hits(
        np.ascontiguousarray(bvh.node_min),
        np.ascontiguousarray(bvh.node_max),
        np.ascontiguousarray(bvh.node_left),
        np.ascontiguousarray(bvh.node_right),
        np.ascontiguousarray(bvh.node_count),
        np.ascontiguousarray(bvh.perm),
        tri_verts,
        origins,
        dirs,
        float(t_min),
    )
    return _postprocess(ray_ids, t, tri, u, v, tri_kinds, origins.shape[0], max_hits)


def trace(
    bvh: Bvh,
    tri_verts: np.ndarray,
    tri_kinds: np.ndarray,
    origin: np.ndarray,
    direction: np.ndarray,
    t_min: float = T_MIN_DEFAULT,
    max_hits: int = MAX_HITS_DEFAULT,
) -> list[Hit]:
    res = trace_rays(
        bvh,
        tri_verts,
        tri_kinds,
        np.asarray(origin, dtype=np.float64)[None],
        np.asarray(direction, dtype=np.float64)[None],
        t_min=t_min,
        max_hits=max_hits,
    )
    return res.hits_for_ray(0)


def _postprocess(
    ray_ids: np.ndarray,
    t: np.ndarray,
    tri: np.ndarray,
    u: np.ndarray,
    v: np.ndarray,
    tri_kinds: np.ndarray,
    n_rays: int,
    max_hits: int,
) -> TraceResult:
    """Sort, merge near-duplicates, cut at the blocking hit, apply the cap."""
    if len(ray_ids) == 0:
        return TraceResult(
            ray_ptr=np.zeros(n_rays + 1, dtype=np.int64),
            t=t,
            tri_id=tri,
            kind=np.zeros(0, dtype=np.uint8),
            bary=np.zeros((0, 3)),
            truncated=np.zeros(n_rays, dtype=bool),
        )
    order = np.lexsort((tri, t, ray_ids))
    ray_ids, t, tri, u, v = ray_ids[order], t[order], tri[order], u[order], v[order]
    kind = np.asarray(tri_kinds, dtype=np.uint8)[tri]

    # merge runs of hits with near-identical t and the same kind (shared-edge
    # double counts); within a run the lowest tri_id survives
    same_ray = ray_ids[1:] == ray_ids[:-1]
    near = (t[1:] - t[:-1]) < MERGE_T_EPS
    merge = same_ray & near & (kind[1:] == kind[:-1])
    group = np.zeros(len(t), dtype=np.int64)
    group[1:] = np.cumsum(~merge)
    sel = np.lexsort((tri, group))
    first_of_group = np.ones(len(sel), dtype=bool)
    gs = group[sel]
    first_of_group[1:] = gs[1:] != gs[:-1]
    keep = np.sort(sel[first_of_group])
    ray_ids, t, tri, u, v, kind = (
        ray_ids[keep],
        t[keep],
        tri[keep],
        u[keep],
        v[keep],
        kind[keep],
    )

    # nearest blocking (base/cavity) hit per ray bounds the lattice hits
    is_term = kind != KIND_LATTICE
    t_stop = np.full(n_rays, np.inf)
    term_slot = np.full(n_rays, -1, dtype=np.int64)
    term_idx = np.nonzero(is_term)[0]
    if term_idx.size:
        # sorted by (ray, t, tri): the first terminator per ray wins
        first = term_idx[np.unique(ray_ids[term_idx], return_index=True)[1]]
        t_stop[ray_ids[first]] = t[first]
        term_slot[ray_ids[first]] = first

    keep_lat = (~is_term) & (t < t_stop[ray_ids])
    lat_idx = np.nonzero(keep_lat)[0]
    # rank of each kept lattice hit within its ray
    ray_of_lat = ray_ids[lat_idx]
    lat_counts = np.bincount(ray_of_lat, minlength=n_rays)
    starts = np.concatenate([[0], np.cumsum(lat_counts)[:-1]])
    rank = np.arange(lat_idx.size) - starts[ray_of_lat]

    has_term = term_slot >= 0
    allowed = np.where(has_term, max_hits - 1, max_hits)
    truncated = lat_counts > allowed
    lat_idx = lat_idx[rank < allowed[ray_of_lat]]

    final_idx = np.concatenate([lat_idx, term_slot[has_term]])
    final_idx.sort()

    ray_ids, t, tri, u, v, kind = (
        ray_ids[final_idx],
        t[final_idx],
        tri[final_idx],
        u[final_idx],
        v[final_idx],
        kind[final_idx],
    )
    ray_ptr = np.zeros(n_rays + 1, dtype=np.int64)
    np.cumsum(np.bincount(ray_ids, minlength=n_rays), out=ray_ptr[1:])
    bary = np.stack([1.0 - u - v, u, v], axis=1)
    return TraceResult(
        ray_ptr=ray_ptr,
        t=t,
        tri_id=tri.astype(np.int64),
        kind=kind,
        bary=bary,
        truncated=truncated,
    )

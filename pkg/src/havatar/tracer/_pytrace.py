"""Pure-Python/numpy traversal backend.

Mirrors the compiled kernel operation for operation: the same slab test,
the same Moller-Trumbore formulation with the same epsilons, identical
floating-point expression order. It exists as the import-time fallback when
the extension is unavailable; it returns bit-identical hit sets, just
slowly. Both backends enumerate *raw* intersections; ordering, dedup,
termination and the hit cap are applied by the shared postprocess step.
"""

from __future__ import annotations

import numpy as np

DET_EPS = 1e-12
BARY_EPS = 1e-9

BACKEND_NAME = "python"


def enumerate_hits(
    node_min: np.ndarray,
    node_max: np.ndarray,
    node_left: np.ndarray,
    node_right: np.ndarray,
    node_count: np.ndarray,
    perm: np.ndarray,
    tri_verts: np.ndarray,
    origins: np.ndarray,
    dirs: np.ndarray,
    t_min: float,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """All ray-triangle intersections with t > t_min, unordered.

    Returns flat (ray_id, t, tri_id, u, v) arrays.
    """
    n_rays = origins.shape[0]
    out_ray: list[int] = []
    out_t: list[float] = []
    out_tri: list[int] = []
    out_u: list[float] = []
    out_v: list[float] = []

    v0 = tri_verts[:, 0]
    e1 = tri_verts[:, 1] - v0
    e2 = tri_verts[:, 2] - v0

    for r in range(n_rays):
        o = origins[r]
        d = dirs[r]
        stack = [0]
        leaf_tris: list[np.ndarray] = []
        while stack:
            ni = stack.pop()
            if not _slab_hit(node_min[ni], node_max[ni], o, d, t_min):
                continue
            if node_count[ni] > 0:
                s = node_right[ni]
                leaf_tris.append(perm[s : s + node_count[ni]])
            else:
                # right pushed first so the left child is visited first,
                # matching the compiled kernel's stack order
                stack.append(int(node_right[ni]))
                stack.append(int(node_left[ni]))
        if not leaf_tris:
            continue
        tris = np.concatenate(leaf_tris)
        t, u, v, ok = _moller_trumbore(v0[tris], e1[tris], e2[tris], o, d, t_min)
        for k in np.nonzero(ok)[0]:
            out_ray.append(r)
            out_t.append(float(t[k]))
            out_tri.append(int(tris[k]))
            out_u.append(float(u[k]))
            out_v.append(float(v[k]))

    return (
        np.asarray(out_ray, dtype=np.int64),
        np.asarray(out_t, dtype=np.float64),
        np.asarray(out_tri, dtype=np.int64),
        np.asarray(out_u, dtype=np.float64),
        np.asarray(out_v, dtype=np.float64),
    )


def _slab_hit(bmin, bmax, o, d, t_min: float) -> bool:
    t0 = t_min
    t1 = np.inf
    for a in range(3):
        da = d[a]
        if da != 0.0:
            ta = (bmin[a] - o[a]) / da
            tb = (bmax[a] - o[a]) / da
            if ta > tb:
                ta, tb = tb, ta
            if ta > t0:
                t0 = ta
            if tb < t1:
                t1 = tb
            if t0 > t1:
                return False
        elif o[a] < bmin[a] or o[a] > bmax[a]:
            return False
    return True


def _moller_trumbore(v0, e1, e2, o, d, t_min: float):
    """Vectorized over triangles; both facings accepted, symmetric epsilon."""
    px = d[1] * e2[:, 2] - d[2] * e2[:, 1]
    py = d[2] * e2[:, 0] - d[0] * e2[:, 2]
    pz = d[0] * e2[:, 1] - d[1] * e2[:, 0]
    det = e1[:, 0] * px + e1[:, 1] * py + e1[:, 2] * pz
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / det
        tvx, tvy, tvz = o[0] - v0[:, 0], o[1] - v0[:, 1], o[2] - v0[:, 2]
        u = (tvx * px + tvy * py + tvz * pz) * inv
        qx = tvy * e1[:, 2] - tvz * e1[:, 1]
        qy = tvz * e1[:, 0] - tvx * e1[:, 2]
        qz = tvx * e1[:, 1] - tvy * e1[:, 0]
        v = (d[0] * qx + d[1] * qy + d[2] * qz) * inv
        t = (e2[:, 0] * qx + e2[:, 1] * qy + e2[:, 2] * qz) * inv
    ok = (
        (np.abs(det) > DET_EPS)
        & (u >= -BARY_EPS)
        & (v >= -BARY_EPS)
        & (u + v <= 1.0 + BARY_EPS)
        & (t > t_min)
    )
    return t, u, v, ok

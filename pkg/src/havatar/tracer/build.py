"""Median-split BVH construction.

Rebuilt from scratch per training epoch, so build speed matters more than
traversal optimality; the split is the median along the widest centroid
axis. Construction is fully deterministic: triangle order within a node is
the stable sort by (centroid component, triangle id).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class TracerError(Exception):
    pass


@dataclass
class Bvh:
    """Flat preorder node arrays; a node is a leaf iff node_count > 0.

    Internal nodes: node_left/node_right are child node indices.
    Leaves: node_right is the first index into `perm`, node_count the
    triangle count, node_left is -1.
    """

    node_min: np.ndarray  # (M, 3) f8
    node_max: np.ndarray  # (M, 3) f8
    node_left: np.ndarray  # (M,) i4
    node_right: np.ndarray  # (M,) i4
    node_count: np.ndarray  # (M,) i4
    perm: np.ndarray  # (T,) i4 triangle ids grouped by leaf
    epoch_stamp: int = 0

    @property
    def n_nodes(self) -> int:
        return self.node_min.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.perm.shape[0]


def build_bvh(tri_verts: np.ndarray, leaf_size: int = 4, epoch_stamp: int = 0) -> Bvh:
    """Build over posed triangles given as (T, 3, 3) corner positions."""
    tri_verts = np.asarray(tri_verts, dtype=np.float64)
    if tri_verts.ndim != 3 or tri_verts.shape[1:] != (3, 3):
        raise TracerError(f"expected (T, 3, 3) triangle corners, got {tri_verts.shape}")
    n = tri_verts.shape[0]
    if n == 0:
        raise TracerError("cannot build a BVH over zero triangles")
    tmin = tri_verts.min(axis=1)  # (T, 3)
    tmax = tri_verts.max(axis=1)
    centroids = 0.5 * (tmin + tmax)

    node_min: list[np.ndarray] = []
    node_max: list[np.ndarray] = []
    node_left: list[int] = []
    node_right: list[int] = []
    node_count: list[int] = []
    perm: list[int] = []

    def emit(ids: np.ndarray) -> int:
        me = len(node_min)
        node_min.append(tmin[ids].min(axis=0))
        node_max.append(tmax[ids].max(axis=0))
        node_left.append(-1)
        node_right.append(0)
        node_count.append(0)

        make_leaf = ids.size <= leaf_size
        if not make_leaf:
            cmin = centroids[ids].min(axis=0)
            cmax = centroids[ids].max(axis=0)
            extent = cmax - cmin
            axis = int(np.argmax(extent))
            if extent[axis] <= 0.0:
                make_leaf = True  # all centroids coincide, splitting is pointless
        if make_leaf:
            node_right[me] = len(perm)
            node_count[me] = ids.size
            perm.extend(ids.tolist())
            return me

        order = np.lexsort((ids, centroids[ids, axis]))
        ids = ids[order]
        half = ids.size // 2
        node_left[me] = emit(ids[:half])
        node_right[me] = emit(ids[half:])
        return me

    # median split halves the id set every level, so recursion depth is
    # log2(n) and the default interpreter limit is never a concern
    emit(np.arange(n, dtype=np.int64))

    return Bvh(
        node_min=np.asarray(node_min),
        node_max=np.asarray(node_max),
        node_left=np.asarray(node_left, dtype=np.int32),
        node_right=np.asarray(node_right, dtype=np.int32),
        node_count=np.asarray(node_count, dtype=np.int32),
        perm=np.asarray(perm, dtype=np.int32),
        epoch_stamp=epoch_stamp,
    )

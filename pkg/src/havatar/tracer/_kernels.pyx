# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled traversal kernel.

Same slab test, same Moller-Trumbore expressions and epsilons as the pure
Python backend in _pytrace.py; the two must stay expression-for-expression
identical so their outputs match bit for bit.
"""

from libc.stdlib cimport free, malloc, realloc

import numpy as np

cimport numpy as cnp

cnp.import_array()

DET_EPS = 1e-12
BARY_EPS = 1e-9

BACKEND_NAME = "compiled"

cdef double C_DET_EPS = 1e-12
cdef double C_BARY_EPS = 1e-9

cdef int STACK_CAP = 4096


cdef struct HitBuf:
    long* ray
    double* t
    long* tri
    double* u
    double* v
    Py_ssize_t size
    Py_ssize_t cap


cdef int _grow(HitBuf* buf) except -1:
    cdef Py_ssize_t new_cap = buf.cap * 2
    buf.ray = <long*> realloc(buf.ray, new_cap * sizeof(long))
    buf.t = <double*> realloc(buf.t, new_cap * sizeof(double))
    buf.tri = <long*> realloc(buf.tri, new_cap * sizeof(long))
    buf.u = <double*> realloc(buf.u, new_cap * sizeof(double))
    buf.v = <double*> realloc(buf.v, new_cap * sizeof(double))
    if buf.ray == NULL or buf.t == NULL or buf.tri == NULL or buf.u == NULL or buf.v == NULL:
        raise MemoryError()
    buf.cap = new_cap
    return 0


cdef inline bint _slab_hit(
    const double* bmin, const double* bmax,
    const double* o, const double* d, double t_min,
) noexcept nogil:
    cdef double t0 = t_min
    cdef double t1 = 1e308 * 10.0  # +inf
    cdef double ta, tb, tmp, da
    cdef int a
    for a in range(3):
        da = d[a]
        if da != 0.0:
            ta = (bmin[a] - o[a]) / da
            tb = (bmax[a] - o[a]) / da
            if ta > tb:
                tmp = ta
                ta = tb
                tb = tmp
            if ta > t0:
                t0 = ta
            if tb < t1:
                t1 = tb
            if t0 > t1:
                return 0
        elif o[a] < bmin[a] or o[a] > bmax[a]:
            return 0
    return 1


def enumerate_hits(
    cnp.ndarray[cnp.float64_t, ndim=2] node_min,
    cnp.ndarray[cnp.float64_t, ndim=2] node_max,
    cnp.ndarray[cnp.int32_t, ndim=1] node_left,
    cnp.ndarray[cnp.int32_t, ndim=1] node_right,
    cnp.ndarray[cnp.int32_t, ndim=1] node_count,
    cnp.ndarray[cnp.int32_t, ndim=1] perm,
    cnp.ndarray[cnp.float64_t, ndim=3] tri_verts,
    cnp.ndarray[cnp.float64_t, ndim=2] origins,
    cnp.ndarray[cnp.float64_t, ndim=2] dirs,
    double t_min,
):
    """All ray-triangle intersections with t > t_min, unordered flat arrays."""
    cdef Py_ssize_t n_rays = origins.shape[0]
    cdef HitBuf buf
    buf.cap = 4 * n_rays + 1024
    buf.size = 0
    buf.ray = <long*> malloc(buf.cap * sizeof(long))
    buf.t = <double*> malloc(buf.cap * sizeof(double))
    buf.tri = <long*> malloc(buf.cap * sizeof(long))
    buf.u = <double*> malloc(buf.cap * sizeof(double))
    buf.v = <double*> malloc(buf.cap * sizeof(double))
    if buf.ray == NULL or buf.t == NULL or buf.tri == NULL or buf.u == NULL or buf.v == NULL:
        raise MemoryError()

    cdef int* stack = <int*> malloc(STACK_CAP * sizeof(int))
    if stack == NULL:
        raise MemoryError()

    cdef Py_ssize_t r, k
    cdef int sp, ni, s, cnt
    cdef long tri_id
    cdef double o0, o1, o2, d0, d1, d2
    cdef double v00, v01, v02, e10, e11, e12, e20, e21, e22
    cdef double px, py, pz, det, inv, tvx, tvy, tvz, qx, qy, qz, uu, vv, tt

    try:
        for r in range(n_rays):
            o0 = origins[r, 0]; o1 = origins[r, 1]; o2 = origins[r, 2]
            d0 = dirs[r, 0]; d1 = dirs[r, 1]; d2 = dirs[r, 2]
            sp = 0
            stack[sp] = 0
            sp += 1
            while sp > 0:
                sp -= 1
                ni = stack[sp]
                if not _slab_hit(&node_min[ni, 0], &node_max[ni, 0],
                                 &origins[r, 0], &dirs[r, 0], t_min):
                    continue
                cnt = node_count[ni]
                if cnt > 0:
                    s = node_right[ni]
                    for k in range(cnt):
                        tri_id = perm[s + k]
                        v00 = tri_verts[tri_id, 0, 0]
                        v01 = tri_verts[tri_id, 0, 1]
                        v02 = tri_verts[tri_id, 0, 2]
                        e10 = tri_verts[tri_id, 1, 0] - v00
                        e11 = tri_verts[tri_id, 1, 1] - v01
                        e12 = tri_verts[tri_id, 1, 2] - v02
                        e20 = tri_verts[tri_id, 2, 0] - v00
                        e21 = tri_verts[tri_id, 2, 1] - v01
                        e22 = tri_verts[tri_id, 2, 2] - v02
                        px = d1 * e22 - d2 * e21
                        py = d2 * e20 - d0 * e22
                        pz = d0 * e21 - d1 * e20
                        det = e10 * px + e11 * py + e12 * pz
                        if det > C_DET_EPS or det < -C_DET_EPS:
                            inv = 1.0 / det
                            tvx = o0 - v00
                            tvy = o1 - v01
                            tvz = o2 - v02
                            uu = (tvx * px + tvy * py + tvz * pz) * inv
                            if uu >= -C_BARY_EPS:
                                qx = tvy * e12 - tvz * e11
                                qy = tvz * e10 - tvx * e12
                                qz = tvx * e11 - tvy * e10
                                vv = (d0 * qx + d1 * qy + d2 * qz) * inv
                                if vv >= -C_BARY_EPS and uu + vv <= 1.0 + C_BARY_EPS:
                                    tt = (e20 * qx + e21 * qy + e22 * qz) * inv
                                    if tt > t_min:
                                        if buf.size == buf.cap:
                                            _grow(&buf)
                                        buf.ray[buf.size] = r
                                        buf.t[buf.size] = tt
                                        buf.tri[buf.size] = tri_id
                                        buf.u[buf.size] = uu
                                        buf.v[buf.size] = vv
                                        buf.size += 1
                else:
                    # right first so the left child pops first
                    stack[sp] = node_right[ni]
                    sp += 1
                    stack[sp] = node_left[ni]
                    sp += 1

        out_ray = np.empty(buf.size, dtype=np.int64)
        out_t = np.empty(buf.size, dtype=np.float64)
        out_tri = np.empty(buf.size, dtype=np.int64)
        out_u = np.empty(buf.size, dtype=np.float64)
        out_v = np.empty(buf.size, dtype=np.float64)
        cdef_copy(out_ray, out_t, out_tri, out_u, out_v, &buf)
        return out_ray, out_t, out_tri, out_u, out_v
    finally:
        free(stack)
        free(buf.ray)
        free(buf.t)
        free(buf.tri)
        free(buf.u)
        free(buf.v)


cdef void cdef_copy(
    cnp.ndarray[cnp.int64_t, ndim=1] out_ray,
    cnp.ndarray[cnp.float64_t, ndim=1] out_t,
    cnp.ndarray[cnp.int64_t, ndim=1] out_tri,
    cnp.ndarray[cnp.float64_t, ndim=1] out_u,
    cnp.ndarray[cnp.float64_t, ndim=1] out_v,
    HitBuf* buf,
):
    cdef Py_ssize_t i
    for i in range(buf.size):
        out_ray[i] = buf.ray[i]
        out_t[i] = buf.t[i]
        out_tri[i] = buf.tri[i]
        out_u[i] = buf.u[i]
        out_v[i] = buf.v[i]

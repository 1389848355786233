# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled twins of ``_kernels_py``; outputs match the numpy versions."""

import numpy as np
cimport numpy as cnp
from libc.math cimport fmin, fmax

from ._mc_tables import EDGE_AXIS, EDGE_ORIGIN, TRI_TABLE

cnp.import_array()


def composite_forward(alpha, colors, background):
    cdef double[:, ::1] a = np.ascontiguousarray(alpha, dtype=np.float64)
    cdef double[:, :, ::1] c = np.ascontiguousarray(colors, dtype=np.float64)
    cdef double[::1] bg = np.ascontiguousarray(background, dtype=np.float64)
    cdef Py_ssize_t r = a.shape[0], n = a.shape[1], i, k, ch
    out_color = np.empty((r, 3))
    out_w = np.empty((r, n))
    out_t = np.empty((r, n))
    out_rem = np.empty(r)
    cdef double[:, ::1] col = out_color
    cdef double[:, ::1] w = out_w
    cdef double[:, ::1] tr = out_t
    cdef double[::1] rem = out_rem
    cdef double T, wi, acc0, acc1, acc2
    with nogil:
        for i in range(r):
            T = 1.0
            acc0 = 0.0
            acc1 = 0.0
            acc2 = 0.0
            for k in range(n):
                tr[i, k] = T
                wi = T * a[i, k]
                w[i, k] = wi
                acc0 = acc0 + wi * c[i, k, 0]
                acc1 = acc1 + wi * c[i, k, 1]
                acc2 = acc2 + wi * c[i, k, 2]
                T = T * (1.0 - a[i, k])
            rem[i] = T
            col[i, 0] = acc0 + T * bg[0]
            col[i, 1] = acc1 + T * bg[1]
            col[i, 2] = acc2 + T * bg[2]
    return out_color, out_w, out_t, out_rem


def composite_backward(alpha, colors, background, trans, grad_color):
    cdef double[:, ::1] a = np.ascontiguousarray(alpha, dtype=np.float64)
    cdef double[:, :, ::1] c = np.ascontiguousarray(colors, dtype=np.float64)
    cdef double[::1] bg = np.ascontiguousarray(background, dtype=np.float64)
    cdef double[:, ::1] tr = np.ascontiguousarray(trans, dtype=np.float64)
    cdef double[:, ::1] g = np.ascontiguousarray(grad_color, dtype=np.float64)
    cdef Py_ssize_t r = a.shape[0], n = a.shape[1], i, k
    out_ga = np.empty((r, n))
    out_gc = np.empty((r, n, 3))
    cdef double[:, ::1] ga = out_ga
    cdef double[:, :, ::1] gc = out_gc
    cdef double b0, b1, b2, ak, wk
    with nogil:
        for i in range(r):
            b0 = bg[0]
            b1 = bg[1]
            b2 = bg[2]
            for k in range(n - 1, -1, -1):
                ak = a[i, k]
                ga[i, k] = tr[i, k] * (g[i, 0] * (c[i, k, 0] - b0)
                                       + g[i, 1] * (c[i, k, 1] - b1)
                                       + g[i, 2] * (c[i, k, 2] - b2))
                b0 = ak * c[i, k, 0] + (1.0 - ak) * b0
                b1 = ak * c[i, k, 1] + (1.0 - ak) * b1
                b2 = ak * c[i, k, 2] + (1.0 - ak) * b2
                wk = tr[i, k] * ak
                gc[i, k, 0] = wk * g[i, 0]
                gc[i, k, 1] = wk * g[i, 1]
                gc[i, k, 2] = wk * g[i, 2]
    return out_ga, out_gc


def sample_pdf(edges, weights, u):
    cdef double[:, ::1] e = np.ascontiguousarray(edges, dtype=np.float64)
    cdef double[:, ::1] w = np.ascontiguousarray(weights, dtype=np.float64)
    cdef double[:, ::1] uu = np.ascontiguousarray(u, dtype=np.float64)
    cdef Py_ssize_t r = w.shape[0], n = w.shape[1], m = uu.shape[1], i, j, k, lo, hi, mid
    out = np.empty((r, m))
    cdef double[:, ::1] o = out
    cdef double[::1] cdf = np.empty(n + 1)
    cdef double total, x, mass, frac
    cdef bint uniform
    with nogil:
        for i in range(r):
            total = 0.0
            for k in range(n):
                total = total + w[i, k]
            uniform = total <= 0.0
            if uniform:
                total = <double> n
            cdf[0] = 0.0
            x = 0.0
            for k in range(n):
                x = x + (1.0 if uniform else w[i, k])
                cdf[k + 1] = x / total
            cdf[n] = 1.0
            for j in range(m):
                x = uu[i, j]
                # last k with cdf[k] <= x
                lo = 0
                hi = n + 1
                while lo < hi:
                    mid = (lo + hi) // 2
                    if cdf[mid] <= x:
                        lo = mid + 1
                    else:
                        hi = mid
                k = lo - 1
                if k < 0:
                    k = 0
                if k > n - 1:
                    k = n - 1
                mass = (1.0 if uniform else w[i, k]) / total
                if mass > 0:
                    frac = fmin(fmax((x - cdf[k]) / mass, 0.0), 1.0)
                else:
                    frac = 0.0
                o[i, j] = e[i, k] + frac * (e[i, k + 1] - e[i, k])
    return out


def marching_cubes(values, double iso):
    cdef double[:, :, ::1] v = np.ascontiguousarray(values, dtype=np.float64)
    cdef Py_ssize_t nx = v.shape[0], ny = v.shape[1], nz = v.shape[2]
    cdef cnp.int8_t[:, ::1] tri = np.ascontiguousarray(TRI_TABLE, dtype=np.int8)
    cdef long[:, ::1] eo = np.ascontiguousarray(EDGE_ORIGIN, dtype=np.int64)
    cdef long[::1] ea = np.ascontiguousarray(EDGE_AXIS, dtype=np.int64)
    cdef int[8][3] corner
    corner[0][:] = [0, 0, 0]
    corner[1][:] = [1, 0, 0]
    corner[2][:] = [1, 1, 0]
    corner[3][:] = [0, 1, 0]
    corner[4][:] = [0, 0, 1]
    corner[5][:] = [1, 0, 1]
    corner[6][:] = [1, 1, 1]
    corner[7][:] = [0, 1, 1]
    vid_arr = np.full(nx * ny * nz * 3, -1, dtype=np.int64)
    cdef long[::1] vid = vid_arr
    cdef Py_ssize_t i, j, k, q, t, edge, gid, nverts = 0, nfaces = 0
    cdef int idx
    cdef long pi, pj, pk
    # pass 1: mark used edges, count faces
    with nogil:
        for i in range(nx - 1):
            for j in range(ny - 1):
                for k in range(nz - 1):
                    idx = 0
                    for q in range(8):
                        if v[i + corner[q][0], j + corner[q][1], k + corner[q][2]] < iso:
                            idx = idx | (1 << q)
                    if idx == 0 or idx == 255:
                        continue
                    t = 0
                    while t < 16 and tri[idx, t] >= 0:
                        edge = tri[idx, t]
                        gid = (((i + eo[edge, 0]) * ny + (j + eo[edge, 1])) * nz + (k + eo[edge, 2])) * 3 + ea[edge]
                        vid[gid] = 0
                        t = t + 1
                    nfaces = nfaces + t // 3
        for gid in range(nx * ny * nz * 3):
            if vid[gid] == 0:
                vid[gid] = nverts
                nverts = nverts + 1
            else:
                vid[gid] = -1
    verts_arr = np.empty((nverts, 3))
    faces_arr = np.empty((nfaces, 3), dtype=np.int64)
    cdef double[:, ::1] verts = verts_arr
    cdef long[:, ::1] faces = faces_arr
    cdef long base, axis
    cdef double va, vb, frac
    with nogil:
        for gid in range(nx * ny * nz * 3):
            if vid[gid] < 0:
                continue
            axis = gid % 3
            base = gid // 3
            pk = base % nz
            pj = (base // nz) % ny
            pi = base // (nz * ny)
            va = v[pi, pj, pk]
            if axis == 0:
                vb = v[pi + 1, pj, pk]
            elif axis == 1:
                vb = v[pi, pj + 1, pk]
            else:
                vb = v[pi, pj, pk + 1]
            if vb != va:
                frac = (iso - va) / (vb - va)
            else:
                frac = 0.5
            verts[vid[gid], 0] = pi + (frac if axis == 0 else 0.0)
            verts[vid[gid], 1] = pj + (frac if axis == 1 else 0.0)
            verts[vid[gid], 2] = pk + (frac if axis == 2 else 0.0)
        # pass 2: emit faces in cell order
        nfaces = 0
        for i in range(nx - 1):
            for j in range(ny - 1):
                for k in range(nz - 1):
                    idx = 0
                    for q in range(8):
                        if v[i + corner[q][0], j + corner[q][1], k + corner[q][2]] < iso:
                            idx = idx | (1 << q)
                    if idx == 0 or idx == 255:
                        continue
                    t = 0
                    while t < 16 and tri[idx, t] >= 0:
                        edge = tri[idx, t]
                        gid = (((i + eo[edge, 0]) * ny + (j + eo[edge, 1])) * nz + (k + eo[edge, 2])) * 3 + ea[edge]
                        faces[nfaces + t // 3, t % 3] = vid[gid]
                        t = t + 1
                    nfaces = nfaces + t // 3
    return verts_arr, faces_arr

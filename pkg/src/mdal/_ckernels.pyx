# cython: language_level=3, boundscheck=False, wraparound=False, initializedcheck=False, cdivision=True
"""Compiled kernels; same contracts and accumulation order as _pykernels."""
import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY

cnp.import_array()

cdef cnp.int64_t INF_SQ = np.iinfo(np.int64).max


def im2col3(const double[:, :, ::1] x):
    cdef Py_ssize_t c = x.shape[0], h = x.shape[1], w = x.shape[2]
    out = np.zeros((c * 9, h * w))
    cdef double[:, ::1] o = out
    cdef Py_ssize_t ch, u, v, i, j, yy, xx, row
    for ch in range(c):
        for u in range(3):
            for v in range(3):
                row = ch * 9 + u * 3 + v
                for i in range(h):
                    yy = i + u - 1
                    if yy < 0 or yy >= h:
                        continue
                    for j in range(w):
                        xx = j + v - 1
                        if 0 <= xx < w:
                            o[row, i * w + j] = x[ch, yy, xx]
    return out


def col2im3(cols, Py_ssize_t c, Py_ssize_t h, Py_ssize_t w):
    cdef const double[:, ::1] cl = np.ascontiguousarray(cols, dtype=np.float64).reshape(c * 9, h * w)
    xp_arr = np.zeros((c, h + 2, w + 2))
    cdef double[:, :, ::1] xp = xp_arr
    cdef Py_ssize_t ch, u, v, i, j, row
    for u in range(3):
        for v in range(3):
            for ch in range(c):
                row = ch * 9 + u * 3 + v
                for i in range(h):
                    for j in range(w):
                        xp[ch, i + u, j + v] += cl[row, i * w + j]
    return np.ascontiguousarray(xp_arr[:, 1:h + 1, 1:w + 1])


cdef void _envelope(cnp.int64_t* f, cnp.int64_t* out, Py_ssize_t n,
                    Py_ssize_t* v, double* z) noexcept nogil:
    cdef Py_ssize_t k = -1, q, p, j
    cdef double s
    for q in range(n):
        if f[q] == INF_SQ:
            continue
        if k < 0:
            k = 0
            v[0] = q
            z[0] = -INFINITY
            z[1] = INFINITY
            continue
        p = v[k]
        s = <double>((f[q] + q * q) - (f[p] + p * p)) / (2.0 * (q - p))
        while s <= z[k]:
            k -= 1
            p = v[k]
            s = <double>((f[q] + q * q) - (f[p] + p * p)) / (2.0 * (q - p))
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = INFINITY
    if k < 0:
        for q in range(n):
            out[q] = INF_SQ
        return
    j = 0
    for q in range(n):
        while z[j + 1] < q:
            j += 1
        p = v[j]
        out[q] = (q - p) * (q - p) + f[p]


def edt_sq(mask):
    m_arr = np.ascontiguousarray(mask, dtype=np.uint8)
    cdef const cnp.uint8_t[:, ::1] m = m_arr
    cdef Py_ssize_t h = m.shape[0], w = m.shape[1], x, y, n
    cdef cnp.int64_t d
    col_arr = np.full((h, w), INF_SQ, dtype=np.int64)
    out_arr = np.empty((h, w), dtype=np.int64)
    cdef cnp.int64_t[:, ::1] col = col_arr
    cdef cnp.int64_t[:, ::1] out = out_arr
    for x in range(w):
        d = -1
        for y in range(h):
            if m[y, x]:
                d = 0
            elif d >= 0:
                d += 1
            if d >= 0:
                col[y, x] = d * d
        d = -1
        for y in range(h - 1, -1, -1):
            if m[y, x]:
                d = 0
            elif d >= 0:
                d += 1
            if d >= 0 and d * d < col[y, x]:
                col[y, x] = d * d
    n = w
    v_arr = np.empty(n, dtype=np.intp)
    z_arr = np.empty(n + 1, dtype=np.float64)
    cdef Py_ssize_t[::1] vv = v_arr
    cdef double[::1] zz = z_arr
    for y in range(h):
        _envelope(&col[y, 0], &out[y, 0], w, &vv[0], &zz[0])
    return out_arr

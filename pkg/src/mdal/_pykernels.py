"""Pure-Python/numpy reference kernels.

These mirror ``_ckernels.pyx`` operation for operation, including the order
of floating-point accumulation, so both backends give bitwise-equal results.
"""
from __future__ import annotations

import numpy as np

INF_SQ = np.iinfo(np.int64).max


def im2col3(x: np.ndarray) -> np.ndarray:
    """(C, H, W) -> (C*9, H*W) patch matrix of a zero-padded 3x3 window."""
    c, h, w = x.shape
    xp = np.zeros((c, h + 2, w + 2))
    xp[:, 1:h + 1, 1:w + 1] = x
    cols = np.empty((c, 3, 3, h, w))
    for u in range(3):
        for v in range(3):
            cols[:, u, v] = xp[:, u:u + h, v:v + w]
    return cols.reshape(c * 9, h * w)


def col2im3(cols: np.ndarray, c: int, h: int, w: int) -> np.ndarray:
    """Adjoint of :func:`im2col3`."""
    cols = cols.reshape(c, 3, 3, h, w)
    xp = np.zeros((c, h + 2, w + 2))
    for u in range(3):
        for v in range(3):
            xp[:, u:u + h, v:v + w] += cols[:, u, v]
    return np.ascontiguousarray(xp[:, 1:h + 1, 1:w + 1])


def _envelope_1d(f: list[int], n: int) -> list[int]:
    # Felzenszwalb-Huttenlocher lower envelope over the finite samples only
    inf = INF_SQ
    v = [0] * n
    z = [0.0] * (n + 1)
    k = -1
    for q in range(n):
        fq = f[q]
        if fq == inf:
            continue
        if k < 0:
            k = 0
            v[0] = q
            z[0] = -np.inf
            z[1] = np.inf
            continue
        p = v[k]
        s = ((fq + q * q) - (f[p] + p * p)) / (2.0 * (q - p))
        while s <= z[k]:
            k -= 1
            p = v[k]
            s = ((fq + q * q) - (f[p] + p * p)) / (2.0 * (q - p))
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = np.inf
    if k < 0:
        return [inf] * n
    out = [0] * n
    j = 0
    for q in range(n):
        while z[j + 1] < q:
            j += 1
        p = v[j]
        out[q] = (q - p) * (q - p) + f[p]
    return out


def edt_sq(mask: np.ndarray) -> np.ndarray:
    """Exact squared Euclidean distance to the nearest nonzero pixel.

    Pixels of an all-zero mask get ``INF_SQ``.
    """
    m = np.asarray(mask, dtype=bool)
    h, w = m.shape
    inf = INF_SQ
    col = [[inf] * w for _ in range(h)]
    rows = m.tolist()
    for x in range(w):
        d = None
        for y in range(h):
            if rows[y][x]:
                d = 0
            elif d is not None:
                d += 1
            if d is not None:
                col[y][x] = d * d
        d = None
        for y in range(h - 1, -1, -1):
            if rows[y][x]:
                d = 0
            elif d is not None:
                d += 1
            if d is not None and d * d < col[y][x]:
                col[y][x] = d * d
    out = np.empty((h, w), dtype=np.int64)
    for y in range(h):
        out[y] = _envelope_1d(col[y], w)
    return out

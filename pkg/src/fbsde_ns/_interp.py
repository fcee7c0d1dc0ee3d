"""Numba kernels for periodic multilinear interpolation on flattened tables.

A table has shape ``(ncomp, n**d)`` in C order; point coordinates are in
physical units with spacing ``h``.
"""

import numba as nb
import numpy as np


@nb.njit(cache=True, inline="always")
def corner_weights(x, n, h, idx, wts):
    """Fill the ``2**d`` flat indices and weights of the cell containing ``x``.

    ``x`` must already lie in ``[0, n*h)``.
    """
    d = x.shape[0]
    idx[0] = 0
    wts[0] = 1.0
    filled = 1
    for ax in range(d):
        s = x[ax] / h
        i0 = int(s)
        f = s - i0
        if i0 >= n:
            i0 -= n
        i1 = i0 + 1
        if i1 == n:
            i1 = 0
        # corners so far get axis index i0 (low half) or i1 (high half)
        for c in range(filled):
            base = idx[c] * n
            w = wts[c]
            idx[c + filled] = base + i1
            wts[c + filled] = w * f
            idx[c] = base + i0
            wts[c] = w * (1.0 - f)
        filled *= 2


@nb.njit(cache=True)
def multilinear_eval(table, pts, n, h):
    ncomp = table.shape[0]
    npts, d = pts.shape
    out = np.empty((npts, ncomp))
    idx = np.empty(1 << d, dtype=np.int64)
    wts = np.empty(1 << d)
    x = np.empty(d)
    L = n * h
    for p in range(npts):
        for a in range(d):
            y = pts[p, a] % L
            x[a] = 0.0 if y >= L else y
        corner_weights(x, n, h, idx, wts)
        for c in range(ncomp):
            acc = 0.0
            for k in range(1 << d):
                acc += wts[k] * table[c, idx[k]]
            out[p, c] = acc
    return out

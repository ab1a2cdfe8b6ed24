# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops for the auction and the grid welfare search."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def auction(const double[::1] bids, const double[::1] wealth, bint vickrey):
    """Cap bids by wealth (floored at zero), pick the highest, lowest index on ties.

    Returns ``(winner, price)``; price is the winning capped bid, or the
    second-highest capped bid when ``vickrey`` is set.
    """
    cdef Py_ssize_t n = bids.shape[0]
    cdef Py_ssize_t i, best = 0
    cdef double b, top = -1.0, second = -1.0
    if n == 0:
        raise ValueError("auction over an empty population")
    with nogil:
        for i in range(n):
            b = bids[i]
            if b > wealth[i]:
                b = wealth[i]
            if b < 0.0:
                b = 0.0
            if b > top:
                second = top
                top = b
                best = i
            elif b > second:
                second = b
    if vickrey:
        return best, (second if second > 0.0 else 0.0)
    return best, top


def cap_bids(const double[::1] bids, const double[::1] wealth):
    cdef Py_ssize_t n = bids.shape[0]
    cdef Py_ssize_t i
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    cdef double b
    with nogil:
        for i in range(n):
            b = bids[i]
            if b > wealth[i]:
                b = wealth[i]
            if b < 0.0:
                b = 0.0
            o[i] = b
    return out


def maxplus_merge(const double[::1] prev, const double[::1] values, shape):
    """One stage of the welfare recursion on a flattened C-order grid.

    ``out[r] = max_{x <= r} values[x] + prev[r - x]`` with componentwise
    ``<=``; ``arg[r]`` is the flat index of the maximizing ``x`` (first found
    in C order on ties).
    """
    dims = [int(k) for k in shape]
    cdef Py_ssize_t ndim = len(dims)
    cdef Py_ssize_t size = prev.shape[0]
    cdef Py_ssize_t[3] shp
    cdef Py_ssize_t[3] stride
    cdef Py_ssize_t d, r, x0, x1, x2, r0, r1, r2, xi, ri
    cdef double best, cand
    if ndim < 1 or ndim > 3:
        raise ValueError("grid must have 1 to 3 dimensions")
    if values.shape[0] != size or size != int(np.prod(dims)):
        raise ValueError("grid arrays do not match the shape")
    for d in range(3):
        shp[d] = 1
    for d in range(ndim):
        shp[3 - ndim + d] = dims[d]
    stride[2] = 1
    stride[1] = shp[2]
    stride[0] = shp[1] * shp[2]
    out = np.empty(size, dtype=np.float64)
    arg = np.empty(size, dtype=np.intp)
    cdef double[::1] o = out
    cdef Py_ssize_t[::1] a = arg
    with nogil:
        for r0 in range(shp[0]):
            for r1 in range(shp[1]):
                for r2 in range(shp[2]):
                    ri = r0 * stride[0] + r1 * stride[1] + r2
                    best = -1e300
                    xi = 0
                    for x0 in range(r0 + 1):
                        for x1 in range(r1 + 1):
                            for x2 in range(r2 + 1):
                                cand = values[x0 * stride[0] + x1 * stride[1] + x2] + \
                                    prev[(r0 - x0) * stride[0] + (r1 - x1) * stride[1] + (r2 - x2)]
                                if cand > best:
                                    best = cand
                                    xi = x0 * stride[0] + x1 * stride[1] + x2
                    o[ri] = best
                    a[ri] = xi
    return out, arg

"""Pure-Python/numpy versions of the compiled kernels.

Semantics match ``_kernels.pyx`` exactly, tie-breaks included.
"""

import itertools

import numpy as np


def auction(bids, wealth, vickrey):
    bids = np.asarray(bids, dtype=np.float64)
    if bids.size == 0:
        raise ValueError("auction over an empty population")
    capped = cap_bids(bids, wealth)
    best = int(np.argmax(capped))  # first occurrence == lowest id
    top = float(capped[best])
    if not vickrey:
        return best, top
    if capped.size == 1:
        return best, 0.0
    rest = np.delete(capped, best)
    return best, float(rest.max())


def cap_bids(bids, wealth):
    return np.maximum(np.minimum(np.asarray(bids, dtype=np.float64), wealth), 0.0)


def maxplus_merge(prev, values, shape):
    shape = tuple(int(s) for s in shape)
    prev = np.asarray(prev, dtype=np.float64).reshape(shape)
    values = np.asarray(values, dtype=np.float64).reshape(shape)
    out = np.full(shape, -1e300)
    arg = np.zeros(shape, dtype=np.intp)
    # iterate over x in C order so the first strict improvement wins, as in C
    for x in itertools.product(*(range(s) for s in shape)):
        dst = tuple(slice(xi, None) for xi in x)
        src = tuple(slice(0, s - xi) for s, xi in zip(shape, x))
        cand = values[x] + prev[src]
        view = out[dst]
        better = cand > view
        view[better] = cand[better]
        arg[dst][better] = np.ravel_multi_index(x, shape)
    return out.ravel(), arg.ravel()

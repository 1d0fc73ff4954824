"""Finite-difference oracle shared by the gradient tests."""

import numpy as np

EPS = 1e-5
TOL = 1e-4


def numerical_gradients(f, arrays, eps=EPS, coords=None):
    """Central differences of scalar ``f(*arrays)`` w.r.t. every element of every array.

    ``coords`` optionally restricts each array to a list of flat indices; the
    returned gradients are then NaN elsewhere.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    grads = []
    for k, a in enumerate(arrays):
        g = np.full(a.shape, np.nan)
        flat = a.reshape(-1)
        gflat = g.reshape(-1)
        idx = range(flat.size) if coords is None else coords[k]
        for i in idx:
            old = flat[i]
            flat[i] = old + eps
            fp = float(f(*arrays))
            flat[i] = old - eps
            fm = float(f(*arrays))
            flat[i] = old
            gflat[i] = (fp - fm) / (2 * eps)
        grads.append(g)
    return grads


def max_relative_error(analytic, numeric, floor=1e-6):
    """Max over elements of |a - n| / max(|a|, |n|, floor); NaN entries of ``numeric`` are skipped."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    keep = ~np.isnan(n)
    a, n = a[keep], n[keep]
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))

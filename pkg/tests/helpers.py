"""Shared test oracles: central finite differences and rigid motions."""

import numpy as np


def fd_gradient(f, x, h=1e-5):
    """Central finite differences of a scalar function at x, one entry at a time."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def max_rel_err(analytic, numeric, floor=1e-6):
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def random_rotation(rng, allow_reflection=True):
    """Random orthogonal 3x3 matrix; half the draws are reflections when allowed."""
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if allow_reflection:
        if rng.random() < 0.5:
            q[:, 0] = -q[:, 0]
    elif np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q

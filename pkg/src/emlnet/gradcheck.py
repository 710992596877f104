"""Central finite differences for checking analytic gradients."""

import numpy as np


def numerical_grad(f, x, h=1e-5):
    """Central-difference gradient of scalar ``f`` at ``x`` (any shape)."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        g[i] = (fp - fm) / (2 * h)
    return grad


def max_rel_error(analytic, numeric, small=1e-8):
    """Largest relative error, and largest absolute error on tiny entries.

    Coordinates where ``|analytic| < small`` are compared absolutely and
    reported separately, since a relative error is meaningless there.
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    big = np.abs(a) >= small
    rel = 0.0
    if big.any():
        rel = float(np.max(np.abs(a[big] - n[big]) / np.maximum(np.abs(a[big]), np.abs(n[big]))))
    absolute = 0.0
    if (~big).any():
        absolute = float(np.max(np.abs(a[~big] - n[~big])))
    return rel, absolute


def check_grad(f, x, analytic, h=1e-5, rtol=1e-4, atol=1e-7):
    """True when ``analytic`` matches central differences of ``f`` at ``x``."""
    rel, absolute = max_rel_error(analytic, numerical_grad(f, x, h))
    return rel < rtol and absolute < atol

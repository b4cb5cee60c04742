"""Central finite-difference gradient checking."""

import numpy as np


def numeric_gradient(f, x, eps=1e-5, mask=None):
    """Central differences of scalar f at x (x is perturbed in place, then restored).

    With ``mask`` only those coordinates are evaluated; the rest stay zero.
    """
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    idx = range(flat.size) if mask is None else np.flatnonzero(mask)
    for i in idx:
        old = flat[i]
        flat[i] = old + eps
        fp = f(x)
        flat[i] = old - eps
        fm = f(x)
        flat[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return grad


def relative_error(analytic, numeric, floor=1e-8):
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return np.abs(a - n) / denom


def finite_diff_check(f, point, analytic, eps=1e-5, mask=None, floor=1e-8):
    """Max relative error between ``analytic`` and central differences of f at point.

    ``mask`` (same shape as point) restricts the check, e.g. away from kinks.
    ``floor`` bounds the denominator; raise it to the round-off of the
    difference quotient (about 1e-16 |f| / eps) when f is large.
    """
    num = numeric_gradient(f, point, eps, mask)
    err = relative_error(analytic, num, floor)
    if mask is not None:
        err = err[mask]
    return float(err.max()) if err.size else 0.0

"""Shared helpers for the test suite: tolerances and finite differences."""

import numpy as np


def rel_err(a, b):
    """Max relative error with a small absolute floor."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-10)
    return float(np.max(np.abs(a - b) / scale))


def assert_close(a, b, rtol, atol=0.0, msg=""):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    err = np.abs(a - b) - (rtol * np.maximum(np.abs(a), np.abs(b)) + atol)
    if np.any(err > 0):
        worst = float(np.max(err))
        raise AssertionError(f"arrays differ beyond tolerance ({worst:.3e} over) {msg}")


def fd_directional(f, x, d, h=1e-4):
    """Central first and second directional differences of a vector map."""
    x = np.asarray(x, dtype=float)
    d = np.asarray(d, dtype=float)
    fp = f(x + h * d)
    fm = f(x - h * d)
    f0 = f(x)
    d1 = (fp - fm) / (2.0 * h)
    d2 = (fp - 2.0 * f0 + fm) / (h * h)
    return d1, d2


def fd_param_grad(objective, params_arrays, h=1e-5):
    """Central finite-difference gradient over a list of parameter arrays.

    ``objective`` takes the list of arrays and returns a float; arrays are
    perturbed in place entry by entry.
    """
    grads = [np.zeros_like(a) for a in params_arrays]
    for a, g in zip(params_arrays, grads):
        flat = a.ravel()
        gflat = g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = objective(params_arrays)
            flat[i] = orig - h
            fm = objective(params_arrays)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
    return grads

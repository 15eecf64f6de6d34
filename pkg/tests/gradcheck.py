"""Central finite differences over every element of a parameter map."""

import numpy as np

FLOOR = 1e-6


def relative_error(analytic, numeric, floor=FLOOR):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def finite_difference(losses, params, h=1e-5, names=None):
    """Numerical gradients of several scalar losses at once.

    ``losses(params)`` returns a tuple of floats; the result maps each loss
    index to a gradient map. Parameters are perturbed in place and restored.
    """
    names = sorted(params) if names is None else names
    n_out = len(losses(params))
    out = [{k: np.zeros_like(params[k]) for k in names} for _ in range(n_out)]
    for k in names:
        w = params[k]
        for idx in np.ndindex(w.shape):
            old = w[idx]
            w[idx] = old + h
            plus = losses(params)
            w[idx] = old - h
            minus = losses(params)
            w[idx] = old
            for j in range(n_out):
                out[j][k][idx] = (plus[j] - minus[j]) / (2 * h)
    return out


def max_relative_error(analytic, numeric, floor=FLOOR):
    worst, where = 0.0, None
    for k in numeric:
        a, n = analytic[k], numeric[k]
        err = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        i = np.unravel_index(np.argmax(err), err.shape) if err.size else None
        if err.size and err[i] > worst:
            worst, where = float(err[i]), (k, i)
    return worst, where

"""Fused in-place Adam update over flat parameter vectors."""

import math

import numpy as np

from .._accel import njit, numba_enabled


@njit
def _adam_nb(params, g, m, v, g_scale, lr, b1, b2, eps, bc1, bc2):
    n = params.shape[0]
    for i in range(n):
        if not math.isfinite(g[i]):
            return False
    for i in range(n):
        gi = g[i] * g_scale
        mi = b1 * m[i] + (1.0 - b1) * gi
        vi = b2 * v[i] + (1.0 - b2) * gi * gi
        m[i] = mi
        v[i] = vi
        params[i] -= lr * (mi / bc1) / (math.sqrt(vi / bc2) + eps)
    return True


def _adam_np(params, g, m, v, g_scale, lr, b1, b2, eps, bc1, bc2):
    if not np.all(np.isfinite(g)):
        return False
    gs = g * g_scale
    m *= b1
    m += (1.0 - b1) * gs
    v *= b2
    v += (1.0 - b2) * gs * gs
    params -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return True


def adam_update(params, g, m, v, g_scale, lr, b1, b2, eps, t):
    """Step ``t`` (1-based) of Adam on ``g * g_scale``, updating ``params``, ``m``, ``v`` in place.

    Returns False, touching nothing, when ``g`` holds a non-finite value.
    """
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    fn = _adam_nb if numba_enabled() else _adam_np
    return bool(fn(params, g, m, v, float(g_scale), float(lr), float(b1), float(b2),
                   float(eps), bc1, bc2))

"""Compiled inner loops: long matrix products, Prüfer angle sums, Sturm counts."""
import math

import numpy as np
from numba import njit

RENORM_EVERY = 32


@njit(cache=True, nogil=True)
def _renorm(m00, m01, m10, m11, scale):
    big = max(abs(m00), abs(m01), abs(m10), abs(m11))
    if big > 0.0:
        e = math.frexp(big)[1]
        f = math.ldexp(1.0, -e)
        m00 *= f
        m01 *= f
        m10 *= f
        m11 *= f
        scale += e
    return m00, m01, m10, m11, scale


@njit(cache=True, nogil=True)
def chain_product(mats, m, scale):
    """Left-multiply the 2x2 state m (times 2**scale) by mats[0], mats[1], ... in order."""
    m00, m01, m10, m11 = m[0, 0], m[0, 1], m[1, 0], m[1, 1]
    for j in range(mats.shape[0]):
        a, b, c, d = mats[j, 0, 0], mats[j, 0, 1], mats[j, 1, 0], mats[j, 1, 1]
        m00, m01, m10, m11 = (a * m00 + b * m10, a * m01 + b * m11,
                              c * m00 + d * m10, c * m01 + d * m11)
        if (j + 1) % RENORM_EVERY == 0:
            m00, m01, m10, m11, scale = _renorm(m00, m01, m10, m11, scale)
    m00, m01, m10, m11, scale = _renorm(m00, m01, m10, m11, scale)
    out = np.empty((2, 2))
    out[0, 0], out[0, 1], out[1, 0], out[1, 1] = m00, m01, m10, m11
    return out, scale


@njit(cache=True, nogil=True)
def schrodinger_product(vs, energy, m, scale):
    """Same as chain_product for the matrices [[E - v_j, -1], [1, 0]]."""
    m00, m01, m10, m11 = m[0, 0], m[0, 1], m[1, 0], m[1, 1]
    for j in range(vs.shape[0]):
        a = energy - vs[j]
        m00, m01, m10, m11 = a * m00 - m10, a * m01 - m11, m00, m01
        if (j + 1) % RENORM_EVERY == 0:
            m00, m01, m10, m11, scale = _renorm(m00, m01, m10, m11, scale)
    m00, m01, m10, m11, scale = _renorm(m00, m01, m10, m11, scale)
    out = np.empty((2, 2))
    out[0, 0], out[0, 1], out[1, 0], out[1, 1] = m00, m01, m10, m11
    return out, scale


@njit(cache=True, nogil=True)
def schrodinger_prufer(vs, energy, v0, v1):
    """Sum of lifted angle increments for the Schrödinger map.

    The image of a vector with positive first entry lies in the upper half
    plane, so every increment lies in [-pi/2, 3pi/2).
    """
    total = 0.0
    a0, a1 = v0, v1
    for j in range(vs.shape[0]):
        b0 = (energy - vs[j]) * a0 - a1
        b1 = a0
        inc = math.atan2(a0 * b1 - a1 * b0, a0 * b0 + a1 * b1)
        if inc < -0.5 * math.pi:
            inc += 2.0 * math.pi
        total += inc
        r = math.hypot(b0, b1)
        a0, a1 = b0 / r, b1 / r
    return total, a0, a1


@njit(cache=True, nogil=True)
def general_prufer(mats, polar, v0, v1):
    """Lifted angle increments for a sequence of SL(2,R) matrices.

    polar[j] is the continuously lifted rotation angle of the polar factor
    of mats[j]; the symmetric factor moves any vector by less than pi/2.
    """
    total = 0.0
    a0, a1 = v0, v1
    for j in range(mats.shape[0]):
        b0 = mats[j, 0, 0] * a0 + mats[j, 0, 1] * a1
        b1 = mats[j, 1, 0] * a0 + mats[j, 1, 1] * a1
        raw = math.atan2(b1, b0) - math.atan2(a1, a0) - polar[j]
        raw = raw - 2.0 * math.pi * math.floor((raw + math.pi) / (2.0 * math.pi))
        total += polar[j] + raw
        r = math.hypot(b0, b1)
        a0, a1 = b0 / r, b1 / r
    return total, a0, a1


@njit(cache=True, nogil=True)
def sturm_counts(diag, energies):
    """Number of eigenvalues below each energy for tridiagonal matrices with unit off-diagonal.

    diag has shape (samples, n); returns counts of shape (samples, len(energies)).
    """
    ns, n = diag.shape
    ne = energies.shape[0]
    out = np.zeros((ns, ne), dtype=np.int64)
    for s in range(ns):
        for e in range(ne):
            q = 1.0
            cnt = 0
            for i in range(n):
                if i == 0:
                    q = diag[s, i] - energies[e]
                else:
                    q = diag[s, i] - energies[e] - 1.0 / q
                if q == 0.0:
                    q = -1e-300
                if q < 0.0:
                    cnt += 1
            out[s, e] = cnt
    return out

"""Numba-jitted kernels; same closed-square supercover semantics as the
numpy fallback, expressed as scalar loops with early exit."""

from __future__ import annotations

import math

import numpy as np
from numba import njit


@njit(cache=True)
def _cell_hit(r0, c0, r1, c1, i, j):
    tmin = 0.0
    tmax = 1.0
    # row slab
    d = r1 - r0
    lo = (i - 0.5) - r0
    hi = (i + 0.5) - r0
    if d == 0.0:
        if lo > 0.0 or hi < 0.0:
            return False
    else:
        t1 = lo / d
        t2 = hi / d
        if t1 > t2:
            t1, t2 = t2, t1
        if t1 > tmin:
            tmin = t1
        if t2 < tmax:
            tmax = t2
    # column slab
    d = c1 - c0
    lo = (j - 0.5) - c0
    hi = (j + 0.5) - c0
    if d == 0.0:
        if lo > 0.0 or hi < 0.0:
            return False
    else:
        t1 = lo / d
        t2 = hi / d
        if t1 > t2:
            t1, t2 = t2, t1
        if t1 > tmin:
            tmin = t1
        if t2 < tmax:
            tmax = t2
    return tmin <= tmax


@njit(cache=True)
def _supercover_impl(r0, c0, r1, c1):
    ilo = int(math.ceil(min(r0, r1) - 0.5))
    ihi = int(math.floor(max(r0, r1) + 0.5))
    jlo = int(math.ceil(min(c0, c1) - 0.5))
    jhi = int(math.floor(max(c0, c1) + 0.5))
    n_max = (ihi - ilo + 1) * (jhi - jlo + 1)
    rows = np.empty(n_max, dtype=np.int64)
    cols = np.empty(n_max, dtype=np.int64)
    n = 0
    for i in range(ilo, ihi + 1):
        for j in range(jlo, jhi + 1):
            if _cell_hit(r0, c0, r1, c1, float(i), float(j)):
                rows[n] = i
                cols[n] = j
                n += 1
    return rows[:n], cols[:n]


@njit(cache=True)
def _blocked_impl(grid, r0, c0, r1, c1, keep_a, keep_b):
    h, w = grid.shape
    ilo = max(int(math.ceil(min(r0, r1) - 0.5)), 0)
    ihi = min(int(math.floor(max(r0, r1) + 0.5)), h - 1)
    jlo = max(int(math.ceil(min(c0, c1) - 0.5)), 0)
    jhi = min(int(math.floor(max(c0, c1) + 0.5)), w - 1)
    for i in range(ilo, ihi + 1):
        for j in range(jlo, jhi + 1):
            v = grid[i, j]
            if v != 0 and v != keep_a and v != keep_b:
                if _cell_hit(r0, c0, r1, c1, float(i), float(j)):
                    return True
    return False


def supercover_pixels(r0: float, c0: float, r1: float, c1: float):
    return _supercover_impl(float(r0), float(c0), float(r1), float(c1))


def segment_blocked(grid, r0, c0, r1, c1, keep_a, keep_b) -> bool:
    return bool(
        _blocked_impl(
            np.ascontiguousarray(grid),
            float(r0),
            float(c0),
            float(r1),
            float(c1),
            int(keep_a),
            int(keep_b),
        )
    )

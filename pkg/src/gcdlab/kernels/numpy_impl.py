"""Pure-numpy fallback kernels.

Pixel (i, j) owns the closed unit square [i-0.5, i+0.5] x [j-0.5, j+0.5].
A cell belongs to the supercover of a closed segment iff the segment
intersects that closed square (slab clipping with closed comparisons, so
corner grazes and boundary-running segments include every touched cell).
"""

from __future__ import annotations

import math

import numpy as np


def _candidate_range(a: float, b: float) -> tuple[int, int]:
    lo = math.ceil(min(a, b) - 0.5)
    hi = math.floor(max(a, b) + 0.5)
    return lo, hi


def _hit_mask(r0, c0, r1, c1, I, J):
    tmin = np.zeros(I.shape)
    tmax = np.ones(I.shape)
    for p0, d, X in ((r0, r1 - r0, I), (c0, c1 - c0, J)):
        lo = (X - 0.5) - p0
        hi = (X + 0.5) - p0
        if d == 0.0:
            inside = (lo <= 0.0) & (hi >= 0.0)
            tmin = np.where(inside, tmin, 2.0)
        else:
            t1 = lo / d
            t2 = hi / d
            tmin = np.maximum(tmin, np.minimum(t1, t2))
            tmax = np.minimum(tmax, np.maximum(t1, t2))
    return tmin <= tmax


def supercover_pixels(r0: float, c0: float, r1: float, c1: float):
    """Row-major (rows, cols) arrays of all cells the closed segment touches."""
    ilo, ihi = _candidate_range(r0, r1)
    jlo, jhi = _candidate_range(c0, c1)
    ii = np.arange(ilo, ihi + 1, dtype=np.int64)
    jj = np.arange(jlo, jhi + 1, dtype=np.int64)
    I, J = np.meshgrid(ii, jj, indexing="ij")
    hit = _hit_mask(float(r0), float(c0), float(r1), float(c1), I, J)
    return I[hit], J[hit]


def segment_blocked(
    grid: np.ndarray,
    r0: float,
    c0: float,
    r1: float,
    c1: float,
    keep_a: int,
    keep_b: int,
) -> bool:
    """True if the segment's supercover touches an id not in {0, keep_a, keep_b}."""
    h, w = grid.shape
    ilo, ihi = _candidate_range(r0, r1)
    jlo, jhi = _candidate_range(c0, c1)
    ilo, ihi = max(ilo, 0), min(ihi, h - 1)
    jlo, jhi = max(jlo, 0), min(jhi, w - 1)
    if ilo > ihi or jlo > jhi:
        return False
    ii = np.arange(ilo, ihi + 1, dtype=np.int64)
    jj = np.arange(jlo, jhi + 1, dtype=np.int64)
    I, J = np.meshgrid(ii, jj, indexing="ij")
    hit = _hit_mask(float(r0), float(c0), float(r1), float(c1), I, J)
    vals = grid[ilo : ihi + 1, jlo : jhi + 1]
    blocking = (vals != 0) & (vals != keep_a) & (vals != keep_b)
    return bool(np.any(hit & blocking))

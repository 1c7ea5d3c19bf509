import numpy as np
import pytest

from gcdlab.kernels import backend_name, numba_impl, numpy_impl


BACKENDS = [("numpy", numpy_impl), ("numba", numba_impl)]


@pytest.mark.parametrize("name,impl", BACKENDS)
def test_horizontal_segment(name, impl):
    rows, cols = impl.supercover_pixels(2.0, 1.0, 2.0, 4.0)
    assert set(zip(rows.tolist(), cols.tolist())) == {(2, 1), (2, 2), (2, 3), (2, 4)}


@pytest.mark.parametrize("name,impl", BACKENDS)
def test_point_segment_single_cell(name, impl):
    rows, cols = impl.supercover_pixels(3.2, 7.4, 3.2, 7.4)
    assert list(zip(rows.tolist(), cols.tolist())) == [(3, 7)]


@pytest.mark.parametrize("name,impl", BACKENDS)
def test_exact_corner_touch_includes_all_four_cells(name, impl):
    # diagonal through the corner (0.5, 0.5) shared by cells (0,0),(0,1),(1,0),(1,1)
    rows, cols = impl.supercover_pixels(0.0, 0.0, 1.0, 1.0)
    got = set(zip(rows.tolist(), cols.tolist()))
    assert {(0, 0), (0, 1), (1, 0), (1, 1)} <= got


@pytest.mark.parametrize("name,impl", BACKENDS)
def test_boundary_running_segment_touches_both_rows(name, impl):
    rows, cols = impl.supercover_pixels(1.5, 0.0, 1.5, 2.0)
    got = set(zip(rows.tolist(), cols.tolist()))
    assert got == {(1, 0), (1, 1), (1, 2), (2, 0), (2, 1), (2, 2)}


@pytest.mark.parametrize("name,impl", BACKENDS)
def test_every_reported_cell_is_near_the_segment(name, impl):
    rng = np.random.default_rng(42)
    for _ in range(200):
        p = rng.uniform(0, 31, size=4)
        rows, cols = impl.supercover_pixels(*p)
        r0, c0, r1, c1 = p
        # distance from each cell center to the segment, Chebyshev
        dr, dc = r1 - r0, c1 - c0
        den = dr * dr + dc * dc
        for i, j in zip(rows, cols):
            t = 0.0 if den == 0 else np.clip(((i - r0) * dr + (j - c0) * dc) / den, 0, 1)
            cheb = max(abs(i - (r0 + t * dr)), abs(j - (c0 + t * dc)))
            assert cheb <= 0.71


@pytest.mark.parametrize("name,impl", BACKENDS)
def test_supercover_contains_dense_point_sampling(name, impl):
    # any cell containing a sampled segment point must be reported
    rng = np.random.default_rng(7)
    for _ in range(100):
        r0, c0, r1, c1 = rng.uniform(0, 20, size=4)
        rows, cols = impl.supercover_pixels(r0, c0, r1, c1)
        got = set(zip(rows.tolist(), cols.tolist()))
        t = np.linspace(0, 1, 500)
        rr = np.rint(r0 + t * (r1 - r0)).astype(int)
        cc = np.rint(c0 + t * (c1 - c0)).astype(int)
        assert set(zip(rr.tolist(), cc.tolist())) <= got


def test_backends_agree_on_random_segments():
    rng = np.random.default_rng(123)
    for _ in range(300):
        r0, c0, r1, c1 = rng.uniform(-3, 35, size=4)
        a = numpy_impl.supercover_pixels(r0, c0, r1, c1)
        b = numba_impl.supercover_pixels(r0, c0, r1, c1)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_backends_agree_on_blocking():
    rng = np.random.default_rng(5)
    grid = rng.integers(0, 4, size=(24, 24)).astype(np.int32)
    for _ in range(300):
        r0, c0, r1, c1 = rng.uniform(0, 23, size=4)
        a = numpy_impl.segment_blocked(grid, r0, c0, r1, c1, 1, 2)
        b = numba_impl.segment_blocked(grid, r0, c0, r1, c1, 1, 2)
        assert a == b


def test_blocking_matches_supercover_scan():
    rng = np.random.default_rng(9)
    grid = np.zeros((16, 16), dtype=np.int32)
    grid[4:7, 4:7] = 3
    grid[10:12, 2:5] = 5
    for _ in range(200):
        r0, c0, r1, c1 = rng.uniform(0, 15, size=4)
        rows, cols = numpy_impl.supercover_pixels(r0, c0, r1, c1)
        vals = grid[rows, cols]
        expect = bool(np.any((vals != 0) & (vals != 3)))
        assert numpy_impl.segment_blocked(grid, r0, c0, r1, c1, 3, 3) == expect


def test_backend_selection_flag():
    assert backend_name() in ("numpy", "numba")

"""Benchmark the numba kernels against the pure-numpy fallback.

Times the two hot geometry kernels on realistic workloads: full visibility
graph extraction over simulator masks, and raw supercover rasterization.

    python3 benchmarks/bench_kernels.py [--masks 100] [--segments 2000]
"""

import argparse
import time

import numpy as np

from gcdlab.kernels import numba_impl, numpy_impl
from gcdlab.maskgraph import compute_coms
from gcdlab.synthdata import SynthConfig, generate_sample


def bench_extraction(impl, masks, reps=1):
    t0 = time.perf_counter()
    edges = 0
    for _ in range(reps):
        for mask, coms, ids in masks:
            for a in range(len(ids)):
                ra, ca = coms[ids[a]]
                for b in range(a + 1, len(ids)):
                    rb, cb = coms[ids[b]]
                    if not impl.segment_blocked(
                        mask.grid, ra, ca, rb, cb, ids[a], ids[b]
                    ):
                        edges += 1
    return time.perf_counter() - t0, edges


def bench_supercover(impl, segments):
    t0 = time.perf_counter()
    cells = 0
    for r0, c0, r1, c1 in segments:
        rows, _ = impl.supercover_pixels(r0, c0, r1, c1)
        cells += rows.size
    return time.perf_counter() - t0, cells


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--masks", type=int, default=100)
    ap.add_argument("--segments", type=int, default=2000)
    args = ap.parse_args()

    cfg = SynthConfig()
    masks = []
    for seed in range(args.masks):
        _, mask = generate_sample(seed, cfg)
        masks.append((mask, compute_coms(mask), mask.instance_ids()))
    rng = np.random.default_rng(0)
    segments = rng.uniform(0, 31, size=(args.segments, 4))

    # warm up the JIT so compile time is not measured
    numba_impl.segment_blocked(masks[0][0].grid, 1.0, 1.0, 20.0, 20.0, 1, 2)
    numba_impl.supercover_pixels(0.0, 0.0, 10.0, 10.0)

    print(f"visibility extraction over {args.masks} masks:")
    t_np, e_np = bench_extraction(numpy_impl, masks)
    t_nb, e_nb = bench_extraction(numba_impl, masks)
    assert e_np == e_nb, "backends disagree"
    print(f"  numpy fallback : {t_np * 1000:8.1f} ms")
    print(f"  numba          : {t_nb * 1000:8.1f} ms   ({t_np / t_nb:.1f}x)")

    print(f"supercover rasterization of {args.segments} segments:")
    t_np, c_np = bench_supercover(numpy_impl, segments)
    t_nb, c_nb = bench_supercover(numba_impl, segments)
    assert c_np == c_nb, "backends disagree"
    print(f"  numpy fallback : {t_np * 1000:8.1f} ms")
    print(f"  numba          : {t_nb * 1000:8.1f} ms   ({t_np / t_nb:.1f}x)")


if __name__ == "__main__":
    main()

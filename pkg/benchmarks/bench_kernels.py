#!/usr/bin/env python3
"""Benchmark the hot kernels under both backends.

Times the multipath tracer and the per-pixel tensor build on one synthetic
scene, once with the numba JIT kernels (default) and once with the pure
Python/NumPy fallback (BEAMGRID_BACKEND=numpy). Run with no arguments to
get the comparison table; --inner is used by the subprocess workers.

    python3 benchmarks/bench_kernels.py [--rows 64] [--cols 64] [--seed 0]
"""

import argparse
import json
import os
import subprocess
import sys
import time


def run_inner(rows, cols, seed):
    from beamgrid import channel as ch
    from beamgrid import scene as sc
    from beamgrid._kernels import USE_NUMBA

    hm = sc.generate_city(rows, cols, seed=seed)
    tx = sc.place_tx(hm, seed=seed)
    cfg = sc.SceneConfig()
    codebook = ch.dft_codebook(8, 4, 4)

    # warm-up pass pays the JIT compile cost outside the timed region
    sc.trace_paths(hm, tx, cfg)

    t0 = time.perf_counter()
    chans = sc.trace_paths(hm, tx, cfg)
    t_trace = time.perf_counter() - t0

    t0 = time.perf_counter()
    tensors = sc.effective_tensor_map(chans, codebook, tx.frame)
    t_tensor = time.perf_counter() - t0

    print(json.dumps({
        "backend": "numba" if USE_NUMBA else "numpy",
        "trace_s": t_trace,
        "tensorize_s": t_tensor,
        "paths": int(chans.n_paths),
        "checksum": float(tensors.sum()),
    }))


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--rows", type=int, default=64)
    parser.add_argument("--cols", type=int, default=64)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--inner", action="store_true", help=argparse.SUPPRESS)
    args = parser.parse_args()

    if args.inner:
        run_inner(args.rows, args.cols, args.seed)
        return

    results = {}
    for backend in ("numba", "numpy"):
        env = dict(os.environ, BEAMGRID_BACKEND=backend)
        out = subprocess.run(
            [sys.executable, __file__, "--inner", "--rows", str(args.rows),
             "--cols", str(args.cols), "--seed", str(args.seed)],
            env=env, capture_output=True, text=True, check=True)
        results[backend] = json.loads(out.stdout.strip().splitlines()[-1])

    nb, np_ = results["numba"], results["numpy"]
    assert abs(nb["checksum"] - np_["checksum"]) <= 1e-9 * abs(nb["checksum"]), \
        "backends disagree on the tensor checksum"
    print(f"scene {args.rows}x{args.cols}, {nb['paths']} paths, "
          f"checksums match ({nb['checksum']:.6e})")
    print(f"{'stage':<12} {'numba':>10} {'numpy':>10} {'speedup':>9}")
    for stage, key in (("trace", "trace_s"), ("tensorize", "tensorize_s")):
        ratio = np_[key] / nb[key] if nb[key] > 0 else float("inf")
        print(f"{stage:<12} {nb[key]:>9.3f}s {np_[key]:>9.3f}s {ratio:>8.1f}x")


if __name__ == "__main__":
    main()

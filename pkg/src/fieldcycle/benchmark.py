"""Throughput benchmark: numba kernels against the pure numpy fallback.

Runs the fused synthesize + extract pipeline on identical inputs under
both backends and reports samples per second, the speedup, and whether
the outputs are bit-identical (they must be; the fallback exists so
results never depend on whether numba is installed).

    python3 -m fieldcycle.benchmark --windows 200000 --samples 5000
"""

import argparse
import hashlib
import sys
import time

import numpy as np

from .kernels import have_numba, run_pipeline, tone_tables, window_keys


def _workload(n_windows, n_samples, seed):
    keys = window_keys(seed, np.arange(n_windows, dtype=np.uint64))
    amps = 0.05 * np.exp(-np.arange(n_windows) / (0.7 * n_windows))
    phases = np.zeros(n_windows)
    return keys, amps, phases


def _run_backend(backend, keys, amps, phases, n, sigma, ct, st, m, repeat):
    out_amp = np.empty(len(keys))
    out_phase = np.empty(len(keys))
    # warm once so numba compilation never lands inside the timed region
    run_pipeline(keys[:64], amps[:64], phases[:64], n, sigma, ct, st, m,
                 out_amp[:64], out_phase[:64], backend=backend)
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        run_pipeline(keys, amps, phases, n, sigma, ct, st, m,
                     out_amp, out_phase, backend=backend)
        best = min(best, time.perf_counter() - t0)
    digest = hashlib.sha256(out_amp.tobytes() +
                            out_phase.tobytes()).hexdigest()
    return best, digest


def main(argv=None):
    ap = argparse.ArgumentParser(
        description="compare the numba and numpy pipeline backends")
    ap.add_argument("--windows", type=int, default=200_000)
    ap.add_argument("--samples", type=int, default=5000)
    ap.add_argument("--sigma", type=float, default=0.1)
    ap.add_argument("--bin", type=int, default=100,
                    help="analysis bin index (100 = 20 MHz at 1 GS/s)")
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    keys, amps, phases = _workload(args.windows, args.samples, args.seed)
    ct, st = tone_tables(args.bin, args.samples)
    total = args.windows * args.samples

    backends = ["numpy"]
    if have_numba():
        backends.insert(0, "numba")
    results = {}
    for backend in backends:
        elapsed, digest = _run_backend(backend, keys, amps, phases,
                                       args.samples, args.sigma, ct, st,
                                       args.bin, args.repeat)
        results[backend] = (elapsed, digest)
        print(f"backend={backend} seconds={elapsed:.3f} "
              f"samples_per_s={total / elapsed:.3e}")
    if len(results) == 2:
        speedup = results["numpy"][0] / results["numba"][0]
        identical = results["numpy"][1] == results["numba"][1]
        print(f"speedup={speedup:.2f} bit_identical={identical}")
        if not identical:
            return 1
    else:
        print("speedup=n/a bit_identical=n/a  # numba not installed")
    return 0


if __name__ == "__main__":
    sys.exit(main())

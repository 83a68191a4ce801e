"""Compare the compiled and pure-Python kernels.

    python benchmarks/bench_kernels.py [--samples 20000] [--pairs 20] [--repeat 3]

Prints best-of-N wall time per kernel and backend, plus the speed-up, and
checks that both backends return identical results.
"""
import argparse
import timeit

import numpy as np

from temgnet import kernels
from temgnet.sigproc import butter_sos


def bench(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--samples", type=int, default=20_000, help="samples per channel for sosfilt")
    ap.add_argument("--channels", type=int, default=12)
    ap.add_argument("--order", type=int, default=4)
    ap.add_argument("--pairs", type=int, default=20, help="n for the signed-rank count table")
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()

    backends = {"python": kernels.get_backend("python")}
    try:
        backends["cython"] = kernels.get_backend("cython")
    except ImportError:
        print("compiled kernels not available; reporting the Python fallback only")

    rng = np.random.default_rng(0)
    sos = np.ascontiguousarray(butter_sos(args.order, 500.0, 2000.0))
    x = np.ascontiguousarray(rng.standard_normal((args.channels, args.samples)))
    ranks = np.arange(2, 2 * args.pairs + 1, 2, dtype=np.int64)   # doubled ranks 1..n

    cases = {
        f"sosfilt {args.channels}x{args.samples}, {sos.shape[0]} sections":
            lambda k: k.sosfilt(sos, x, np.zeros((args.channels, sos.shape[0], 2))),
        f"signed_rank_counts n={args.pairs}":
            lambda k: k.signed_rank_counts(ranks),
    }
    print(f"{'kernel':<40} {'backend':<8} {'best (s)':>10}")
    for label, call in cases.items():
        times, outs = {}, {}
        for name, k in backends.items():
            times[name] = bench(lambda: call(k), args.repeat)
            outs[name] = call(k)
            print(f"{label:<40} {name:<8} {times[name]:>10.4f}")
        if len(times) == 2:
            same = np.array_equal(outs["python"], outs["cython"])
            print(f"{'':<40} speed-up {times['python'] / times['cython']:>8.1f}x  identical={same}")


if __name__ == "__main__":
    main()

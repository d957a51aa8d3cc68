"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--sizes 128,512,1024] [--repeat 5] [--json out.json]

Thread count of the compiled backend follows ``CORRREID_THREADS``.
"""
import argparse
import json
import sys
import timeit

import numpy as np

from corrreid import kernels


def cases(n, rng):
    a = rng.normal(size=(n, n))
    mask = kernels.python_backend.reciprocal_mask(a, 10)
    matches = (rng.random((n, n)) < 0.05).astype(np.int64)
    return {
        "topk_rows(k=10)": lambda b: b.topk_rows(a, 10),
        "reciprocal_mask(k=10)": lambda b: b.reciprocal_mask(a, 10),
        "masked_softmax": lambda b: b.masked_softmax(a, mask, -1.0),
        "ranked_matches_stats": lambda b: b.ranked_matches_stats(matches),
    }


def best_time(fn, repeat):
    fn()  # warm-up
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--sizes", default="128,512,1024")
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--json", help="also write the rows as JSON")
    args = p.parse_args(argv)
    if kernels.compiled_backend is None:
        print("compiled extension not built; nothing to compare", file=sys.stderr)
        return 1
    rng = np.random.default_rng(0)
    rows = []
    print(f"threads={kernels.num_threads()}")
    print(f"{'kernel':<24}{'N':>6}{'python ms':>12}{'cython ms':>12}{'speedup':>9}")
    for n in (int(s) for s in args.sizes.split(",")):
        for name, call in cases(n, rng).items():
            py = best_time(lambda: call(kernels.python_backend), args.repeat)
            cy = best_time(lambda: call(kernels.compiled_backend), args.repeat)
            rows.append({"kernel": name, "n": n, "python_s": py, "cython_s": cy, "speedup": py / cy})
            print(f"{name:<24}{n:>6}{py * 1e3:>12.3f}{cy * 1e3:>12.3f}{py / cy:>8.1f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"threads": kernels.num_threads(), "rows": rows}, fh, indent=2)
    return 0


if __name__ == "__main__":
    sys.exit(main())

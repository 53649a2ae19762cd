"""Compare the compiled and pure-Python kernel backends.

    python benchmarks/bench_kernels.py [--n 5000] [--repeats 3]

Prints the best-of-``repeats`` wall time of each kernel per backend and checks
that both backends return identical arrays.
"""

import argparse
import time

import numpy as np

from cgt import kernels
from cgt.graph import make_sbm_graph
from cgt.metrics import _row_keys


def best_of(fn, repeats):
    best, out = float("inf"), None
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=5000, help="graph size")
    ap.add_argument("--s", type=int, default=5)
    ap.add_argument("--L", type=int, default=2)
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    backends = kernels.available_backends()
    if "cython" not in backends:
        print("compiled backend not built; only the Python fallback is available")
    g = make_sbm_graph(args.n, 4, p_in=40 / args.n, p_out=4 / args.n, seed=args.seed)
    roots = np.arange(g.n)

    results = {}
    for name, impl in backends.items():
        t_sample, ids = best_of(lambda: impl.sample_trees(g.indptr, g.indices, roots, args.s, args.L, args.seed),
                                args.repeats)
        feats = np.where((ids >= 0)[..., None], g.features[np.maximum(ids, 0)], 0.0)
        keys = _row_keys(feats)
        t_dup, dups = best_of(lambda: impl.count_duplicates(keys, -1), args.repeats)
        results[name] = (t_sample, t_dup, ids, dups)
        print(f"{name:>7}  sample_trees {t_sample * 1e3:9.1f} ms   count_duplicates {t_dup * 1e3:9.1f} ms")

    if len(results) == 2:
        py, cy = results["python"], results["cython"]
        same = np.array_equal(py[2], cy[2]) and np.array_equal(py[3], cy[3])
        print(f"speedup  sample_trees {py[0] / cy[0]:6.1f}x   count_duplicates {py[1] / cy[1]:6.1f}x   "
              f"identical outputs: {same}")
        return 0 if same else 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())

"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--csv out.csv]

Prints one row per (kernel, size): best wall time of each backend and the
speedup. Exits with status 1 if the compiled backend is unavailable.
"""

import argparse
import csv
import sys
import time

import numpy as np

from kvevict import kernels


def best_time(fn, repeat):
    times = []
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return min(times)


def enumeration_case(n_cand_per_head, keep, seed=0):
    rng = np.random.default_rng(seed)
    n_heads, n_kv, d_h, window = 4, 2, 8, 2
    n_tok = n_cand_per_head + window
    attn = rng.dirichlet(np.ones(n_tok), size=n_heads)
    values = rng.normal(size=(n_heads, n_tok, d_h))
    w_o = rng.normal(size=(n_heads * d_h, n_heads * d_h))
    base = np.zeros((n_kv, n_tok), dtype=bool)
    base[:, -window:] = True
    ch, cp = np.nonzero(~base)
    return attn, values, w_o, base, ch.astype(np.intp), cp.astype(np.intp), keep, n_heads // n_kv


def cases():
    for per_head, keep in ((4, 4), (6, 6), (8, 8), (10, 10)):
        inst = enumeration_case(per_head, keep)
        label = f"{2 * per_head} cand, keep {keep}"
        yield "enumerate_min_loss", label, lambda m, a=inst: m.enumerate_min_loss(*a)
        bound_args = (inst[0], np.linspace(1, 2, 4), *inst[3:])
        yield "enumerate_min_bound", label, lambda m, a=bound_args: m.enumerate_min_bound(*a)
    for n in (64, 1024, 16384):
        s = np.random.default_rng(n).normal(size=n)
        yield "maxpool1d", f"n={n}, k=7", lambda m, s=s: m.maxpool1d(s, 7)


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--csv", default=None)
    args = parser.parse_args(argv)

    backends = kernels.available_backends()
    if "cython" not in backends:
        print("compiled backend not built; run `pip install -e . --no-build-isolation`", file=sys.stderr)
        return 1
    py, cy = backends["python"], backends["cython"]

    rows = []
    for kernel, label, call in cases():
        t_py = best_time(lambda: call(py), args.repeat)
        t_cy = best_time(lambda: call(cy), args.repeat)
        rows.append((kernel, label, t_py, t_cy, t_py / t_cy))
        print(f"{kernel:20s} {label:22s} python {t_py * 1e3:9.3f} ms  cython {t_cy * 1e3:9.3f} ms  x{t_py / t_cy:7.1f}")

    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["kernel", "case", "python_s", "cython_s", "speedup"])
            writer.writerows(rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())

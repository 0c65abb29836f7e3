"""Time each graph kernel under the numpy and numba backends.

Usage: python3 benchmarks/bench_kernels.py [--triplets N] [--entities M] [--repeat R]

Inputs are a synthetic PrimeKG-sized edge list (defaults: 8.1M triplets over
129k entities). The numba column excludes the first (compiling) call. Both
backends are checked for identical output before timing.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from qkg import kernels


def best_of(fn, args, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return min(times)


def same(a, b):
    if isinstance(a, tuple):
        return all(np.array_equal(x, y) for x, y in zip(a, b))
    return np.array_equal(a, b)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--triplets", type=int, default=8_100_000)
    p.add_argument("--entities", type=int, default=129_375)
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)

    rng = np.random.default_rng(args.seed)
    heads = rng.integers(0, args.entities, args.triplets, dtype=np.int64)
    tails = rng.integers(0, args.entities, args.triplets, dtype=np.int64)
    member = np.zeros(args.entities, dtype=np.bool_)
    member[rng.choice(args.entities, 735, replace=False)] = True
    indptr_out, order_out = kernels.implementations("csr_from_keys")["numpy"](heads, args.entities)
    indptr_in, order_in = kernels.implementations("csr_from_keys")["numpy"](tails, args.entities)
    hub = int(np.argmax(np.diff(indptr_out)))

    cases = {
        "csr_from_keys": (heads, args.entities),
        "endpoint_mask": (heads, tails, member),
        "both_endpoints_mask": (heads, tails, member),
        "incident_ids": (indptr_out, order_out, indptr_in, order_in, hub),
    }
    print(f"{args.triplets:,} triplets, {args.entities:,} entities, best of {args.repeat}")
    print(f"{'kernel':<22}{'numpy (ms)':>12}{'numba (ms)':>12}{'speedup':>10}")
    for name, call_args in cases.items():
        impls = kernels.implementations(name)
        t_np = best_of(impls["numpy"], call_args, args.repeat)
        if "numba" not in impls:
            print(f"{name:<22}{t_np * 1e3:>12.2f}{'n/a':>12}{'':>10}")
            continue
        if not same(impls["numpy"](*call_args), impls["numba"](*call_args)):  # also compiles
            raise SystemExit(f"{name}: backends disagree")
        t_nb = best_of(impls["numba"], call_args, args.repeat)
        print(f"{name:<22}{t_np * 1e3:>12.2f}{t_nb * 1e3:>12.2f}{t_np / t_nb:>9.1f}x")


if __name__ == "__main__":
    main()

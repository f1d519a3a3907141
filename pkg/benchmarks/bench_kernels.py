"""Compare the compiled kernels against the numpy fallback.

Run with ``python3 benchmarks/bench_kernels.py [--repeat N]``. Prints one line
per kernel with the median time for each backend and the speedup.
"""
import argparse
import timeit

import numpy as np

from attnforge._backend import available_backends


def cases(rng):
    scores = rng.standard_normal((8 * 4 * 17, 17))
    mask = np.where(rng.random((17, 17)) < 0.2, -np.inf, 0.0)
    np.fill_diagonal(mask, 0.0)
    y = available_backends()["python"].softmax_rows(scores, None)
    g = rng.standard_normal(y.shape)
    a, b = rng.standard_normal((4, 4)), rng.standard_normal((32, 32))
    h = rng.standard_normal((4, 4096))
    return {
        "softmax_rows": lambda k: k.softmax_rows(scores, None),
        "softmax_rows+mask": lambda k: k.softmax_rows(scores, mask),
        "softmax_rows_backward": lambda k: k.softmax_rows_backward(y, g),
        "logsumexp_rows": lambda k: k.logsumexp_rows(scores, 2.0),
        "kron 4x4 (x) 32x32": lambda k: k.kron(a, b),
        "fwht_rows 4x4096": lambda k: k.fwht_rows(h.copy()),
    }


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--repeat", type=int, default=7)
    p.add_argument("--number", type=int, default=200)
    args = p.parse_args(argv)
    backends = available_backends()
    if "compiled" not in backends:
        print("compiled extension not built; only the python backend is available")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<24}" + "".join(f"{name + ' (us)':>16}" for name in backends) + f"{'speedup':>10}")
    for label, fn in cases(rng).items():
        times = {}
        for name, k in backends.items():
            runs = timeit.repeat(lambda: fn(k), repeat=args.repeat, number=args.number)
            times[name] = 1e6 * float(np.median(runs)) / args.number
        speed = times["python"] / times["compiled"] if "compiled" in times else float("nan")
        print(f"{label:<24}" + "".join(f"{t:>16.2f}" for t in times.values()) + f"{speed:>9.2f}x")


if __name__ == "__main__":
    main()

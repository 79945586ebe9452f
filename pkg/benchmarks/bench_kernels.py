"""Compare the compiled and pure-numpy conv/ReLU/max-pool kernels.

    python benchmarks/bench_kernels.py [--repeat 20]

Shapes mirror training: a batch of documents (B, T, d) against one filter
bank (maps, width, d). Each row reports the median time of forward and of
forward+backward, per backend.
"""
from __future__ import annotations

import argparse
import statistics
import time

import numpy as np

from metasn.numerics import kernels

CASES = [
    # (batch, max_len, dim, maps, width)
    (30, 12, 16, 16, 3),
    (30, 12, 16, 64, 5),
    (130, 40, 50, 16, 5),
    (130, 40, 300, 16, 5),
]


def _time(fn, repeat: int) -> float:
    fn()
    samples = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    return statistics.median(samples)


def bench_case(batch, max_len, dim, maps, width, backend, repeat, rng):
    x = rng.standard_normal((batch, max_len, dim))
    lengths = rng.integers(width, max_len + 1, size=batch)
    w = rng.standard_normal((maps, width, dim)) * 0.1
    b = np.zeros(maps)

    def fwd():
        return kernels.conv_relu_maxpool_forward(x, lengths, w, b, backend=backend)

    def fwd_bwd():
        pooled, arg = fwd()
        kernels.conv_relu_maxpool_backward(np.ones_like(pooled), pooled, arg, x, w, False, backend=backend)

    return _time(fwd, repeat), _time(fwd_bwd, repeat)


def main(argv=None) -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    backends = ["python"] + (["cython"] if kernels.BACKEND == "cython" else [])
    if len(backends) == 1:
        print("compiled extension not available; timing the numpy fallback only")
    print(f"{'B':>4} {'T':>4} {'d':>4} {'M':>4} {'W':>2}  " + "  ".join(f"{b + ' fwd':>12} {b + ' f+b':>12}" for b in backends) + "  speedup(f+b)")
    for case in CASES:
        rng = np.random.default_rng(0)
        times = {be: bench_case(*case, be, args.repeat, rng) for be in backends}
        cols = "  ".join(f"{times[be][0] * 1e3:10.3f}ms {times[be][1] * 1e3:10.3f}ms" for be in backends)
        speed = f"{times['python'][1] / times['cython'][1]:8.1f}x" if "cython" in times else ""
        print(f"{case[0]:>4} {case[1]:>4} {case[2]:>4} {case[3]:>4} {case[4]:>2}  {cols}  {speed}")


if __name__ == "__main__":
    main()

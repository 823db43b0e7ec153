#!/usr/bin/env python3
"""Benchmark the compiled kernels against the numpy fallback.

Run: python benchmarks/bench_kernels.py [--repeats N]

The compiled kernels exist to cut per-call overhead and fuse element-wise
passes at the desk-scale shapes the engine actually trains on; numpy's
BLAS-backed matmul wins as shapes grow.  This prints both sides so the
trade-off stays visible.
"""

import argparse
import time

import numpy as np

from resmtl import backend
from resmtl.numcore import RngState

MATMUL_SHAPES = [
    (32, 32, 64),
    (64, 64, 64),
    (32, 512, 512),
    (256, 512, 512),
]

ELEMENTWISE_SHAPES = [(32, 64), (256, 512)]
ADAM_SIZES = [2_048, 262_144]


def bench(fn, repeats: int) -> float:
    fn()  # warm up
    start = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - start) / repeats


def run(repeats: int) -> None:
    names = backend.available_backends()
    if len(names) < 2:
        print(f"only {names} available; build the extension for a comparison")
    kernels = {name: backend.load_kernels(name) for name in names}
    rng = RngState(0)

    header = f"{'kernel':<28}" + "".join(f"{n:>14}" for n in names)
    if len(names) == 2:
        header += f"{'ratio':>9}"
    print(header)
    print("-" * len(header))

    def row(label, fns):
        times = {n: bench(fns[n], repeats) for n in names}
        cells = "".join(f"{times[n] * 1e6:>12.1f}us" for n in names)
        line = f"{label:<28}{cells}"
        if len(names) == 2:
            a, b = (times[n] for n in names)
            line += f"{b / a:>9.2f}"
        print(line)

    for m, k, n in MATMUL_SHAPES:
        a = np.ascontiguousarray(rng.normals(m * k).reshape(m, k))
        b = np.ascontiguousarray(rng.normals(k * n).reshape(k, n))
        # the composed backend always routes matmul to numpy/BLAS; the raw
        # compiled loop is benchmarked to show why
        row(f"matmul {m}x{k} @ {k}x{n}",
            {name: (lambda kk=kernels[name]: kk.matmul(a, b)) for name in names})

    for rows, cols in ELEMENTWISE_SHAPES:
        x = np.ascontiguousarray(rng.normals(rows * cols).reshape(rows, cols))
        row(f"relu {rows}x{cols}",
            {name: (lambda kk=kernels[name]: kk.relu(x)) for name in names})
        row(f"softmax_rows {rows}x{cols}",
            {name: (lambda kk=kernels[name]: kk.softmax_rows(x)) for name in names})

    for size in ADAM_SIZES:
        grad = np.ascontiguousarray(rng.normals(size))

        def make(name):
            kk = kernels[name]
            param = np.zeros(size)
            m_buf = np.zeros(size)
            v_buf = np.zeros(size)

            def step():
                kk.adam_update(param, grad, m_buf, v_buf,
                               1e-4, 0.9, 0.999, 1e-8, 1)

            return step

        row(f"adam_update n={size}", {name: make(name) for name in names})

    if len(names) == 2:
        print(f"\nratio > 1: '{names[1]}' slower than '{names[0]}'")
    print(f"selected backend at import: {backend.BACKEND}")


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=200)
    run(parser.parse_args().repeats)

"""Benchmark the conv2d backends at the sizes the workbench actually trains.

Run: python benchmarks/bench_conv.py
"""

import time

import numpy as np

from kdlab.kernels import available_backends

CASES = [
    ("teacher conv1 (B32, 1->16, 16x16)", (32, 1, 16, 16), (16, 1, 3, 3), 1),
    ("teacher conv2 (B32, 16->16, 16x16)", (32, 16, 16, 16), (16, 16, 3, 3), 1),
    ("student conv2 (B32, 8->8, 16x16)", (32, 8, 16, 16), (8, 8, 3, 3), 1),
    ("projection (B32, 8->16, 1x1)", (32, 8, 16, 16), (16, 8, 1, 1), 0),
]


def bench(fn, args, repeats=30):
    fn(*args)  # warmup
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn(*args)
    return (time.perf_counter() - t0) / repeats * 1e3


def main():
    backends = available_backends()
    rng = np.random.default_rng(0)
    print(f"{'case':38s} {'kernel':18s} " +
          " ".join(f"{name:>10s}" for name in backends))
    for label, xshape, kshape, pad in CASES:
        x = np.ascontiguousarray(rng.normal(size=xshape))
        w = np.ascontiguousarray(rng.normal(size=kshape))
        g = np.ascontiguousarray(available_backends()["numpy"].conv2d_forward(x, w, pad))
        rows = [
            ("forward", lambda m: (m.conv2d_forward, (x, w, pad))),
            ("grad_input", lambda m: (m.conv2d_grad_input, (g, w, pad, xshape))),
            ("grad_kernel", lambda m: (m.conv2d_grad_kernel, (g, x, pad, kshape))),
        ]
        for kname, make in rows:
            times = []
            for mod in backends.values():
                fn, args = make(mod)
                times.append(bench(fn, args))
            print(f"{label:38s} {kname:18s} " +
                  " ".join(f"{t:9.2f}ms" for t in times))


if __name__ == "__main__":
    main()

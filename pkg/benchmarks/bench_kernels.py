#!/usr/bin/env python3
"""Benchmark the compiled box kernels against the pure-Python fallback.

Usage: python benchmarks/bench_kernels.py [--repeats N]

The suppression loop and the IoU matrix are the hot kernels of the stream
harness (they run per frame, per class, per channel); this script reports
wall time per call for both backends on identical seeded inputs.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from ttastream import _kernels_py  # noqa: E402

try:
    from ttastream import _kernels
except ImportError:
    _kernels = None


def random_instance(rng, n):
    boxes = np.empty((n, 4))
    boxes[:, 0] = rng.uniform(0, 500, n)
    boxes[:, 1] = rng.uniform(0, 500, n)
    boxes[:, 2] = boxes[:, 0] + rng.uniform(5, 60, n)
    boxes[:, 3] = boxes[:, 1] + rng.uniform(5, 60, n)
    return boxes, rng.uniform(0.01, 1.0, n)


def time_call(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def bench(repeats: int) -> None:
    backends = [("python", _kernels_py)]
    if _kernels is not None:
        backends.insert(0, ("compiled", _kernels))
    else:
        print("note: compiled extension not built; showing fallback only\n")

    header = f"{'kernel':<28}{'n':>6}" + "".join(f"{name:>14}" for name, _ in backends)
    if len(backends) == 2:
        header += f"{'speedup':>10}"
    print(header)
    print("-" * len(header))

    rng = np.random.default_rng(7)
    cases = {n: random_instance(rng, n) for n in (10, 50, 200, 800)}

    for n, (boxes, scores) in cases.items():
        times = []
        for _, mod in backends:
            times.append(
                time_call(lambda m=mod: m.soft_nms_kernel(boxes, scores, 0, 0.5, 0.3, 1e-3),
                          repeats)
            )
        row = f"{'soft_nms (gaussian)':<28}{n:>6}" + "".join(f"{t * 1e3:>12.3f}ms" for t in times)
        if len(times) == 2:
            row += f"{times[1] / times[0]:>9.1f}x"
        print(row)

    for n, (boxes, _) in cases.items():
        times = []
        for _, mod in backends:
            times.append(time_call(lambda m=mod: m.iou_matrix(boxes, boxes), repeats))
        row = f"{'iou_matrix (n x n)':<28}{n:>6}" + "".join(f"{t * 1e3:>12.3f}ms" for t in times)
        if len(times) == 2:
            row += f"{times[1] / times[0]:>9.1f}x"
        print(row)

    if len(backends) == 2:
        boxes, scores = cases[200]
        a = _kernels.soft_nms_kernel(boxes, scores, 0, 0.5, 0.3, 1e-3)
        b = _kernels_py.soft_nms_kernel(boxes, scores, 0, 0.5, 0.3, 1e-3)
        agree = np.array_equal(a[0], b[0]) and np.allclose(a[1], b[1], atol=1e-12)
        print(f"\nbackend agreement on the n=200 case: {'yes' if agree else 'NO'}")


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=20)
    args = parser.parse_args()
    bench(args.repeats)

"""Timing comparison of the compiled kernel extension against the pure-NumPy
fallback.

Run from the repository root after an editable install:

    python benchmarks/bench_kernels.py [--repeats 20]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from lasp import _kernels


def _inputs(n: int, d: int, rng):
    e = rng.normal(size=(n, d))
    e /= np.linalg.norm(e, axis=1, keepdims=True)
    labels = rng.integers(0, 8, size=n)
    labels = np.concatenate([labels, labels])[:n]
    anchors = np.zeros(n, dtype=np.uint8)
    anchors[: n // 2] = 1
    r_old = _kernels.similarity_matrix(e, 0.1)
    acts = np.abs(rng.normal(size=(n, d)))
    weights = rng.normal(size=(d, d // 2))
    p_upper = np.abs(rng.normal(size=(n, d // 2)))
    p_upper /= p_upper.sum(axis=1, keepdims=True)
    return e, labels, anchors, r_old, acts, weights, p_upper


def _time(fn, repeats: int) -> float:
    fn()  # warm up
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=20)
    parser.add_argument("--sizes", default="64,128,256", help="comma-separated batch sizes")
    parser.add_argument("--dim", type=int, default=64)
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    backends = ["python"]
    if _kernels.HAVE_COMPILED:
        backends.append("compiled")
    else:
        print("compiled extension not built; timing the python backend only")

    print(f"{'kernel':<18} {'n':>5} " + " ".join(f"{b:>12}" for b in backends) + "   speedup")
    for n in (int(s) for s in args.sizes.split(",")):
        e, labels, anchors, r_old, acts, weights, p_upper = _inputs(n, args.dim, rng)
        cases = {
            "similarity_matrix": lambda: _kernels.similarity_matrix(e, 0.2),
            "supcon_loss_grad": lambda: _kernels.supcon_loss_grad(e, labels, anchors, 0.5),
            "ird_loss_grad": lambda: _kernels.ird_loss_grad(r_old, e, 0.2),
            "mwp_propagate": lambda: _kernels.mwp_propagate(acts, weights, p_upper),
        }
        for name, fn in cases.items():
            times = []
            for backend in backends:
                _kernels.use(backend)
                times.append(_time(fn, args.repeats))
            _kernels.use("auto")
            cols = " ".join(f"{t * 1e6:>10.1f}us" for t in times)
            speedup = f"{times[0] / times[-1]:>8.2f}x" if len(times) == 2 else ""
            print(f"{name:<18} {n:>5} {cols} {speedup}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())

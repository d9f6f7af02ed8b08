"""Compiled kernels vs. numpy fallback on the reference CNN's layer shapes.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import time

import numpy as np

from camlab import _pykernels

try:
    from camlab import _ckernels
except ImportError:
    _ckernels = None

# (batch, in_ch, size, out_ch, kernel): the two conv layers at batch 16 and 21
CASES = [(16, 1, 32, 8, 5), (16, 8, 16, 16, 5), (21, 1, 32, 8, 5), (21, 8, 16, 16, 5)]


def _time(fn, args, repeat):
    fn(*args)
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t)
    return best * 1e3


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    backends = [("python", _pykernels)] + ([("compiled", _ckernels)] if _ckernels else [])
    if _ckernels is None:
        print("compiled extension not built; timing the fallback only")
    print(f"{'case':>22} {'kernel':>14} " + " ".join(f"{n:>10}" for n, _ in backends) + "   speedup")
    for B, C, S, O, K in CASES:
        x = rng.normal(size=(B, C, S, S)).astype(np.float32)
        w = rng.normal(size=(O, C, K, K)).astype(np.float32)
        b = rng.normal(size=O).astype(np.float32)
        gy = rng.normal(size=(B, O, S, S)).astype(np.float32)
        pooled_in = rng.normal(size=(B, O, S, S)).astype(np.float32)
        _, idx = _pykernels.maxpool2x2_forward(pooled_in)
        gp = rng.normal(size=(B, O, S // 2, S // 2)).astype(np.float32)
        jobs = [
            ("conv fwd", "conv2d_forward", (x, w, b)),
            ("conv bwd in", "conv2d_backward_input", (gy, w)),
            ("conv bwd par", "conv2d_backward_params", (x, gy, K)),
            ("pool fwd", "maxpool2x2_forward", (pooled_in,)),
            ("pool bwd", "maxpool2x2_backward", (gp, idx)),
        ]
        case = f"{B}x{C}x{S}x{S} -> {O}"
        for label, fn, a in jobs:
            ms = [_time(getattr(mod, fn), a, args.repeat) for _, mod in backends]
            speed = f"{ms[0] / ms[1]:8.2f}x" if len(ms) == 2 else ""
            print(f"{case:>22} {label:>14} " + " ".join(f"{m:8.2f}ms" for m in ms) + f"  {speed}")


if __name__ == "__main__":
    main()

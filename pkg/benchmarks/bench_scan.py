"""Time the compiled scan kernel against the numpy fallback.

    python benchmarks/bench_scan.py [--repeats 5] [--sizes 64x64,256x64,1024x128]

Each size is ``LxD`` with ``d_k = d_v = D / heads``. Prints one row per
(size, pass) with the best-of-``repeats`` wall time of each backend and the
speedup. Also checks that both backends agree before timing.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from lt2.scan import BACKEND, kernels


def make_inputs(rng, BH: int, L: int, dk: int, dv: int):
    k = rng.normal(size=(BH, L, dk))
    k /= np.linalg.norm(k, axis=-1, keepdims=True)
    return (rng.normal(size=(BH, L, dk)), k, rng.uniform(0, 2, size=(BH, L)),
            rng.uniform(0.5, 1, size=(BH, L, dk)), rng.normal(size=(BH, L, dk)), rng.normal(size=(BH, L, dv)))


def best_of(fn, repeats: int) -> float:
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", default="64x64,256x64,1024x128,4096x256")
    ap.add_argument("--batch", type=int, default=4)
    ap.add_argument("--heads", type=int, default=4)
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    if BACKEND != "cython":
        print("compiled kernel not available; only the numpy fallback can be timed")
    rng = np.random.default_rng(args.seed)
    backends = ["numpy"] + (["cython"] if BACKEND == "cython" else [])
    print(f"{'L':>6} {'D':>5} {'dk':>4} {'pass':>8} " + " ".join(f"{b + ' ms':>11}" for b in backends)
          + ("   speedup" if len(backends) == 2 else ""))
    for spec in args.sizes.split(","):
        L, D = (int(x) for x in spec.lower().split("x"))
        dk = D // args.heads
        inp = make_inputs(rng, args.batch * args.heads, L, dk, dk)
        dy = rng.normal(size=(args.batch * args.heads, L, dk))
        ks = {b: kernels(b) for b in backends}
        if len(backends) == 2:
            err = np.abs(ks["cython"][0](*inp, True) - ks["numpy"][0](*inp, True)).max()
            assert err <= 1e-9, f"backends disagree by {err:.3g}"
        for name, call in (("forward", lambda f, b: f(*inp, True)),
                           ("backward", lambda f, b: b(*inp, dy, True))):
            times = [best_of(lambda: call(*ks[b]), args.repeats) * 1e3 for b in backends]
            row = f"{L:>6} {D:>5} {dk:>4} {name:>8} " + " ".join(f"{t:>11.2f}" for t in times)
            if len(times) == 2:
                row += f"   {times[0] / times[1]:>6.1f}x"
            print(row, flush=True)


if __name__ == "__main__":
    main()

"""Time the compiled kernels against the pure NumPy twins.

Runs the two hot paths (per-frame Weiszfeld averaging and the per-frame
X-update solve) on identical random inputs through both implementations,
reports wall time per call and the worst output disagreement.

Usage: python benchmarks/bench_kernels.py [--frames 200] [--repeats 5]
"""

import argparse
import importlib
import time

import numpy as np

from nrsfm import _kernels_py as pure

try:
    compiled = importlib.import_module("nrsfm._kernels")
except ImportError:
    compiled = None


def random_rotations(rng, n):
    return pure.so3_exp(rng.normal(scale=0.8, size=(n, 3)))


def bench(fn, args, repeats):
    best = np.inf
    out = None
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best, out


def row(name, t_pure, t_comp, dev):
    if t_comp is None:
        print(f"{name:<18} {t_pure * 1e3:>10.2f} ms {'-':>12} {'-':>9} {'-':>10}")
    else:
        print(
            f"{name:<18} {t_pure * 1e3:>10.2f} ms {t_comp * 1e3:>9.2f} ms "
            f"{t_pure / t_comp:>8.1f}x {dev:>10.1e}"
        )


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--frames", type=int, default=200)
    ap.add_argument("--samples", type=int, default=6, help="rotation samples per frame")
    ap.add_argument("--points", type=int, default=40)
    ap.add_argument("--iters", type=int, default=50, help="Weiszfeld iteration cap")
    ap.add_argument("--repeats", type=int, default=5, help="keep the best of N runs")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    F, S, P = args.frames, args.samples, args.points

    base = random_rotations(rng, F)
    jitter = pure.so3_exp(rng.normal(scale=0.1, size=(F * S, 3))).reshape(F, S, 3, 3)
    samples = jitter @ base[:, None]
    kept = np.ones((F, S), dtype=bool)
    R0 = samples[:, 0].copy()

    rows = random_rotations(rng, F)[:, :2].copy()
    W2 = rng.standard_normal((F, 2, P))
    T = rng.standard_normal((F, 3, P))
    rho = 0.5

    print(f"backends: pure numpy{'' if compiled is None else ' + compiled'}; "
          f"F={F} S={S} P={P} iters={args.iters} (best of {args.repeats})")
    print(f"{'kernel':<18} {'pure':>13} {'compiled':>12} {'speedup':>9} {'max dev':>10}")

    wargs = (samples, kept, R0, 1e-9, args.iters)
    t_p, out_p = bench(pure.weiszfeld_frames, wargs, args.repeats)
    if compiled is not None:
        t_c, out_c = bench(compiled.weiszfeld_frames, wargs, args.repeats)
        dev = np.abs(out_p[0] - np.asarray(out_c[0])).max()
        row("weiszfeld_frames", t_p, t_c, dev)
    else:
        row("weiszfeld_frames", t_p, None, None)

    xargs = (rows, W2, T, rho)
    t_p, out_p = bench(pure.solve_x_frames, xargs, args.repeats)
    if compiled is not None:
        t_c, out_c = bench(compiled.solve_x_frames, xargs, args.repeats)
        row("solve_x_frames", t_p, t_c, np.abs(out_p - np.asarray(out_c)).max())
    else:
        row("solve_x_frames", t_p, None, None)

    v = rng.normal(scale=0.8, size=(10 * F, 3))
    t_p, out_p = bench(pure.so3_exp, (v,), args.repeats)
    if compiled is not None:
        t_c, out_c = bench(compiled.so3_exp, (v,), args.repeats)
        row("so3_exp batch", t_p, t_c, np.abs(out_p - np.asarray(out_c)).max())
    else:
        row("so3_exp batch", t_p, None, None)

    if compiled is None:
        print("compiled extension not built; showing pure-python times only")


if __name__ == "__main__":
    main()

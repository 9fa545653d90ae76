"""Compare the compiled augmentation/binning kernels with the numpy fallback.

    python benchmarks/bench_kernels.py [--batch 256] [--repeat 20]
"""
import argparse
import timeit

import numpy as np

from kdaug import _kernels_py

try:
    from kdaug import _kernels
except ImportError:
    _kernels = None


def cases(batch, channels, T, n_conf, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((batch, channels, T)).astype(np.float32)
    lengths = rng.integers(1, T // 2 + 1, batch).astype(np.int64)
    starts = (rng.random(batch) * (T - lengths + 1)).astype(np.int64)
    shifts = rng.integers(0, T // 2 + 1, batch).astype(np.int64)
    conf = rng.random(n_conf)
    correct = (rng.random(n_conf) < conf).astype(np.uint8)
    edges = np.linspace(0, 1, 16)
    return {
        "removal_fill": lambda k: k.removal_fill(x.copy(), starts, lengths),
        "roll_time": lambda k: k.roll_time(x, shifts),
        "calibration_bins": lambda k: k.calibration_bins(conf, correct, edges),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--batch", type=int, default=256)
    ap.add_argument("--channels", type=int, default=40)
    ap.add_argument("--T", type=int, default=100)
    ap.add_argument("--n-conf", type=int, default=100_000)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    backends = [("numpy", _kernels_py)] + ([("cython", _kernels)] if _kernels is not None else [])
    if _kernels is None:
        print("compiled kernels not built; timing the numpy fallback only")
    print(f"{'kernel':<18}" + "".join(f"{name:>14}" for name, _ in backends) + f"{'speedup':>10}")
    for kernel, fn in cases(args.batch, args.channels, args.T, args.n_conf).items():
        times = []
        for _, mod in backends:
            fn(mod)  # warm up
            times.append(min(timeit.repeat(lambda: fn(mod), number=1, repeat=args.repeat)) * 1e3)
        speed = f"{times[0] / times[1]:>9.1f}x" if len(times) == 2 else ""
        print(f"{kernel:<18}" + "".join(f"{t:>11.3f} ms" for t in times) + speed)


if __name__ == "__main__":
    main()

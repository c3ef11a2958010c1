"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--size 512] [--repeat 5]

Both backends get identical inputs; outputs are checked for equality
before timing so a speedup never hides a wrong answer.
"""

import argparse
import timeit

import numpy as np

from qaclims import _kernels_py

try:
    from qaclims import _kernels
except ImportError:  # extension not built
    _kernels = None


def make_cases(size, n_classes, seed):
    rng = np.random.default_rng(seed)
    n = size * size
    p = rng.random(n)
    pred = rng.integers(0, n_classes + 1, n).astype(np.int64)
    gt = rng.integers(0, n_classes + 1, n).astype(np.int64)
    gt[rng.random(n) < 0.05] = 255
    maps = np.ascontiguousarray(rng.random((n_classes, n)))
    ids = np.arange(1, n_classes + 1, dtype=np.int64)
    low = np.ascontiguousarray(rng.random((size // 8, size // 8)))
    nc = n_classes + 1
    return {
        "fat_regions": lambda m: m.fat_regions(p, 0.1 * p.max()),
        "confusion_update": lambda m: _confusion(m, nc, pred, gt),
        "cam_argmax": lambda m: m.cam_argmax(maps, ids, 0.15),
        "bilinear_upsample": lambda m: m.bilinear_upsample(low, size, size),
    }


def _confusion(mod, nc, pred, gt):
    conf = np.zeros((nc, nc), np.int64)
    mod.confusion_update(conf, pred, gt, 255)
    return conf


def _same(a, b):
    if isinstance(a, tuple):
        return all(_same(x, y) for x, y in zip(a, b))
    if a is None:
        return b is None
    return np.array_equal(np.asarray(a), np.asarray(b))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=512, help="image side in pixels")
    ap.add_argument("--classes", type=int, default=20)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    if _kernels is None:
        print("compiled extension not available; build with `pip install -e . --no-build-isolation`")
        return 1

    cases = make_cases(args.size, args.classes, args.seed)
    print(f"{'kernel':<20}{'numpy ms':>10}{'cython ms':>11}{'speedup':>9}")
    for name, call in cases.items():
        ok = _same(call(_kernels_py), call(_kernels))
        if not ok:
            print(f"{name:<20}MISMATCH between backends")
            return 1
        py = min(timeit.repeat(lambda: call(_kernels_py), number=1, repeat=args.repeat))
        cy = min(timeit.repeat(lambda: call(_kernels), number=1, repeat=args.repeat))
        print(f"{name:<20}{1e3 * py:>10.3f}{1e3 * cy:>11.3f}{py / cy:>8.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())

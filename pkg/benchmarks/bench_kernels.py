"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat N]

Numba timings exclude the first (compiling) call. Both flavours are checked
to agree before anything is timed.
"""

import argparse
import timeit

import numpy as np

from multiregion import _accel, _kernels


def cases(rng):
    xy = rng.uniform(0, 1000, (2000, 2))
    boxes = np.hstack([xy, xy + rng.uniform(10, 200, (2000, 2))])
    order = np.argsort(-rng.random(2000), kind="stable").astype(np.int64)

    values = rng.normal(size=(64, 40, 60)).astype(np.float32)
    x0, y0 = rng.integers(0, 40, 500), rng.integers(0, 25, 500)
    rects = np.stack([x0, y0, x0 + rng.integers(1, 20, 500), y0 + rng.integers(1, 15, 500)], 1).astype(np.int64)
    inner = np.stack([x0 + 0.3, y0 + 0.3, x0 + 2.0, y0 + 2.0], 1)
    has = rng.random(500) < 0.4

    image = rng.random((480, 640))
    x = np.hstack([rng.normal(size=(3000, 40)), np.ones((3000, 1))])
    y = np.where(x[:, 0] + 0.5 * rng.normal(size=3000) > 0, 1.0, -1.0)
    return {
        "iou_matrix 2000x2000": ("iou_matrix", (boxes, boxes)),
        "greedy_nms 2000 boxes": ("greedy_nms", (boxes, order, 0.3)),
        "adaptive_max_pool 500 regions": ("adaptive_max_pool", (values, rects, inner, has, 7, 7)),
        "resize_bilinear 480x640->960x1280": ("resize_bilinear", (image, 960, 1280)),
        "feature_bank 480x640": ("feature_bank", (image, 16)),
        "svm_dual_cd 3000x41": ("svm_dual_cd", (x, y, 0.01, 1e-2, 1000, 1)),
    }


def _same(a, b):
    if isinstance(a, tuple):
        return all(_same(u, v) for u, v in zip(a, b))
    return np.allclose(a, b, atol=1e-9) if isinstance(a, np.ndarray) else a == b


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=3)
    args = p.parse_args(argv)
    if not _accel.NUMBA_AVAILABLE:
        raise SystemExit("numba is not installed; nothing to compare")
    print(f"{'kernel':<36} {'numba ms':>10} {'numpy ms':>10} {'speedup':>8}")
    for label, (name, call_args) in cases(np.random.default_rng(0)).items():
        fast, slow = getattr(_kernels, name + "_numba"), getattr(_kernels, name + "_numpy")
        if not _same(fast(*call_args), slow(*call_args)):
            raise SystemExit(f"{name}: numba and numpy results differ")
        t_fast = min(timeit.repeat(lambda: fast(*call_args), number=1, repeat=args.repeat)) * 1e3
        t_slow = min(timeit.repeat(lambda: slow(*call_args), number=1, repeat=args.repeat)) * 1e3
        print(f"{label:<36} {t_fast:>10.2f} {t_slow:>10.2f} {t_slow / t_fast:>7.1f}x")


if __name__ == "__main__":
    main()

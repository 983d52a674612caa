"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Shapes match one training step of the desk network: two ~70x70 images
through the tiny backbone and 138 RoIs pooled to 6x6.
"""
import argparse
import timeit

import numpy as np

from iodcnn.kernels import backends
from iodcnn.tensor import make_rng


def cases(dtype):
    rng = make_rng(0, 77)
    x = rng.normal(size=(2, 16, 36, 36)).astype(dtype)
    cols = rng.normal(size=(2, 16 * 9, 34 * 34)).astype(dtype)
    feat = rng.normal(size=(2, 32, 9, 9)).astype(dtype)
    x1 = rng.integers(0, 6, 138)
    y1 = rng.integers(0, 6, 138)
    boxes = np.stack([rng.integers(0, 2, 138), x1, y1,
                      x1 + rng.integers(1, 4, 138), y1 + rng.integers(1, 4, 138)], axis=1).astype(np.int64)
    return {
        "im2col": lambda k: k.im2col(x, 3, 3, 1, 34, 34),
        "col2im": lambda k: k.col2im(cols, 2, 16, 36, 36, 3, 3, 1, 34, 34),
        "maxpool_forward": lambda k: k.maxpool_forward(x, 2, 2),
        "maxpool_backward": (lambda k: _pool_grad(k, x), lambda k, g: k.maxpool_backward(*g, 36, 36)),
        "roi_pool_forward": lambda k: k.roi_pool_forward(feat, boxes, 6, 6),
        "roi_pool_backward": (lambda k: _roi_grad(k, feat, boxes), lambda k, g: k.roi_pool_backward(*g, 2, 9, 9)),
    }


def _pool_grad(k, x):
    y, am = k.maxpool_forward(x, 2, 2)
    return np.ones_like(y), am


def _roi_grad(k, feat, boxes):
    y, am = k.roi_pool_forward(feat, boxes, 6, 6)
    return np.ones_like(y), am, np.ascontiguousarray(boxes[:, 0])


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--number", type=int, default=20)
    args = ap.parse_args()
    kinds = backends()
    if "compiled" not in kinds:
        print("compiled extension not built; only the numpy fallback is available")
    print(f"{'kernel':20s} {'dtype':8s} " + " ".join(f"{k + ' ms':>12s}" for k in kinds) + "  speedup")
    for dtype in (np.float32, np.float64):
        for name, fn in cases(dtype).items():
            ms = {}
            for kind, mod in kinds.items():
                if isinstance(fn, tuple):  # backward: build inputs outside the timed region
                    prep, run = fn
                    g = prep(mod)
                    call = lambda: run(mod, g)  # noqa: E731
                else:
                    call = lambda: fn(mod)  # noqa: E731
                t = min(timeit.repeat(call, number=args.number, repeat=args.repeat))
                ms[kind] = 1000 * t / args.number
            speed = f"{ms['python'] / ms['compiled']:7.1f}x" if "compiled" in ms else "      -"
            cells = " ".join(f"{v:12.3f}" for v in ms.values())
            print(f"{name:20s} {np.dtype(dtype).name:8s} {cells}  {speed}")


if __name__ == "__main__":
    main()

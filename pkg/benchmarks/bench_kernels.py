"""Time the numba and numpy versions of each kernel on realistic sizes.

Both versions are imported directly, so the MRES_SEG_NUMBA switch does not
matter here. Usage: python3 benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import timeit

import numpy as np

from mres_seg import kernels as K


def cases(rng):
    img = rng.integers(0, 256, (1280, 1280, 3), dtype=np.uint8)
    classes = rng.integers(0, 3, (1280, 1280)).astype(np.uint8)
    annotated = rng.random((1280, 1280)) < 0.7
    hist = np.bincount(rng.integers(0, 256, 1_000_000), minlength=256).astype(np.int64)
    n = 640 * 640
    positive = rng.random(n) < 0.3
    scores = rng.random(n)
    valid = rng.random(n) < 0.9
    th = np.round(np.arange(1, 20) * 0.05, 2)
    return {
        "box_downsample 1280^2 rgb": (K.box_downsample_nb, K.box_downsample_np, (img,)),
        "majority_downsample x8 1280^2": (K.majority_downsample_nb, K.majority_downsample_np,
                                          (classes, annotated, 8)),
        "otsu_from_hist 256 bins": (K.otsu_from_hist_nb, K.otsu_from_hist_np, (hist,)),
        "confusion_counts 640^2 x19": (K.confusion_counts_nb, K.confusion_counts_np,
                                       (positive, scores, valid, th)),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':34s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s}")
    for name, (nb, npf, a) in cases(rng).items():
        r_nb, r_np = nb(*a), npf(*a)  # first call compiles
        assert np.array_equal(np.asarray(r_nb), np.asarray(r_np)), name
        t_nb = min(timeit.repeat(lambda: nb(*a), number=1, repeat=args.repeat)) * 1e3
        t_np = min(timeit.repeat(lambda: npf(*a), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:34s} {t_nb:10.2f} {t_np:10.2f} {t_np / t_nb:8.2f}x")


if __name__ == "__main__":
    main()

"""Timing comparison between the compiled mask kernels and the numpy
fallback. Run with: python3 benchmarks/bench_kernels.py [--repeats N]

Both implementations are bit-identical (the test suite enforces it), so
this only measures speed. The fallback is imported directly; the compiled
side comes from the built extension when present.
"""

import argparse
import time

import numpy as np

from mzs._kernels import HAVE_COMPILED, fallback

if HAVE_COMPILED:
    from mzs._kernels import _core as compiled
else:
    compiled = None


def timed(fn, *args, repeats):
    best = float("inf")
    result = None
    for _ in range(repeats):
        t0 = time.perf_counter()
        result = fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best, result


def agree(a, b):
    if isinstance(a, tuple):
        return all(agree(x, y) for x, y in zip(a, b))
    return np.array_equal(a, b)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=3,
                        help="best-of-N timing (default 3)")
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    mask = (rng.random((48, 160, 160)) < 0.35).astype(np.uint8)
    plane = (rng.random((512, 512)) < 0.5).astype(np.uint8)

    cases = [
        ("box_erode r=1 (48,160,160)", "box_erode", (mask, 1)),
        ("box_erode r=2 (48,160,160)", "box_erode", (mask, 2)),
        ("box_dilate r=1 (48,160,160)", "box_dilate", (mask, 1)),
        ("label_components_26 (48,160,160)", "label_components_26", (mask,)),
        ("window_counts 64/32 (512,512)", "window_counts", (plane, 64, 32)),
    ]

    print(f"compiled extension available: {HAVE_COMPILED}")
    header = f"{'case':<36} {'fallback':>10} {'compiled':>10} {'speedup':>8}"
    print(header)
    print("-" * len(header))
    for label, name, call_args in cases:
        t_fb, r_fb = timed(getattr(fallback, name), *call_args,
                           repeats=args.repeats)
        if compiled is None:
            print(f"{label:<36} {t_fb * 1e3:>8.2f}ms {'n/a':>10} {'n/a':>8}")
            continue
        t_c, r_c = timed(getattr(compiled, name), *call_args,
                         repeats=args.repeats)
        assert agree(r_fb, r_c), f"backends disagree on {label}"
        print(f"{label:<36} {t_fb * 1e3:>8.2f}ms {t_c * 1e3:>8.2f}ms "
              f"{t_fb / t_c:>7.1f}x")


if __name__ == "__main__":
    main()

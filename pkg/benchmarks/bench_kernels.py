"""Numba vs numpy timings for the hot kernels.

    python benchmarks/bench_kernels.py [--repeat 5]

Both variants are called directly, so the ``QADAPT_NUMBA`` flag does not
matter here. The first numba call (compilation or cache load) is excluded.
"""
import argparse
import timeit

import numpy as np

from qadapt import kernels


def cases(rng):
    image = rng.random((1024, 1024, 3))
    crop = rng.random((512, 512, 3))
    out = [
        ("resize 1024->224", kernels.resize_image_numpy, kernels.resize_image_numba, (image, 224, 224)),
        ("resize 512->224", kernels.resize_image_numpy, kernels.resize_image_numba, (crop, 224, 224)),
    ]
    # 500 is one class column of a test split; 20000 shows where numpy's sort takes over
    for n in (500, 20000):
        scores = rng.random(n).round(3)  # rounding forces ties
        labels = (rng.random(n) < 0.3).astype(np.float64)
        out.append((f"midranks n={n}", kernels.midranks_numpy, kernels.midranks_numba, (scores,)))
        out.append((f"f1 sweep n={n}", kernels.f1_sweep_numpy, kernels.f1_sweep_numba, (scores, labels)))
    return out


def best_of(fn, args, repeat):
    timer = timeit.Timer(lambda: fn(*args))
    number, _ = timer.autorange()
    return min(timer.repeat(repeat, number)) / number


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)

    print(f"{'kernel':<20} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}  agree")
    for name, slow, fast, call in cases(np.random.default_rng(args.seed)):
        ref, out = slow(*call), fast(*call)  # also warms the JIT
        agree = np.allclose(np.asarray(ref, dtype=float), np.asarray(out, dtype=float), atol=1e-9)
        t_np, t_nb = best_of(slow, call, args.repeat), best_of(fast, call, args.repeat)
        print(f"{name:<20} {t_np * 1e3:>10.3f} {t_nb * 1e3:>10.3f} {t_np / t_nb:>7.1f}x  {agree}")


if __name__ == "__main__":
    main()

"""Time the jitted kernels against their numpy twins.

    python benchmarks/bench_kernels.py [--repeat 5]

Also times a knowledge-base build end to end under whichever backend the
environment selects (set SKETCHSCENE_PURE_NUMPY=1 to force numpy).
"""
import argparse
import time

import numpy as np

from sketchscene import kernels, synth
from sketchscene._accel import BACKEND, HAVE_NUMBA
from sketchscene.knowledge import build_kb


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)

    # voxel sets of two furniture-sized boxes at 0.1 m
    a = rng.uniform(0, 1.0, size=(800, 3))
    b = rng.uniform(0.5, 1.5, size=(600, 3)) + np.array([1.0, 0.0, 0.0])
    segs = rng.uniform(-30, 30, size=(96, 4))

    rows = [("min_set_distance", lambda: kernels._min_set_distance_numpy(a, b),
             lambda: kernels._min_set_distance_loop(a, b, 0.0)),
            ("rasterize_segments", lambda: kernels._rasterize_numpy(segs, 64, 64, np.zeros((64, 64), np.uint8)),
             lambda: kernels._rasterize_loop(segs, 64, 64, np.zeros((64, 64), np.uint8)))]

    print(f"{'kernel':<22}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for name, np_fn, nb_fn in rows:
        t_np = best_of(np_fn, args.repeat)
        if HAVE_NUMBA:
            nb_fn()  # compile outside the timing
            t_nb = best_of(nb_fn, args.repeat)
            print(f"{name:<22}{t_np * 1e3:>10.3f}{t_nb * 1e3:>10.3f}{t_np / t_nb:>8.1f}x")
        else:
            print(f"{name:<22}{t_np * 1e3:>10.3f}{'-':>10}{'-':>9}")

    corpus = synth.sample_corpus(synth.GeneratorConfig(seed=0), 100)
    build_kb(corpus[:2])
    t = best_of(lambda: build_kb(corpus), 1)
    print(f"build_kb over 100 scenes ({BACKEND} backend): {t:.2f} s")


if __name__ == "__main__":
    main()

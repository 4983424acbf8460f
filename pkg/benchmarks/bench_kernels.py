"""Time the compiled-loop and numpy version of every kernel on slide-sized inputs.

    python benchmarks/bench_kernels.py [--repeat 5] [--scale 1.0]

Compilation happens in a warm-up call and is reported separately.
"""

import argparse
import time
import timeit

import numpy as np

from tumorbed import _accel, kernels
from tumorbed.imaging import HsvBounds, tile_grid


def _cases(scale: float, rng: np.random.Generator) -> dict:
    side = int(4096 * scale ** 0.5)
    rgb = rng.integers(0, 256, size=(side, side, 3), dtype=np.uint8)
    tiles = tile_grid(side, side, 512, 256)
    xs = np.array([t.x for t in tiles], dtype=np.float64)
    ys = np.array([t.y for t in tiles], dtype=np.float64)
    n_cells = -(-side // 64)

    def votes(fn):
        s = np.zeros((n_cells, n_cells))
        c = np.zeros((n_cells, n_cells), dtype=np.int64)
        fn(xs, ys, np.full(len(xs), 512.0), rng.random(len(xs)), 64.0, s, c)

    t = np.sort(rng.uniform(0, 2 * np.pi, 40))
    vx = side / 2 + side / 3 * np.cos(t)
    vy = side / 2 + side / 4 * np.sin(t)
    px = rng.uniform(0, side, int(1e6 * scale))
    py = rng.uniform(0, side, int(1e6 * scale))
    feats = rng.normal(size=(int(20000 * scale), 64))
    cents = rng.normal(size=(300, 64))
    labels = rng.integers(0, 300, len(feats))
    bounds = HsvBounds().as_array()

    def update(fn):
        fn(feats, labels, cents.copy(), np.zeros(300, dtype=np.int64))

    return {
        "hsv_band_mask": (lambda fn: fn(rgb, bounds), f"{side}x{side} RGB"),
        "accumulate_votes": (votes, f"{len(xs)} tiles, 64 px cells"),
        "points_in_polygon": (lambda fn: fn(px, py, vx, vy), f"{len(px)} points, 40-gon"),
        "assign_nearest": (lambda fn: fn(feats, cents), f"{len(feats)}x64 vs 300 centres"),
        "streaming_update": (update, f"{len(feats)} rows, 300 centres"),
    }


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--scale", type=float, default=1.0, help="multiplies problem sizes")
    args = ap.parse_args()

    print(f"numba available: {_accel.HAVE_NUMBA}; package backend: {_accel.backend()}")
    print(f"{'kernel':<18} {'input':<28} {'compile':>9} {'numba':>10} {'numpy':>10} {'speed-up':>9}")
    for name, (run, desc) in _cases(args.scale, np.random.default_rng(0)).items():
        compiled, vectorised = kernels.IMPLEMENTATIONS[name]
        t0 = time.perf_counter()
        run(compiled)
        compile_s = time.perf_counter() - t0
        t_nb = min(timeit.repeat(lambda: run(compiled), number=1, repeat=args.repeat))
        t_np = min(timeit.repeat(lambda: run(vectorised), number=1, repeat=args.repeat))
        print(f"{name:<18} {desc:<28} {compile_s:>8.2f}s {t_nb * 1e3:>8.1f}ms {t_np * 1e3:>8.1f}ms {t_np / t_nb:>8.1f}x")


if __name__ == "__main__":
    main()

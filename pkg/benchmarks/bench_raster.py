"""Time the rasteriser backends on the bundled subject.

    python benchmarks/bench_raster.py [--size 128] [--repeat 5] [--threads 1]

Reports forward and backward wall time per backend and checks that the
backends agree on the rendered image and gradients.
"""
import argparse
import time

import numpy as np

from headsplat import kernels
from headsplat.scene import BACKGROUND, back_camera, make_subject
from headsplat.splat import globalize, render, render_backward


def bench(backend, world, cam, g_rgb, repeat):
    fwd, bwd = [], []
    for _ in range(repeat):
        t0 = time.perf_counter()
        img, ctx = render(world, cam, BACKGROUND, return_context=True, backend=backend)
        t1 = time.perf_counter()
        grads = render_backward(world, cam, g_rgb, ctx=ctx, background=BACKGROUND)
        t2 = time.perf_counter()
        fwd.append(t1 - t0)
        bwd.append(t2 - t1)
    return min(fwd), min(bwd), img, grads


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--size", type=int, default=128)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--azimuth", type=float, default=30.0)
    args = ap.parse_args()

    kernels.set_threads(args.threads)
    subject = make_subject()
    world = globalize(subject.truth, subject.truth_vertices())
    cam = back_camera(args.azimuth, resolution=(args.size, args.size))
    g_rgb = np.random.default_rng(0).normal(size=(args.size, args.size, 3))

    results = {}
    print(f"{len(world)} kernels, {args.size}x{args.size}, {args.threads} thread(s)")
    print(f"{'backend':<10}{'forward ms':>12}{'backward ms':>13}")
    for name in kernels.available_backends():
        f, b, img, grads = bench(name, world, cam, g_rgb, args.repeat)
        results[name] = (f, b, img, grads)
        print(f"{name:<10}{1e3 * f:>12.2f}{1e3 * b:>13.2f}")

    if len(results) == 2:
        (fa, ba, ia, ga), (fb, bb, ib, gb) = results.values()
        names = list(results)
        print(f"speed-up {names[0]} over {names[1]}: forward {fb / fa:.1f}x, backward {bb / ba:.1f}x")
        diff = max(float(np.max(np.abs(ia.rgb - ib.rgb))), float(np.max(np.abs(ga.means - gb.means))))
        print(f"max abs difference between backends: {diff:.2e}")


if __name__ == "__main__":
    main()

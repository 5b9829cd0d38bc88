"""Compare the compiled and numpy rasterizer kernels on real scenes.

    python3 benchmarks/bench_raster.py [--repeat 20] [--resolution 112 224 512]

Prints the median time per call for each backend and checks that both
return identical buffers.
"""
from __future__ import annotations

import argparse
import statistics
import time

import numpy as np

from lodcheck import raster
from lodcheck.primitives import make_asset
from lodcheck.render import ViewSpec, auto_distance, project


def scene(resolution: int, subdivisions_seed: int = 0):
    mesh = make_asset("rock", subdivisions_seed)
    view = ViewSpec(distance=auto_distance(mesh), yaw=30.0, elevation=20.0, resolution=resolution)
    xy, inv_depth, visible, _ = project(mesh, view)
    keep = np.nonzero(visible)[0]
    return np.ascontiguousarray(xy[keep]), np.ascontiguousarray(inv_depth[keep])


def timed(fn, args, repeat: int) -> float:
    samples = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn(*args)
        samples.append(time.perf_counter() - t)
    return statistics.median(samples)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--resolution", type=int, nargs="+", default=[112, 224, 512])
    args = ap.parse_args(argv)

    kernels = raster.backends()
    if "cython" not in kernels:
        print("compiled kernel not built; timing the numpy kernel only")
    print(f"{'res':>5} {'tris':>6} " + " ".join(f"{k + ' ms':>10}" for k in kernels) + "   speedup  identical")
    for res in args.resolution:
        xy, inv_depth = scene(res)
        call = (xy, inv_depth, res, res)
        times = {k: timed(fn, call, args.repeat) for k, fn in kernels.items()}
        outs = [fn(*call) for fn in kernels.values()]
        same = all(np.array_equal(o[0], outs[0][0]) and np.array_equal(o[1], outs[0][1]) for o in outs)
        speed = times["python"] / times["cython"] if "cython" in times else float("nan")
        cols = " ".join(f"{times[k] * 1e3:10.3f}" for k in kernels)
        print(f"{res:5d} {len(xy):6d} {cols}   {speed:7.1f}x  {same}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())

"""Compare the compiled and numpy kernel backends.

Times every kernel on the shapes the pipeline actually uses, checks the two
backends agree, then times one deformation iteration end to end with each
backend swapped in.

    python benchmarks/bench_kernels.py [--repeats 30] [--csv out.csv]
"""

import argparse
import csv
import os
import sys
import time
from contextlib import contextmanager

for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np  # noqa: E402

from deepsnake import kernels  # noqa: E402
from deepsnake import synthdata as sd  # noqa: E402
from deepsnake.pipeline import deform_batch, propose_batch  # noqa: E402
from deepsnake.snakenet import SnakeNet  # noqa: E402

KERNEL_NAMES = ("circ_gather", "circ_scatter", "bilinear_gather", "bilinear_scatter", "rasterize",
                "boundary_distance")


def median_ms(fn, repeats, warmup=3):
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return 1e3 * float(np.median(times))


def workloads(dtype=np.float32):
    """Arguments for each kernel at batch 8, N = 128, D = 64, a 128x128x4 map."""
    rng = np.random.default_rng(0)
    poly = sd.gen_shape(0, "blob")
    pts = rng.uniform(0, 127, size=(8, 128, 2)).astype(dtype)
    return {
        "circ_gather": (rng.normal(size=(8, 128, 64)).astype(dtype), 9),
        "circ_scatter": (rng.normal(size=(8, 128, 9, 64)).astype(dtype),),
        "bilinear_gather": (rng.normal(size=(8, 128, 128, 4)).astype(dtype), pts),
        "bilinear_scatter": (rng.normal(size=(8, 128, 4)).astype(dtype), pts, 8, 128, 128),
        "rasterize": (np.ascontiguousarray(poly), -0.5, -0.5, 1.0, 128, 128),
        "boundary_distance": (np.ascontiguousarray(poly), 128, 128),
    }


@contextmanager
def use_backend(name):
    saved = {k: getattr(kernels, k) for k in KERNEL_NAMES}
    impl = kernels.BACKENDS[name]
    for k in KERNEL_NAMES:
        setattr(kernels, k, getattr(impl, k))
    try:
        yield
    finally:
        for k, v in saved.items():
            setattr(kernels, k, v)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=30)
    ap.add_argument("--csv", help="also write the table as CSV")
    args = ap.parse_args(argv)

    if "cython" not in kernels.BACKENDS:
        print("compiled backend not built; run `pip install -e . --no-build-isolation` first", file=sys.stderr)
        return 1
    rows = []
    for name, call in workloads().items():
        outs, times = {}, {}
        for backend, impl in kernels.BACKENDS.items():
            fn = getattr(impl, name)
            outs[backend] = np.asarray(fn(*call))
            times[backend] = median_ms(lambda: fn(*call), args.repeats)
        diff = float(np.abs(outs["python"].astype(np.float64) - outs["cython"].astype(np.float64)).max())
        rows.append({"kernel": name, "python_ms": times["python"], "cython_ms": times["cython"],
                     "speedup": times["python"] / times["cython"], "max_abs_diff": diff})

    s = sd.make_sample(1)
    prop = SnakeNet(seed=1, zero_head=False).astype(np.float32)
    dfm = SnakeNet(seed=2, zero_head=False).astype(np.float32)
    init = propose_batch([s.jittered_box], [s.features], prop)[0].octagon128[None]
    e2e = {}
    for backend in kernels.BACKENDS:
        with use_backend(backend):
            e2e[backend] = median_ms(lambda: deform_batch(init, [s.features], dfm, 1), args.repeats)
    rows.append({"kernel": "deform_iteration (end to end)", "python_ms": e2e["python"], "cython_ms": e2e["cython"],
                 "speedup": e2e["python"] / e2e["cython"], "max_abs_diff": ""})

    print(f"{'kernel':<32}{'python ms':>12}{'cython ms':>12}{'speedup':>10}{'max |diff|':>14}")
    for r in rows:
        diff = "" if r["max_abs_diff"] == "" else f"{r['max_abs_diff']:.2e}"
        print(f"{r['kernel']:<32}{r['python_ms']:>12.3f}{r['cython_ms']:>12.3f}{r['speedup']:>9.1f}x{diff:>14}")
    if args.csv:
        with open(args.csv, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())

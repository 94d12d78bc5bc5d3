"""Compare the compiled and pure-Python kernel backends.

Usage: python benchmarks/bench_kernels.py [--reps N] [--out FILE.csv]

Both backends are timed on the same inputs and their outputs are checked for
bitwise equality before any timing is reported.
"""

import argparse
import csv
import statistics
import sys
import timeit

import numpy as np

from tpoverlap import _kernels_py

try:
    from tpoverlap import _kernels
except ImportError:
    _kernels = None


def _cases(rng):
    a = rng.standard_normal((256, 128))
    b = rng.standard_normal((128, 256))
    release = np.sort(rng.uniform(0, 100, 4096))
    duration = rng.uniform(0.5, 2.0, 4096)
    arrival = np.sort(rng.uniform(0, 100, 4096))
    service = rng.uniform(0.01, 0.05, 4096)
    return {
        "tile_mainloop_64x64_k128": ("tile_mainloop", (a, b, 0, 64, 0, 64)),
        "tile_mainloop_256x256_k128": ("tile_mainloop", (a, b, 0, 256, 0, 256)),
        "schedule_tiles_4096_on_108": ("schedule_tiles", (release, duration, 108, 0.0)),
        "fifo_serve_4096": ("fifo_serve", (arrival, service, 2.0)),
    }


def _same(x, y):
    if isinstance(x, tuple):
        return all(np.array_equal(p, q) for p, q in zip(x, y))
    return np.array_equal(x, y)


def _time(fn, args, reps):
    timer = timeit.Timer(lambda: fn(*args))
    number, _ = timer.autorange()
    samples = [t / number for t in timer.repeat(repeat=reps, number=number)]
    med = statistics.median(samples)
    return med, (max(samples) - min(samples)) / med


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--reps", type=int, default=5)
    parser.add_argument("--out", help="optional CSV destination")
    args = parser.parse_args(argv)
    if _kernels is None:
        print("compiled backend not built; run `pip install -e . --no-build-isolation` first", file=sys.stderr)
        return 2
    rows = []
    for name, (fn, fargs) in _cases(np.random.default_rng(42)).items():
        py_fn, cy_fn = getattr(_kernels_py, fn), getattr(_kernels, fn)
        if not _same(py_fn(*fargs), cy_fn(*fargs)):
            print(f"{name}: backends disagree", file=sys.stderr)
            return 1
        py, py_disp = _time(py_fn, fargs, args.reps)
        cy, cy_disp = _time(cy_fn, fargs, args.reps)
        rows.append({"kernel": name, "python_s": py, "python_dispersion": py_disp, "cython_s": cy,
                     "cython_dispersion": cy_disp, "speedup": py / cy})
        print(f"{name:28s} python={py * 1e6:10.1f}us cython={cy * 1e6:10.1f}us speedup={py / cy:6.1f}x")
    if args.out:
        with open(args.out, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Compare the compiled and pure-numpy render kernels.

Times ``compose``, ``warp`` and ``gather`` under both backends on the same
inputs, checks that the outputs agree, and prints a table::

    python benchmarks/bench_kernels.py --size 256 --repeat 5
"""

import argparse
import time

import numpy as np

from p2sturb import _kernels


def _inputs(size: int, m: int, psf: int, gather_size: int, seed: int):
    rng = np.random.default_rng(seed)
    filtered = rng.random((m + 1, size, size), dtype=np.float32)
    beta = rng.standard_normal((m, size, size)).astype(np.float32)
    img = rng.random((size, size), dtype=np.float32)
    tilt = rng.normal(scale=2.0, size=(2, size, size)).astype(np.float32)
    x = rng.random((gather_size, gather_size))
    psfs = rng.random((gather_size, gather_size, psf, psf))
    psfs /= psfs.sum(axis=(-2, -1), keepdims=True)
    return {"compose": (filtered, beta), "warp": (img, tilt), "gather": (x, psfs)}


def _time(fn, args, repeat: int):
    fn(*args)  # compile / warm caches
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn(*args)
        times.append(time.perf_counter() - t0)
    return float(np.median(times)), out


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=256, help="image side for compose/warp")
    ap.add_argument("--basis", type=int, default=100, help="number of basis components")
    ap.add_argument("--psf", type=int, default=33, help="PSF side for gather")
    ap.add_argument("--gather-size", type=int, default=32, help="image side for gather")
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    if not _kernels.HAVE_NUMBA:
        print("numba is not installed; only the numpy backend is available")
        return 1
    inputs = _inputs(args.size, args.basis, args.psf, args.gather_size, args.seed)
    print(f"{'kernel':<10}{'numba [s]':>12}{'numpy [s]':>12}{'speedup':>10}{'max |diff|':>13}")
    prev = _kernels.backend()
    try:
        for name, call in inputs.items():
            fn = getattr(_kernels, name)
            _kernels.use_backend("numba")
            t_nb, out_nb = _time(fn, call, args.repeat)
            _kernels.use_backend("numpy")
            t_np, out_np = _time(fn, call, args.repeat)
            diff = float(np.max(np.abs(np.asarray(out_nb, float) - np.asarray(out_np, float))))
            print(f"{name:<10}{t_nb:>12.4g}{t_np:>12.4g}{t_np / t_nb:>9.1f}x{diff:>13.2e}")
    finally:
        _kernels.use_backend(prev)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())

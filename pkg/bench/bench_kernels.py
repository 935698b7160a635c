"""Time the numba kernels against their numpy fallbacks.

    python bench/bench_kernels.py [--repeat 5] [--json out.json]

Each kernel is called once before timing so JIT compilation is excluded.
Outputs are compared between backends before timing.
"""
import argparse
import json
import timeit

import numpy as np

from trsoc import _kernels


def cases(rng):
    K, J, d = 2000, 50, 2
    du = rng.normal(size=(K, J, d))
    dW = rng.normal(size=(K, J, d)) * 0.14
    dt = np.full(J, 1.0 / J)
    means = rng.uniform(-8, 8, size=(10, d))
    inv_var = np.ones((10, d))
    log_norm = np.log(np.full(10, 0.1)) - 0.5 * d * np.log(2 * np.pi)
    x = rng.normal(size=(K, d)) * 4
    bdiag = np.full((J + 1, d), -0.5)
    return {
        "path_girsanov": (du, dW, dt),
        "adjoint_linear_diag": (x, bdiag, np.zeros((0, 0, 0)), dt, 1.0),
        "gmm_logpdf_grad": (x, means, inv_var, log_norm),
        "riccati_rk4_diag": (np.full(20, 0.2), np.full(20, 0.2), np.full(20, 0.1), np.ones(20), 1.0, 10_000),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json")
    args = ap.parse_args()
    if _kernels.numba_kernels is None:
        raise SystemExit("numba is not installed; nothing to compare")

    results = {}
    for name, a in cases(np.random.default_rng(0)).items():
        fnp = getattr(_kernels.numpy_kernels, name)
        fnb = getattr(_kernels.numba_kernels, name)
        ref, got = fnp(*a), fnb(*a)
        for r, g in zip(np.atleast_1d(ref) if not isinstance(ref, tuple) else ref,
                        np.atleast_1d(got) if not isinstance(got, tuple) else got):
            np.testing.assert_allclose(g, r, rtol=1e-10, atol=1e-12)
        row = {}
        for label, f in (("numpy", fnp), ("numba", fnb)):
            n, _ = timeit.Timer(lambda: f(*a)).autorange()
            row[label] = min(timeit.repeat(lambda: f(*a), number=n, repeat=args.repeat)) / n
        row["speedup"] = row["numpy"] / row["numba"]
        results[name] = row
        print(f"{name:22s} numpy {row['numpy'] * 1e3:9.3f} ms  numba {row['numba'] * 1e3:9.3f} ms  "
              f"x{row['speedup']:.1f}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(results, fh, indent=2)


if __name__ == "__main__":
    main()

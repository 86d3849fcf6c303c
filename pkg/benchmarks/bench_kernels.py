"""Compare the compiled kernels with their numpy fallbacks.

Usage: ``python benchmarks/bench_kernels.py [--repeat N]``. Prints the
median time per call for each kernel and backend, and the speed-up.
"""

import argparse
import timeit

import numpy as np

from clhmc._kernels import _pykernels

try:
    from clhmc._kernels import _ckernels
except ImportError:
    _ckernels = None


def cases():
    r = np.random.default_rng(0)
    field = r.standard_normal((20, 65, 65))
    other = r.standard_normal((20, 65, 65))
    x = r.standard_normal(1)
    means = r.standard_normal((5, 1))
    inv_vars = r.uniform(1, 10, (5, 1))
    log_coefs = r.standard_normal(5)
    xq = r.standard_normal(4225)
    means_q = r.standard_normal((4, 4225))
    inv_q = r.uniform(0.1, 1, (4, 4225))
    coefs_q = r.standard_normal(4)
    return {
        "laplacian5 20x65x65": ("laplacian5", (field, 1 / 64, 1 / 64)),
        "arakawa 20x65x65": ("arakawa", (field, other, 1 / 64, 1 / 64)),
        "mixture_prior d=1 n_c=5": ("mixture_prior", (x, means, inv_vars, log_coefs)),
        "mixture_prior d=4225 n_c=4": ("mixture_prior", (xq, means_q, inv_q, coefs_q)),
    }


def median_time(fn, args, repeat):
    number = max(1, int(0.2 / max(timeit.timeit(lambda: fn(*args), number=1), 1e-7)))
    runs = timeit.repeat(lambda: fn(*args), number=number, repeat=repeat)
    return float(np.median(runs)) / number


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    if _ckernels is None:
        print("compiled kernels are not built; only the numpy fallback is timed")
    print(f"{'kernel':32s} {'numpy':>12s} {'cython':>12s} {'speed-up':>9s}")
    for label, (name, call_args) in cases().items():
        t_py = median_time(getattr(_pykernels, name), call_args, args.repeat)
        if _ckernels is None:
            print(f"{label:32s} {t_py * 1e6:10.1f}us")
            continue
        t_c = median_time(getattr(_ckernels, name), call_args, args.repeat)
        print(f"{label:32s} {t_py * 1e6:10.1f}us {t_c * 1e6:10.1f}us {t_py / t_c:8.1f}x")


if __name__ == "__main__":
    main()

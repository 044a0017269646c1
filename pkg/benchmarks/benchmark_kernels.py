"""Time the JIT-compiled kernels against their pure-numpy bodies and
report the speedup plus the largest numeric deviation between the paths.

Run with the JIT active (the default):

    python3 benchmarks/benchmark_kernels.py --d 64 --m 12 --repeats 200

With ENSAD_NUMBA=0 both paths are the same function; the script says so
and exits.
"""

import argparse
import time

import numpy as np

from ensad.backend import NUMBA_ENABLED, python_impl
from ensad.kernels import (
    adapter_backward,
    adapter_forward,
    gaussian_from_bits,
    splitmix64_fill,
)
from ensad.numkit import SeededRng, l2_normalize


def timeit(fn, args, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def max_deviation(a, b):
    worst = 0.0
    for x, y in zip(a, b):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        worst = max(worst, float(np.max(np.abs(x - y))) if x.size else 0.0)
    return worst


def bench_adapter(d, d_hid, m, alpha, repeats):
    rng = SeededRng(7)
    rows = np.stack([l2_normalize(rng.gaussian(d)) for _ in range(m + 1)])
    wq = rng.gaussian(d_hid * d).reshape(d_hid, d) / np.sqrt(d)
    wk = rng.gaussian(d_hid * d).reshape(d_hid, d) / np.sqrt(d)
    wv = rng.gaussian(d_hid * d).reshape(d_hid, d) / np.sqrt(d)
    b = np.zeros(d_hid)
    wp = rng.gaussian(d_hid) / np.sqrt(d_hid)
    bp = 0.0
    wo = rng.gaussian(d * d).reshape(d, d) / np.sqrt(d)
    fwd_args = (rows, wq, wk, wv, b, wp, bp, wo, alpha, False)

    out = adapter_forward(*fwd_args)
    out_py = python_impl(adapter_forward)(*fwd_args)
    (q, k_rows, vraw_rows, vraw_norms, v_rows, a_rows, t_rows, logits, s,
     u_rows, u_norms, uhat_rows, vo_rows, craw, craw_norm, c, hraw,
     hraw_norm, h_tilde) = out
    g = rng.gaussian(d)
    bwd_args = (g, wq, wk, wv, wp, wo, alpha, False, q, k_rows, vraw_norms,
                v_rows, t_rows, s, u_rows, u_norms, uhat_rows, vo_rows, c,
                craw_norm, h_tilde, hraw_norm)
    back = adapter_backward(*bwd_args)
    back_py = python_impl(adapter_backward)(*bwd_args)

    rows_out = []
    for name, fn, args, dev in (
        ("adapter_forward", adapter_forward, fwd_args,
         max_deviation(out, out_py)),
        ("adapter_backward", adapter_backward, bwd_args,
         max_deviation(back, back_py)),
    ):
        jit_t = timeit(fn, args, repeats)
        py_t = timeit(python_impl(fn), args, repeats)
        rows_out.append((name, jit_t, py_t, dev))
    return rows_out


def bench_rng(n, repeats):
    seed = np.uint64(3)
    pos = np.uint64(0)
    bits = splitmix64_fill(seed, pos, n)
    bits_py = python_impl(splitmix64_fill)(seed, pos, n)
    dev_bits = float(np.max(np.abs(bits.astype(np.int64) -
                                   bits_py.astype(np.int64))))
    gauss = gaussian_from_bits(bits)
    gauss_py = python_impl(gaussian_from_bits)(bits)
    rows_out = [
        ("splitmix64_fill",
         timeit(splitmix64_fill, (seed, pos, n), repeats),
         timeit(python_impl(splitmix64_fill), (seed, pos, n), repeats),
         dev_bits),
        ("gaussian_from_bits",
         timeit(gaussian_from_bits, (bits,), repeats),
         timeit(python_impl(gaussian_from_bits), (bits,), repeats),
         max_deviation([gauss], [gauss_py])),
    ]
    return rows_out


def main():
    parser = argparse.ArgumentParser(
        description="JIT vs pure-numpy kernel timings")
    parser.add_argument("--d", type=int, default=64)
    parser.add_argument("--d-hid", dest="d_hid", type=int, default=32)
    parser.add_argument("--m", type=int, default=12)
    parser.add_argument("--alpha", type=float, default=0.2)
    parser.add_argument("--n-words", dest="n_words", type=int, default=65536)
    parser.add_argument("--repeats", type=int, default=200)
    args = parser.parse_args()

    if not NUMBA_ENABLED:
        print("numba path disabled (ENSAD_NUMBA=0 or numba missing); "
              "nothing to compare")
        return

    rows = bench_adapter(args.d, args.d_hid, args.m, args.alpha,
                         args.repeats)
    rows += bench_rng(args.n_words, args.repeats)

    print(f"{'kernel':<20} {'jit (us)':>10} {'numpy (us)':>11} "
          f"{'speedup':>8} {'max |diff|':>11}")
    for name, jit_t, py_t, dev in rows:
        print(f"{name:<20} {jit_t * 1e6:>10.1f} {py_t * 1e6:>11.1f} "
              f"{py_t / jit_t:>8.2f} {dev:>11.2e}")


if __name__ == "__main__":
    main()

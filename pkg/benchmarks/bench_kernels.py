"""Compiled Cython kernels vs the numpy fallback.

Times the three array kernels behind netagg.fixedpoint at a few payload
sizes and checks that both backends produce identical words. Run with

    python3 benchmarks/bench_kernels.py [--sizes 1024,65536,1048576] [--repeat 7]

The backends are imported directly, so this works regardless of the
NETAGG_PURE_PYTHON setting of the surrounding environment.
"""

import argparse
import timeit

import numpy as np

from netagg import _kernels_py

try:
    from netagg import _kernels
except ImportError:
    _kernels = None

FRAC_BITS = 16


def check_agreement(rng: np.random.Generator, n: int) -> None:
    x = rng.uniform(-40000.0, 40000.0, n)
    qa = np.empty(n, dtype=np.int32)
    qb = np.empty(n, dtype=np.int32)
    _kernels.quantize_f64_i32(x, FRAC_BITS, qa)
    _kernels_py.quantize_f64_i32(x, FRAC_BITS, qb)
    if not np.array_equal(qa, qb):
        raise AssertionError("quantize: backends disagree")

    da = np.empty(n, dtype=np.float64)
    db = np.empty(n, dtype=np.float64)
    _kernels.dequantize_i32_f64(qa, FRAC_BITS, da)
    _kernels_py.dequantize_i32_f64(qa, FRAC_BITS, db)
    if not np.array_equal(da, db):
        raise AssertionError("dequantize: backends disagree")

    # include values near the rails so saturation paths are exercised
    a = rng.integers(-(1 << 31), 1 << 31, n, dtype=np.int64).astype(np.int32)
    b = rng.integers(-(1 << 31), 1 << 31, n, dtype=np.int64).astype(np.int32)
    sa, sb = a.copy(), a.copy()
    _kernels.saturating_acc_i32(sa, b)
    _kernels_py.saturating_acc_i32(sb, b)
    if not np.array_equal(sa, sb):
        raise AssertionError("saturating_acc: backends disagree")


def bench_one(label, fn, repeat, number) -> float:
    best = min(timeit.repeat(fn, repeat=repeat, number=number))
    return best / number


def run(sizes, repeat) -> None:
    rng = np.random.default_rng(0)
    backends = [("numpy", _kernels_py)]
    if _kernels is not None:
        backends.insert(0, ("compiled", _kernels))
        check_agreement(rng, 65536)
        print("backend agreement on 65536 words: ok")
    else:
        print("compiled kernels not built; timing the numpy fallback only")

    header = f"{'kernel':<18}{'words':>10}" + "".join(
        f"{name + ' (us)':>16}" for name, _ in backends
    )
    if len(backends) == 2:
        header += f"{'speedup':>10}"
    print(header)

    for n in sizes:
        x = rng.uniform(-100.0, 100.0, n)
        q = np.empty(n, dtype=np.int32)
        f = np.empty(n, dtype=np.float64)
        src = rng.integers(-(1 << 20), 1 << 20, n, dtype=np.int64).astype(np.int32)
        acc = src.copy()
        number = max(1, (1 << 22) // n)

        cases = [
            ("quantize", lambda impl: impl.quantize_f64_i32(x, FRAC_BITS, q)),
            ("dequantize", lambda impl: impl.dequantize_i32_f64(q, FRAC_BITS, f)),
            ("saturating_acc", lambda impl: impl.saturating_acc_i32(acc, src)),
        ]
        for kernel, call in cases:
            times = [
                bench_one(kernel, (lambda impl=impl: call(impl)), repeat, number)
                for _, impl in backends
            ]
            row = f"{kernel:<18}{n:>10}" + "".join(f"{t * 1e6:>16.2f}" for t in times)
            if len(times) == 2:
                row += f"{times[1] / times[0]:>9.2f}x"
            print(row)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", default="1024,65536,1048576",
                    help="comma-separated word counts")
    ap.add_argument("--repeat", type=int, default=7, help="timeit repeats")
    args = ap.parse_args()
    sizes = [int(s) for s in args.sizes.split(",") if s]
    run(sizes, args.repeat)


if __name__ == "__main__":
    main()

"""Pure-numpy fallback for the compiled kernels.

Same call signatures as the Cython module so netagg.fixedpoint can swap the
two transparently.
"""

import numpy as np

INT32_MIN = -(1 << 31)
INT32_MAX = (1 << 31) - 1


def saturating_acc_i32(acc: np.ndarray, src: np.ndarray) -> None:
    if acc.shape != src.shape:
        raise ValueError("length mismatch")
    wide = acc.astype(np.int64)
    wide += src
    np.clip(wide, INT32_MIN, INT32_MAX, out=wide)
    acc[:] = wide


def quantize_f64_i32(x: np.ndarray, frac_bits: int, out: np.ndarray) -> None:
    if x.shape != out.shape:
        raise ValueError("length mismatch")
    if not np.all(np.isfinite(x)):
        raise ValueError("cannot quantize a non-finite value")
    scaled = np.rint(np.ldexp(x, frac_bits))
    np.clip(scaled, float(INT32_MIN), float(INT32_MAX), out=scaled)
    out[:] = scaled.astype(np.int64)


def dequantize_i32_f64(raw: np.ndarray, frac_bits: int, out: np.ndarray) -> None:
    if raw.shape != out.shape:
        raise ValueError("length mismatch")
    out[:] = np.ldexp(raw.astype(np.float64), -frac_bits)

"""32-bit fixed-point gradient representation.

A word is a two's-complement int32 with an implied scale of 2**-frac_bits;
frac_bits is constant for a run (default 16). Quantization rounds half to
even and clamps to the int32 range; addition saturates at the range limits.
For inputs whose exact sum stays in range, saturating addition equals exact
addition, so aggregation is commutative and associative there.

Array operations dispatch to the compiled Cython kernels when built, else to
the numpy fallback. Set NETAGG_PURE_PYTHON=1 to force the fallback.
"""

from __future__ import annotations

import math
import os

import numpy as np

INT32_MIN = -(1 << 31)
INT32_MAX = (1 << 31) - 1
DEFAULT_FRAC_BITS = 16

if os.environ.get("NETAGG_PURE_PYTHON", "").strip() not in ("", "0"):
    from . import _kernels_py as _impl

    _BACKEND = "python"
else:
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        _BACKEND = "compiled"
    except ImportError:
        from . import _kernels_py as _impl  # type: ignore[no-redef]

        _BACKEND = "python"


def backend() -> str:
    """Name of the kernel backend selected at import: compiled or python."""
    return _BACKEND


def _check_frac_bits(frac_bits: int) -> None:
    if not 0 <= frac_bits <= 30:
        raise ValueError(f"frac_bits must be in [0, 30]: {frac_bits}")


def quantize(x: float, frac_bits: int = DEFAULT_FRAC_BITS) -> int:
    """Scalar float -> raw fixed-point word."""
    _check_frac_bits(frac_bits)
    if not math.isfinite(x):
        raise ValueError(f"cannot quantize a non-finite value: {x!r}")
    scaled = round(x * (1 << frac_bits))  # round() is half-to-even on floats
    return min(max(scaled, INT32_MIN), INT32_MAX)


def dequantize(raw: int, frac_bits: int = DEFAULT_FRAC_BITS) -> float:
    """Raw fixed-point word -> float."""
    _check_frac_bits(frac_bits)
    if not INT32_MIN <= raw <= INT32_MAX:
        raise ValueError(f"raw word out of int32 range: {raw}")
    return math.ldexp(raw, -frac_bits)


def saturating_add(a: int, b: int) -> int:
    """Scalar saturating int32 addition."""
    for v in (a, b):
        if not INT32_MIN <= v <= INT32_MAX:
            raise ValueError(f"raw word out of int32 range: {v}")
    return min(max(a + b, INT32_MIN), INT32_MAX)


def quantize_array(x: np.ndarray, frac_bits: int = DEFAULT_FRAC_BITS) -> np.ndarray:
    _check_frac_bits(frac_bits)
    x = np.ascontiguousarray(x, dtype=np.float64)
    out = np.empty(x.shape, dtype=np.int32)
    _impl.quantize_f64_i32(x, frac_bits, out)
    return out


def dequantize_array(raw: np.ndarray, frac_bits: int = DEFAULT_FRAC_BITS) -> np.ndarray:
    _check_frac_bits(frac_bits)
    raw = np.ascontiguousarray(raw, dtype=np.int32)
    out = np.empty(raw.shape, dtype=np.float64)
    _impl.dequantize_i32_f64(raw, frac_bits, out)
    return out


def saturating_accumulate(acc: np.ndarray, src: np.ndarray) -> None:
    """acc += src elementwise with int32 saturation, in place."""
    if acc.dtype != np.int32 or not acc.flags.c_contiguous:
        raise ValueError("acc must be a contiguous int32 array")
    src = np.ascontiguousarray(src, dtype=np.int32)
    _impl.saturating_acc_i32(acc, src)


def saturating_add_arrays(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(a, dtype=np.int32).copy()
    saturating_accumulate(out, b)
    return out


def words_to_bytes(words: np.ndarray) -> bytes:
    """Payload words as they appear on the wire: big-endian 32-bit ints."""
    return np.ascontiguousarray(words, dtype=np.int32).astype(">i4").tobytes()


def bytes_to_words(data: bytes) -> np.ndarray:
    if len(data) % 4:
        raise ValueError(f"payload length {len(data)} not a multiple of 4")
    return np.frombuffer(data, dtype=">i4").astype(np.int32)

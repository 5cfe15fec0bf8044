# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels for fixed-point payload arithmetic.

Mirrors the pure-numpy implementations in _kernels_py; netagg.fixedpoint
selects whichever backend is available at import time.
"""

from libc.math cimport isfinite, ldexp, rint
from libc.stdint cimport int32_t, int64_t

INT32_MIN = -2147483648
INT32_MAX = 2147483647

cdef int64_t _MIN = -2147483648
cdef int64_t _MAX = 2147483647


def saturating_acc_i32(int32_t[::1] acc, const int32_t[::1] src):
    """acc[i] = clamp(acc[i] + src[i]) in place."""
    cdef Py_ssize_t i, n = acc.shape[0]
    cdef int64_t s
    if src.shape[0] != n:
        raise ValueError("length mismatch")
    for i in range(n):
        s = <int64_t> acc[i] + <int64_t> src[i]
        if s > _MAX:
            s = _MAX
        elif s < _MIN:
            s = _MIN
        acc[i] = <int32_t> s


def quantize_f64_i32(const double[::1] x, int frac_bits, int32_t[::1] out):
    """out[i] = clamp(round_half_even(x[i] * 2**frac_bits))."""
    cdef Py_ssize_t i, n = x.shape[0]
    # multiplying by an exact power of two matches ldexp bit for bit
    cdef double scale = ldexp(1.0, frac_bits)
    cdef double scaled
    if out.shape[0] != n:
        raise ValueError("length mismatch")
    for i in range(n):
        if not isfinite(x[i]):
            raise ValueError("cannot quantize a non-finite value")
        scaled = rint(x[i] * scale)
        if scaled > <double> _MAX:
            out[i] = <int32_t> _MAX
        elif scaled < <double> _MIN:
            out[i] = <int32_t> _MIN
        else:
            out[i] = <int32_t> (<int64_t> scaled)


def dequantize_i32_f64(const int32_t[::1] raw, int frac_bits, double[::1] out):
    """out[i] = raw[i] * 2**-frac_bits."""
    cdef Py_ssize_t i, n = raw.shape[0]
    cdef double scale = ldexp(1.0, -frac_bits)
    if out.shape[0] != n:
        raise ValueError("length mismatch")
    for i in range(n):
        out[i] = raw[i] * scale

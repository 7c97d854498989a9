"""Hot loops of the subband convolution scheme.

Every block of the filter-bank operator has the form

    out[y] = sum_x F[a*y - b*x + c] * W[x]            (2D, per axis)

with ``(a, b) = (1, 2**delta)`` when the operand is upsampled,
``(2**delta, 1)`` when the result is downsampled and ``(1, 1)`` otherwise.
``c`` is the position of the filter's zero offset.  The three kernels here
evaluate that map, its transpose and its derivative with respect to ``F``
on a batch of operands of shape ``(B, n, n)``.

Two backends exist.  The numba one loops directly over the nonzero taps and
is used when few taps touch each output; the numpy one goes through zero
insertion and FFT convolution.  Dense cases take the FFT route either way.  Setting the
environment variable ``PSIDO_DISABLE_NUMBA=1`` forces the numpy backend.
"""

from __future__ import annotations

import os

import numpy as np
from scipy.signal import fftconvolve

_DISABLED = os.environ.get("PSIDO_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes")

try:
    if _DISABLED:
        raise ImportError
    from numba import njit
except ImportError:
    njit = None

BACKEND = "numpy" if njit is None else "numba"

# Direct loops beat FFT convolution while the taps per output, about
# f0*f1 / (a*b)**2, stay below these limits (measured on 32x32 and 64x64 operands).
DIRECT_MAX_TAPS = 8.0
DIRECT_MAX_TAPS_GRAD = 60.0
# Below this many multiply-adds per call the FFT path's fixed overhead dominates.
DIRECT_MAX_WORK = 4e4


# numpy reference path ------------------------------------------------------

def zero_insert(x, factor):
    """Zero-insertion upsampling by ``factor`` along the last two axes."""
    if factor == 1:
        return x
    n0, n1 = x.shape[-2:]
    out = np.zeros(x.shape[:-2] + (n0 * factor, n1 * factor))
    out[..., ::factor, ::factor] = x
    return out


def _window(full, start0, start1, n0, n1):
    """``full[..., start0:start0+n0, start1:start1+n1]`` with zero fill outside."""
    out = np.zeros(full.shape[:-2] + (n0, n1))
    m0, m1 = full.shape[-2:]
    s0, e0 = max(start0, 0), min(start0 + n0, m0)
    s1, e1 = max(start1, 0), min(start1 + n1, m1)
    if s0 < e0 and s1 < e1:
        out[..., s0 - start0:e0 - start0, s1 - start1:e1 - start1] = full[..., s0:e0, s1:e1]
    return out


def _full_conv(x, y):
    # broadcast the lower-rank argument over the other's leading axes
    if x.ndim < y.ndim:
        x = x.reshape((1,) * (y.ndim - x.ndim) + x.shape)
    elif y.ndim < x.ndim:
        y = y.reshape((1,) * (x.ndim - y.ndim) + y.shape)
    return fftconvolve(x, y, mode="full", axes=(-2, -1))


def sconv_np(F, c, W, a, b):
    n_out = W.shape[-1] * b // a
    full = _full_conv(F, zero_insert(W, b))
    return _window(full, c[0], c[1], n_out * a, n_out * a)[..., ::a, ::a]


def sconv_t_np(F, c, Y, a, b):
    n_in = Y.shape[-1] * a // b
    Fl = F[::-1, ::-1]
    f0, f1 = F.shape
    full = _full_conv(Fl, zero_insert(Y, a))
    return _window(full, f0 - 1 - c[0], f1 - 1 - c[1], n_in * b, n_in * b)[..., ::b, ::b]


def sconv_df_np(Y, W, a, b, c, fshape):
    Yu = zero_insert(Y, a)
    A = zero_insert(W, b)
    nA0, nA1 = A.shape[-2:]
    full = fftconvolve(Yu, A[..., ::-1, ::-1], mode="full", axes=(-2, -1))
    if full.ndim > 2:
        full = full.reshape((-1,) + full.shape[-2:]).sum(axis=0)
    return _window(full, nA0 - 1 - c[0], nA1 - 1 - c[1], fshape[0], fshape[1])


# numba path ------------------------------------------------------------------

if njit is not None:

    @njit(cache=True)
    def _range(y, a, b, c, f, n_in):
        # x with 0 <= a*y - b*x + c < f and 0 <= x < n_in
        num_hi = a * y + c
        num_lo = a * y + c - f + 1
        x_lo = -((-num_lo) // b)
        x_hi = num_hi // b
        if x_lo < 0:
            x_lo = 0
        if x_hi > n_in - 1:
            x_hi = n_in - 1
        return x_lo, x_hi

    @njit(cache=True)
    def _sconv_nb(F, c0, c1, W, a, b, out):
        nb, n_in, _ = W.shape
        n_out = out.shape[1]
        f0, f1 = F.shape
        for k in range(nb):
            for y0 in range(n_out):
                xl0, xh0 = _range(y0, a, b, c0, f0, n_in)
                for y1 in range(n_out):
                    xl1, xh1 = _range(y1, a, b, c1, f1, n_in)
                    s = 0.0
                    for x0 in range(xl0, xh0 + 1):
                        i0 = a * y0 - b * x0 + c0
                        base = a * y1 + c1
                        for x1 in range(xl1, xh1 + 1):
                            s += F[i0, base - b * x1] * W[k, x0, x1]
                    out[k, y0, y1] = s

    @njit(cache=True)
    def _sconv_t_nb(F, c0, c1, Y, a, b, out):
        nb, n_out, _ = Y.shape
        n_in = out.shape[1]
        f0, f1 = F.shape
        for k in range(nb):
            for y0 in range(n_out):
                xl0, xh0 = _range(y0, a, b, c0, f0, n_in)
                for y1 in range(n_out):
                    xl1, xh1 = _range(y1, a, b, c1, f1, n_in)
                    v = Y[k, y0, y1]
                    if v == 0.0:
                        continue
                    base = a * y1 + c1
                    for x0 in range(xl0, xh0 + 1):
                        i0 = a * y0 - b * x0 + c0
                        for x1 in range(xl1, xh1 + 1):
                            out[k, x0, x1] += F[i0, base - b * x1] * v

    @njit(cache=True)
    def _sconv_df_nb(Y, W, a, b, c0, c1, out):
        nb, n_out, _ = Y.shape
        n_in = W.shape[1]
        f0, f1 = out.shape
        for k in range(nb):
            for y0 in range(n_out):
                xl0, xh0 = _range(y0, a, b, c0, f0, n_in)
                for y1 in range(n_out):
                    xl1, xh1 = _range(y1, a, b, c1, f1, n_in)
                    v = Y[k, y0, y1]
                    if v == 0.0:
                        continue
                    base = a * y1 + c1
                    for x0 in range(xl0, xh0 + 1):
                        i0 = a * y0 - b * x0 + c0
                        for x1 in range(xl1, xh1 + 1):
                            out[i0, base - b * x1] += v * W[k, x0, x1]

    @njit(cache=True)
    def _soft_nb(x, g, out):
        flat = x.ravel()
        res = out.ravel()
        if g >= 0.0:
            for i in range(flat.size):
                v = flat[i]
                if v > g:
                    res[i] = v - g
                elif v < -g:
                    res[i] = v + g
                else:
                    res[i] = 0.0
        else:
            for i in range(flat.size):
                v = flat[i]
                res[i] = v - g if v >= 0.0 else v + g


def _as3(x):
    x = np.ascontiguousarray(x, dtype=np.float64)
    return x.reshape((-1,) + x.shape[-2:]), x.shape[:-2]


def _direct(fshape, a, b, limit, batch, n_in):
    if njit is None:
        return False
    taps = fshape[0] * fshape[1]
    return taps <= limit * (a * b) ** 2 or batch * n_in**2 * taps <= DIRECT_MAX_WORK * a**2


def sconv(F, c, W, a, b):
    """``out[y] = sum_x F[a*y - b*x + c] W[x]`` over the last two axes of ``W``."""
    W3, lead = _as3(W)
    if not _direct(F.shape, a, b, DIRECT_MAX_TAPS, W3.shape[0], W3.shape[1]):
        return sconv_np(F, c, W, a, b)
    n_out = W3.shape[1] * b // a
    out = np.zeros((W3.shape[0], n_out, n_out))
    _sconv_nb(np.ascontiguousarray(F, dtype=np.float64), int(c[0]), int(c[1]), W3, a, b, out)
    return out.reshape(lead + (n_out, n_out))


def sconv_t(F, c, Y, a, b):
    """Transpose of :func:`sconv` applied to ``Y``."""
    Y3, lead = _as3(Y)
    n_in = Y3.shape[1] * a // b
    if not _direct(F.shape, a, b, DIRECT_MAX_TAPS, Y3.shape[0], n_in):
        return sconv_t_np(F, c, Y, a, b)
    out = np.zeros((Y3.shape[0], n_in, n_in))
    _sconv_t_nb(np.ascontiguousarray(F, dtype=np.float64), int(c[0]), int(c[1]), Y3, a, b, out)
    return out.reshape(lead + (n_in, n_in))


def sconv_df(Y, W, a, b, c, fshape):
    """Gradient of ``<Y, sconv(F, c, W, a, b)>`` with respect to ``F``, summed over the batch."""
    Y3, _ = _as3(Y)
    W3, _ = _as3(W)
    if not _direct(fshape, a, b, DIRECT_MAX_TAPS_GRAD, W3.shape[0], W3.shape[1]):
        return sconv_df_np(Y, W, a, b, c, fshape)
    out = np.zeros(fshape)
    _sconv_df_nb(Y3, W3, a, b, int(c[0]), int(c[1]), out)
    return out


def soft_threshold_np(x, gamma):
    x = np.asarray(x, dtype=float)
    if gamma >= 0:
        return np.sign(x) * np.maximum(np.abs(x) - gamma, 0.0)
    return np.where(x >= 0, x - gamma, x + gamma)


def soft_threshold(x, gamma):
    x = np.asarray(x, dtype=float)
    if njit is None or x.size < 4096:
        return soft_threshold_np(x, gamma)
    x = np.ascontiguousarray(x)
    out = np.empty_like(x)
    _soft_nb(x, float(gamma), out)
    return out

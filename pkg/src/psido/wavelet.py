"""Orthogonal periodic 2D wavelet transforms with subband bookkeeping.

Coefficients are kept in the standard packed pyramid layout: for a side
``2**J`` image, subband ``(j, t)`` occupies a ``2**j x 2**j`` block,

* ``f``: ``[0:2**J0, 0:2**J0]`` (only at ``j == J0``)
* ``v``: ``[0:2**j, 2**j:2**(j+1)]``, lowpass along rows, highpass along columns
* ``h``: ``[2**j:2**(j+1), 0:2**j]``
* ``d``: ``[2**j:2**(j+1), 2**j:2**(j+1)]``

All transforms accept leading batch axes.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import pywt

from .errors import InvalidArgument

FAMILIES = ("haar", "db2", "db3", "db4")
TYPES = ("v", "h", "d")


def is_power_of_two(n):
    return isinstance(n, (int, np.integer)) and n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class WaveletSpec:
    family: str = "haar"
    J: int = 6
    J0: int = 3

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise InvalidArgument(f"unknown wavelet family {self.family!r}")
        if not (2 <= self.J0 < self.J):
            raise InvalidArgument(f"need 2 <= J0 < J, got J0={self.J0}, J={self.J}")

    @property
    def side(self):
        return 2 ** self.J

    @property
    def levels(self):
        return self.J - self.J0

    def subbands(self):
        """Subband keys ``(j, t)``, coarse to fine, ``f`` first."""
        keys = [(self.J0, "f")]
        for j in range(self.J0, self.J):
            keys.extend((j, t) for t in TYPES)
        return keys

    def slices(self, key):
        j, t = key
        n = 2 ** j
        if t == "f":
            if j != self.J0:
                raise InvalidArgument(f"type f only exists at j={self.J0}")
            return slice(0, n), slice(0, n)
        if not (self.J0 <= j < self.J) or t not in TYPES:
            raise InvalidArgument(f"no subband {key!r} for {self}")
        lo, hi = slice(0, n), slice(n, 2 * n)
        return {"v": (lo, hi), "h": (hi, lo), "d": (hi, hi)}[t]

    def doubled(self):
        """Spec of the same family on an object twice as large."""
        return WaveletSpec(self.family, self.J + 1, self.J0 + 1)

    def descriptor(self):
        return {"family": self.family, "J": self.J, "J0": self.J0}


class WaveletCoeffs:
    """Packed coefficient array together with its spec."""

    __slots__ = ("data", "spec")

    def __init__(self, data, spec):
        data = np.asarray(data, dtype=float)
        if data.shape[-2:] != (spec.side, spec.side):
            raise InvalidArgument(
                f"coefficient array shape {data.shape} does not match side {spec.side}")
        self.data = data
        self.spec = spec

    def subband(self, key):
        r, c = self.spec.slices(key)
        return self.data[..., r, c]

    def set_subband(self, key, values):
        r, c = self.spec.slices(key)
        self.data[..., r, c] = values

    def as_dict(self):
        return {key: self.subband(key) for key in self.spec.subbands()}

    @classmethod
    def zeros(cls, spec, batch=()):
        return cls(np.zeros(tuple(batch) + (spec.side, spec.side)), spec)

    @classmethod
    def from_dict(cls, subbands, spec):
        expected = set(spec.subbands())
        if set(subbands) != expected:
            raise InvalidArgument("subband map keys do not match the WaveletSpec layout")
        out = None
        for key, values in subbands.items():
            values = np.asarray(values, dtype=float)
            n = 2 ** key[0]
            if values.shape[-2:] != (n, n):
                raise InvalidArgument(f"subband {key} must be {n}x{n}, got {values.shape}")
            if out is None:
                out = cls.zeros(spec, values.shape[:-2])
            out.set_subband(key, values)
        return out

    def copy(self):
        return WaveletCoeffs(self.data.copy(), self.spec)

    def __repr__(self):
        return f"WaveletCoeffs(shape={self.data.shape}, spec={self.spec})"


def _check_image(image, spec):
    image = np.asarray(image, dtype=float)
    if image.ndim < 2 or image.shape[-2:] != (spec.side, spec.side):
        raise InvalidArgument(
            f"image of shape {image.shape} does not match wavelet side {spec.side}")
    return image


def dwt2(image, spec):
    """Forward transform; returns :class:`WaveletCoeffs`."""
    return WaveletCoeffs(dwt2_array(_check_image(image, spec), spec), spec)


def idwt2(coeffs, spec=None):
    """Inverse (and adjoint) transform of packed coefficients."""
    if isinstance(coeffs, WaveletCoeffs):
        spec, data = coeffs.spec, coeffs.data
    else:
        if spec is None:
            raise InvalidArgument("a spec is required for raw coefficient arrays")
        data = np.asarray(coeffs, dtype=float)
        if data.shape[-2:] != (spec.side, spec.side):
            raise InvalidArgument(f"coefficient array {data.shape} does not match spec")
    return idwt2_array(data, spec)


def dwt2_array(image, spec):
    with warnings.catch_warnings():
        # short Daubechies filters wrap around small periodic grids; that is intended
        warnings.simplefilter("ignore", UserWarning)
        parts = pywt.wavedec2(image, spec.family, mode="periodization",
                              level=spec.levels, axes=(-2, -1))
    out = np.empty(image.shape)
    n0 = 2 ** spec.J0
    out[..., :n0, :n0] = parts[0]
    for j, (ch, cv, cd) in zip(range(spec.J0, spec.J), parts[1:]):
        n = 2 ** j
        out[..., :n, n:2 * n] = cv
        out[..., n:2 * n, :n] = ch
        out[..., n:2 * n, n:2 * n] = cd
    return out


def idwt2_array(data, spec):
    n0 = 2 ** spec.J0
    parts = [data[..., :n0, :n0]]
    for j in range(spec.J0, spec.J):
        n = 2 ** j
        parts.append((data[..., n:2 * n, :n], data[..., :n, n:2 * n],
                      data[..., n:2 * n, n:2 * n]))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        return pywt.waverec2(parts, spec.family, mode="periodization", axes=(-2, -1))


def basis_function(spec, key, index):
    """Image of the basis function for subband ``key`` at position ``index``."""
    coeffs = WaveletCoeffs.zeros(spec)
    r, c = spec.slices(key)
    coeffs.data[r.start + index[0], c.start + index[1]] = 1.0
    return idwt2(coeffs)


def vanishing_moment_check(spec, atol=1e-12):
    """Per type, whether the discrete basis function sums to zero.

    Returns ``{type: (vanishes, sum)}`` using the basis function at the
    centre of the coarsest subband of each type.
    """
    report = {}
    mid = 2 ** (spec.J0 - 1)
    for t in ("f",) + TYPES:
        total = float(basis_function(spec, (spec.J0, t), (mid, mid)).sum())
        report[t] = (abs(total) <= atol, total)
    return report

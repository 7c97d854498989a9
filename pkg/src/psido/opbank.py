"""Wavelet-domain convolutional representation of the normal operator.

The operator ``K = W R*R W*`` splits into blocks between subbands
``(j, t) -> (j', t')``.  Each block is a convolution with a filter of side
``2**(max(j, j') + 1) - 1`` whose middle entry is offset zero, combined with
zero-insertion of the operand when ``j < j'`` or decimation of the result
when ``j > j'``.  Filters are read off impulse responses of objects twice
the image size so that every offset an image-sized operand can reach is
recorded.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as kern
from .errors import InvalidArgument
from .tomo import backproject, normal_operator, radon
from .wavelet import WaveletCoeffs, WaveletSpec, dwt2_array, idwt2_array

MODES = ("exact", "fast")
DENSE_MAX_J = 5


def bank_keys(spec):
    subs = spec.subbands()
    return [(s, t) for s in subs for t in subs]


def filter_side(key):
    (j, _), (jp, _) = key
    return 2 ** (max(j, jp) + 1) - 1


def strides(key):
    """``(a, b)`` such that block ``key`` is ``out[y] = sum_x F[a y - b x + c] W[x]``."""
    (j, _), (jp, _) = key
    return 2 ** max(0, j - jp), 2 ** max(0, jp - j)


def _check_key(spec, key):
    try:
        (s, t) = key
        spec.slices(s), spec.slices(t)
    except (TypeError, ValueError) as exc:
        raise InvalidArgument(f"malformed filter key {key!r}") from exc


# elementary operations ---------------------------------------------------------

def conv2_centered(filt, image):
    """Same-size 2D convolution with a centre-indexed odd filter, zero extension."""
    filt = np.asarray(filt, dtype=float)
    image = np.asarray(image, dtype=float)
    if filt.ndim != 2 or filt.shape[0] % 2 == 0 or filt.shape[1] % 2 == 0:
        raise InvalidArgument(f"filter must be odd-sided, got {filt.shape}")
    c = (filt.shape[0] // 2, filt.shape[1] // 2)
    return kern.sconv(filt, c, image, 1, 1)


def upsample(x, eta):
    """Zero insertion: entry ``k`` moves to ``2**eta * k``, the rest is zero."""
    if eta < 1:
        raise InvalidArgument("eta must be at least 1")
    return kern.zero_insert(np.asarray(x, dtype=float), 2 ** eta)


def downsample(x, eta):
    """Keep entries whose indices are multiples of ``2**eta``."""
    x = np.asarray(x, dtype=float)
    step = 2 ** eta
    if eta < 1:
        raise InvalidArgument("eta must be at least 1")
    if x.shape[-1] % step or x.shape[-2] % step:
        raise InvalidArgument(f"side {x.shape[-2:]} not divisible by {step}")
    return x[..., ::step, ::step]


# filter banks ------------------------------------------------------------------

@dataclass
class FilterBank:
    """Filters ``key -> array`` with zero-offset positions ``centers``.

    ``centers`` defaults to the middle entry.  A bank of full-size filters
    carries the geometry hash and impulse-object side it was built from.
    """

    spec: WaveletSpec
    filters: dict
    geometry_hash: bytes = b"\0" * 32
    construction_side: int = 0
    centers: dict = field(default=None)

    def __post_init__(self):
        expected = set(bank_keys(self.spec))
        if set(self.filters) != expected:
            raise InvalidArgument(
                f"bank needs exactly {len(expected)} filters keyed by subband pairs")
        self.filters = {k: np.asarray(v, dtype=float) for k, v in self.filters.items()}
        if self.centers is None:
            self.centers = {k: (v.shape[0] // 2, v.shape[1] // 2) for k, v in self.filters.items()}
        self._derived = {}

    @property
    def keys(self):
        return list(self.filters)

    def __len__(self):
        return len(self.filters)

    def hash(self):
        """SHA-256 over spec, geometry hash and filters in canonical order."""
        h = hashlib.sha256()
        h.update(repr(self.spec.descriptor()).encode())
        h.update(self.geometry_hash)
        for key in bank_keys(self.spec):
            f = self.filters[key]
            h.update(repr((key, f.shape, self.centers[key])).encode())
            h.update(np.ascontiguousarray(f, dtype="<f8").tobytes())
        return h.digest()

    def fast_filter(self, key):
        """Filter and centre used by the fast path of a decimating block."""
        if key not in self._derived:
            a, _ = strides(key)
            f = self.filters[key]
            c0, c1 = self.centers[key]
            self._derived[key] = (np.ascontiguousarray(f[c0 % a::a, c1 % a::a]), (c0 // a, c1 // a))
        return self._derived[key]


def _operand(spec, data, key):
    r, c = spec.slices(key)
    return data[..., r, c]


def _block_forward(bank, key, w, mode):
    a, b = strides(key)
    if a > 1 and mode == "fast":
        f, c = bank.fast_filter(key)
        return kern.sconv(f, c, w[..., ::a, ::a], 1, 1)
    return kern.sconv(bank.filters[key], bank.centers[key], w, a, b)


def _block_transpose(bank, key, y, mode):
    a, b = strides(key)
    if a > 1 and mode == "fast":
        f, c = bank.fast_filter(key)
        return kern.zero_insert(kern.sconv_t(f, c, y, 1, 1), a)
    return kern.sconv_t(bank.filters[key], bank.centers[key], y, a, b)


def _block_filter_grad(bank, key, y_grad, w, mode):
    a, b = strides(key)
    f = bank.filters[key]
    if a > 1 and mode == "fast":
        sub, c = bank.fast_filter(key)
        g = kern.sconv_df(y_grad, w[..., ::a, ::a], 1, 1, c, sub.shape)
        out = np.zeros(f.shape)
        c0, c1 = bank.centers[key]
        out[c0 % a::a, c1 % a::a] = g
        return out
    return kern.sconv_df(y_grad, w, a, b, bank.centers[key], f.shape)


def _check_mode(mode):
    if mode not in MODES:
        raise InvalidArgument(f"mode must be one of {MODES}, got {mode!r}")


def apply_block(bank, key, subband, mode="exact"):
    """Action of one block on a ``2**j x 2**j`` subband."""
    _check_mode(mode)
    if key not in bank.filters:
        raise InvalidArgument(f"bank has no filter {key!r}")
    subband = np.asarray(subband, dtype=float)
    n = 2 ** key[0][0]
    if subband.shape[-2:] != (n, n):
        raise InvalidArgument(f"block {key} expects {n}x{n} input, got {subband.shape}")
    return _block_forward(bank, key, subband, mode)


def _raw(coeffs, spec):
    if isinstance(coeffs, WaveletCoeffs):
        if coeffs.spec != spec:
            raise InvalidArgument("coefficient spec does not match the bank")
        return coeffs.data, True
    data = np.asarray(coeffs, dtype=float)
    if data.shape[-2:] != (spec.side, spec.side):
        raise InvalidArgument(f"coefficient array {data.shape} does not match the bank")
    return data, False


def apply_operator(bank, coeffs, mode="exact"):
    """Sum of all block actions, reassembled into packed coefficients.

    Accepts :class:`WaveletCoeffs` or raw packed arrays (with batch axes) and
    returns the same kind.
    """
    _check_mode(mode)
    spec = bank.spec
    data, wrapped = _raw(coeffs, spec)
    out = np.zeros(data.shape)
    for key in bank.filters:
        src, dst = key
        r, c = spec.slices(dst)
        out[..., r, c] += _block_forward(bank, key, _operand(spec, data, src), mode)
    return WaveletCoeffs(out, spec) if wrapped else out


def apply_transpose(bank, coeffs, mode="exact"):
    """Adjoint of :func:`apply_operator` for the same bank and mode."""
    _check_mode(mode)
    spec = bank.spec
    data, wrapped = _raw(coeffs, spec)
    out = np.zeros(data.shape)
    for key in bank.filters:
        src, dst = key
        r, c = spec.slices(src)
        out[..., r, c] += _block_transpose(bank, key, _operand(spec, data, dst), mode)
    return WaveletCoeffs(out, spec) if wrapped else out


def filter_gradients(bank, out_grad, operand, mode="exact"):
    """Gradient of ``<out_grad, apply_operator(bank, operand)>`` per filter.

    Batch axes of both arrays are summed over.
    """
    _check_mode(mode)
    spec = bank.spec
    return {key: _block_filter_grad(bank, key, _operand(spec, out_grad, key[1]),
                                    _operand(spec, operand, key[0]), mode)
            for key in bank.filters}


# construction --------------------------------------------------------------------

def _fill(filt, resp, k_src, a, b):
    """``filt[c + a*k' - b*k_src] = resp[k']`` wherever the index is inside."""
    c = filt.shape[0] // 2
    idx = []
    for axis in range(2):
        kp = np.arange(resp.shape[axis])
        pos = c + a * kp - b * k_src[axis]
        idx.append(pos)
    v0 = (idx[0] >= 0) & (idx[0] < filt.shape[0])
    v1 = (idx[1] >= 0) & (idx[1] < filt.shape[1])
    filt[np.ix_(idx[0][v0], idx[1][v1])] = resp[np.ix_(v0, v1)]


def build_filter_bank(geom, spec, construction="doubled"):
    """Read the filters off impulse responses of ``W R*R W*``.

    With ``construction="doubled"`` (the default) the impulses live in objects
    of side ``2**(J+1)``; subband ``(j, t)`` of the image corresponds to
    subband ``(j+1, t)`` of the object, and the impulse sits at index
    ``2**j`` of that ``2**(j+1)`` grid.  Decimating blocks need one impulse per
    polyphase component, shifted by ``phi`` in ``[0, 2**delta)`` per axis.

    ``construction="same"`` uses image-sized objects with the impulse at the
    subband centre ``2**(j-1)``.  It cannot see every offset and is kept only
    for comparison.
    """
    if geom.image_side != spec.side:
        raise InvalidArgument(f"geometry side {geom.image_side} != wavelet side {spec.side}")
    if construction == "doubled":
        ospec, shift = spec.doubled(), 1
    elif construction == "same":
        ospec, shift = spec, 0
    else:
        raise InvalidArgument(f"unknown construction {construction!r}")
    op = normal_operator(geom.with_side(ospec.side))
    subs = spec.subbands()
    filters = {}
    for src in subs:
        j, t = src
        depth = j - spec.J0
        phases = [(p0, p1) for p0 in range(2 ** depth) for p1 in range(2 ** depth)]
        obj_src = (j + shift, t)
        r, c = ospec.slices(obj_src)
        base = 2 ** (j + shift - 1)
        impulses = np.zeros((len(phases), ospec.side, ospec.side))
        for n, (p0, p1) in enumerate(phases):
            impulses[n, r.start + base - p0, c.start + base - p1] = 1.0
        resp = dwt2_array(op(idwt2_array(impulses, ospec)), ospec)
        for dst in subs:
            key = (src, dst)
            a, b = strides(key)
            filt = np.zeros((filter_side(key),) * 2)
            rr, cc = ospec.slices((dst[0] + shift, dst[1]))
            for n, (p0, p1) in enumerate(phases):
                if p0 >= a or p1 >= a:
                    continue
                _fill(filt, resp[n, rr, cc], (base - p0, base - p1), a, b)
            filters[key] = filt
    return FilterBank(spec, filters, geometry_hash=geom.hash(), construction_side=ospec.side)


def dense_gram(geom, spec):
    """Full matrix of ``W R*R W*`` assembled column by column (oracle only)."""
    if spec.J > DENSE_MAX_J:
        raise InvalidArgument(f"dense assembly is limited to J <= {DENSE_MAX_J}")
    if geom.image_side != spec.side:
        raise InvalidArgument("geometry and wavelet sides differ")
    n = spec.side
    eye = np.eye(n * n).reshape(n * n, n, n)
    images = idwt2_array(eye, spec)
    out = np.empty_like(images)
    for i, u in enumerate(images):
        out[i] = backproject(radon(u, geom), geom)
    cols = dwt2_array(out, spec).reshape(n * n, n * n)
    return cols.T


# truncation ----------------------------------------------------------------------

@dataclass
class TruncatedBank:
    """A bank split into a fixed outer part and ``tau x tau`` centre windows.

    ``windows[key]`` is the top-left corner of the centre window inside the
    full filter; ``centers[key]`` holds the window contents.  Filters smaller
    than ``tau`` are kept whole in the centre.  ``rho_estimate`` is the
    estimated operator norm of the fixed part, i.e. of ``K - Z`` where ``Z``
    applies only the centre windows.
    """

    fixed: FilterBank
    centers: dict
    windows: dict
    tau: int
    rho_estimate: float

    @property
    def spec(self):
        return self.fixed.spec

    def center_bank(self, values=None):
        """Bank of centre-window filters, optionally with replacement values."""
        values = self.centers if values is None else values
        cen = {}
        for key, (r0, c0) in self.windows.items():
            fc0, fc1 = self.fixed.centers[key]
            cen[key] = (fc0 - r0, fc1 - c0)
        return FilterBank(self.spec, dict(values), geometry_hash=self.fixed.geometry_hash,
                          construction_side=self.fixed.construction_side, centers=cen)

    def restored(self):
        """Full filters with the centre windows re-embedded."""
        out = {}
        for key, f in self.fixed.filters.items():
            g = f.copy()
            r0, c0 = self.windows[key]
            h, w = self.centers[key].shape
            g[r0:r0 + h, c0:c0 + w] += self.centers[key]
            out[key] = g
        return out


def _window(side, center, tau):
    t = min(tau, side)
    return t, center - t // 2


def truncate(bank, tau, rho_iters=50, seed=0, mode="exact"):
    """Split every filter into its centre window and the remaining outer part."""
    largest = max(f.shape[0] for f in bank.filters.values())
    if not 1 <= tau <= largest:
        raise InvalidArgument(f"tau must lie in [1, {largest}], got {tau}")
    fixed, centers, windows = {}, {}, {}
    for key, f in bank.filters.items():
        t0, r0 = _window(f.shape[0], bank.centers[key][0], tau)
        t1, c0 = _window(f.shape[1], bank.centers[key][1], tau)
        centers[key] = f[r0:r0 + t0, c0:c0 + t1].copy()
        g = f.copy()
        g[r0:r0 + t0, c0:c0 + t1] = 0.0
        fixed[key] = g
        windows[key] = (r0, c0)
    fixed_bank = FilterBank(bank.spec, fixed, geometry_hash=bank.geometry_hash,
                            construction_side=bank.construction_side, centers=dict(bank.centers))
    rho = operator_norm(lambda x: apply_operator(fixed_bank, x, mode),
                        lambda y: apply_transpose(fixed_bank, y, mode),
                        bank.spec.side, rho_iters, seed)
    return TruncatedBank(fixed_bank, centers, windows, int(tau), rho)


def operator_norm(apply, apply_t, side, iters=50, seed=0):
    """Power iteration on ``A^T A``; returns the estimate of ``||A||``."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((side, side))
    x /= np.linalg.norm(x)
    est = 0.0
    for _ in range(iters):
        y = apply_t(apply(x))
        nrm = np.linalg.norm(y)
        if nrm == 0:
            return 0.0
        est = float(np.sqrt(nrm))
        x = y / nrm
    return est


# decay diagnostics ---------------------------------------------------------------

@dataclass
class DecayStats:
    envelope: np.ndarray
    slope: float | None
    exempt: bool


def envelope(filt, center=None):
    """``e(r) = max |filt[c + d]|`` over ``max(|d0|, |d1|) == r``."""
    filt = np.abs(np.asarray(filt, dtype=float))
    c0, c1 = (filt.shape[0] // 2, filt.shape[1] // 2) if center is None else center
    i0 = np.abs(np.arange(filt.shape[0]) - c0)[:, None]
    i1 = np.abs(np.arange(filt.shape[1]) - c1)[None, :]
    ring = np.maximum(i0, i1)
    rmax = int(min(c0, c1, filt.shape[0] - 1 - c0, filt.shape[1] - 1 - c1))
    return np.array([filt[ring == r].max() for r in range(rmax + 1)])


def fit_slope(env, r_min=4, r_max=32):
    """Least-squares slope of ``log e(r)`` against ``log r`` on ``[r_min, r_max]``."""
    r = np.arange(len(env))
    sel = (r >= r_min) & (r <= r_max) & (env > 0)
    if sel.sum() < 2:
        return None
    return float(np.polyfit(np.log(r[sel]), np.log(env[sel]), 1)[0])


def decay_profile(bank, r_min=4, r_max=32):
    """Envelope and fitted log-log slope of every filter.

    Filters touching the ``f`` subband are marked exempt since the scaling
    function has no vanishing moment.
    """
    out = {}
    for key, f in bank.filters.items():
        env = envelope(f, bank.centers[key])
        exempt = key[0][1] == "f" or key[1][1] == "f"
        out[key] = DecayStats(env, fit_slope(env, r_min, r_max), exempt)
    return out

"""Image quality metrics: relative error, PSNR, SSIM and HaarPSI."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d
from scipy.signal import convolve2d

from .errors import InvalidArgument


HAARPSI_MIN_SIDE = 32


def _pair(u, v):
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if u.shape != v.shape or u.ndim != 2:
        raise InvalidArgument(f"images must be 2D and equal in shape, got {u.shape} and {v.shape}")
    return u, v


def rel_err(u, u_dag):
    """``||u_dag - u|| / ||u_dag||``."""
    u, u_dag = _pair(u, u_dag)
    ref = np.linalg.norm(u_dag)
    if ref == 0:
        raise InvalidArgument("reference image is identically zero")
    return float(np.linalg.norm(u_dag - u) / ref)


def psnr(u, u_dag, peak=1.0):
    """Peak signal-to-noise ratio in dB; ``inf`` for identical images."""
    if peak <= 0:
        raise InvalidArgument("peak must be positive")
    u, u_dag = _pair(u, u_dag)
    mse = float(np.mean((u - u_dag) ** 2))
    if mse == 0:
        return float("inf")
    return float(10.0 * np.log10(peak * peak / mse))


def _gaussian_window(size=11, sigma=1.5):
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-x * x / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img, g):
    out = correlate1d(correlate1d(img, g, axis=0, mode="constant"), g, axis=1, mode="constant")
    r = len(g) // 2
    return out[r:-r, r:-r]


def ssim(u, u_dag, peak=1.0, window=11, sigma=1.5):
    """Mean SSIM over all full Gaussian-window positions."""
    u, u_dag = _pair(u, u_dag)
    if min(u.shape) < window:
        raise InvalidArgument(f"SSIM needs images of side >= {window}")
    g = _gaussian_window(window, sigma)
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    mu_x, mu_y = _filter_valid(u, g), _filter_valid(u_dag, g)
    sxx = _filter_valid(u * u, g) - mu_x * mu_x
    syy = _filter_valid(u_dag * u_dag, g) - mu_y * mu_y
    sxy = _filter_valid(u * u_dag, g) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


# HaarPSI, greyscale path of the reference algorithm -------------------------------

_HPSI_C = 30.0
_HPSI_ALPHA = 4.2


def _conv_same(x, k):
    return convolve2d(x, np.rot90(k, 2), mode="same")


def _haar_decompose(img, n_scales=3):
    out = np.zeros(img.shape + (2 * n_scales,))
    for s in range(1, n_scales + 1):
        k = 2.0 ** (-s) * np.ones((2 ** s, 2 ** s))
        k[: k.shape[0] // 2, :] *= -1
        out[:, :, s - 1] = _conv_same(img, k)
        out[:, :, s + n_scales - 1] = _conv_same(img, k.T)
    return out


def haarpsi(u, u_dag, peak=1.0):
    """HaarPSI similarity (C = 30, alpha = 4.2) with 2x2 pre-subsampling.

    Images are rescaled from ``[0, peak]`` to ``[0, 255]``, the range the
    constants were tuned for.  The result is symmetric in its arguments.
    """
    u, u_dag = _pair(u, u_dag)
    if min(u.shape) < HAARPSI_MIN_SIDE:
        raise InvalidArgument("HaarPSI needs images of side >= 32")
    ref = u_dag * (255.0 / peak)
    dist = u * (255.0 / peak)
    box = np.ones((2, 2)) / 4.0
    ref = _conv_same(ref, box)[::2, ::2]
    dist = _conv_same(dist, box)[::2, ::2]
    n = 3
    cr, cd = _haar_decompose(ref, n), _haar_decompose(dist, n)
    sims = np.zeros(ref.shape + (2,))
    weights = np.zeros(ref.shape + (2,))
    for o in range(2):
        weights[:, :, o] = np.maximum(np.abs(cr[:, :, 2 + o * n]), np.abs(cd[:, :, 2 + o * n]))
        mr = np.abs(cr[:, :, (o * n, 1 + o * n)])
        md = np.abs(cd[:, :, (o * n, 1 + o * n)])
        sims[:, :, o] = np.sum((2 * mr * md + _HPSI_C) / (mr ** 2 + md ** 2 + _HPSI_C), axis=2) / 2
    total = weights.sum()
    if total == 0:
        return 1.0
    val = np.sum(1.0 / (1.0 + np.exp(-_HPSI_ALPHA * sims)) * weights) / total
    return float((np.log(val / (1 - val)) / _HPSI_ALPHA) ** 2)


@dataclass
class MetricsReport:
    ids: list = field(default_factory=list)
    re: list = field(default_factory=list)
    psnr: list = field(default_factory=list)
    ssim: list = field(default_factory=list)
    haarpsi: list = field(default_factory=list)

    @property
    def count(self):
        return len(self.ids)

    def add(self, ident, u, u_dag, peak=1.0):
        self.ids.append(ident)
        self.re.append(rel_err(u, u_dag))
        self.psnr.append(psnr(u, u_dag, peak))
        self.ssim.append(ssim(u, u_dag, peak))
        # HaarPSI needs three dyadic scales; smaller images get NaN
        small = min(np.shape(u_dag)) < HAARPSI_MIN_SIDE
        self.haarpsi.append(float("nan") if small else haarpsi(u, u_dag, peak))

    def means(self):
        return {k: float(np.mean(getattr(self, k))) for k in ("re", "psnr", "ssim", "haarpsi")}

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["id", "re", "psnr", "ssim", "haarpsi"])
            for row in zip(self.ids, self.re, self.psnr, self.ssim, self.haarpsi):
                out.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


def evaluate(recons, truths, ids=None, peak=1.0):
    report = MetricsReport()
    ids = ids if ids is not None else [str(i) for i in range(len(truths))]
    for ident, u, t in zip(ids, recons, truths):
        report.add(ident, u, t, peak)
    return report

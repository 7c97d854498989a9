"""Random-ellipse phantoms and dataset generation."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidArgument, StorageError
from .wavelet import is_power_of_two


@dataclass(frozen=True)
class Ellipse:
    cx: float
    cy: float
    a: float
    b: float
    angle: float
    intensity: float

    def mask(self, x, y):
        c, s = np.cos(self.angle), np.sin(self.angle)
        dx, dy = x - self.cx, y - self.cy
        p = (c * dx + s * dy) / self.a
        q = (-s * dx + c * dy) / self.b
        return p * p + q * q <= 1.0


def pixel_centers(side):
    """Pixel-centre coordinates on ``[-1, 1]``, matching the projector."""
    return (np.arange(side) - (side - 1) / 2) * (2.0 / side)


def random_ellipses(seed, max_ellipses, min_axis=0.08, max_axis=0.5):
    """Between 1 and ``max_ellipses`` ellipses inside the unit disc."""
    if max_ellipses < 1:
        raise InvalidArgument("max_ellipses must be at least 1")
    rng = np.random.default_rng(seed)
    count = int(rng.integers(1, max_ellipses + 1))
    out = []
    for _ in range(count):
        a, b = rng.uniform(min_axis, max_axis, 2)
        # any centre within 1 - max(a, b) keeps the whole ellipse in the disc
        radius = (1.0 - max(a, b)) * np.sqrt(rng.uniform())
        phi = rng.uniform(0, 2 * np.pi)
        out.append(Ellipse(radius * np.cos(phi), radius * np.sin(phi), a, b,
                           rng.uniform(0, np.pi), rng.uniform(0.2, 1.0)))
    return out


def rasterize(ellipses, side):
    x = pixel_centers(side)
    X, Y = np.meshgrid(x, x)  # columns along x, rows along y
    img = np.zeros((side, side))
    for e in ellipses:
        img += e.intensity * e.mask(X, Y)
    return np.clip(img, 0.0, 1.0)


def generate_ellipse_image(seed, side, max_ellipses=10):
    """Sum of random ellipses sampled at pixel centres, clipped to ``[0, 1]``."""
    if not is_power_of_two(side) or side < 4:
        raise InvalidArgument(f"side must be a power of two >= 4, got {side}")
    return rasterize(random_ellipses(seed, max_ellipses), side)


def block_average(image, factor=2):
    n = image.shape[0] // factor
    return image.reshape(n, factor, n, factor).mean(axis=(1, 3))


@dataclass
class DatasetConfig:
    out_dir: str
    side: int = 64
    n_train: int = 300
    n_val: int = 20
    n_test: int = 50
    max_ellipses: int = 10
    master_seed: int = 0
    sigma_rel: float = 0.01
    n_angles: int = 121
    half_range_deg: float = 60.0
    n_detectors: int | None = None

    def __post_init__(self):
        if min(self.n_train, self.n_val, self.n_test) < 0:
            raise InvalidArgument("split sizes must be non-negative")
        if not is_power_of_two(self.side) or self.side < 4:
            raise InvalidArgument("side must be a power of two >= 4")


@dataclass
class DatasetManifest:
    entries: list
    geometry: dict
    noise: dict
    config: dict = field(default_factory=dict)

    def split(self, name):
        return [e for e in self.entries if e["split"] == name]

    def to_json(self):
        return {"entries": self.entries, "geometry": self.geometry, "noise": self.noise,
                "config": self.config}


def entry_seeds(master_seed, count):
    return [int(s) for s in np.random.SeedSequence(master_seed).generate_state(count, dtype=np.uint32)]


def generate_dataset(config, geom=None, workers=1):
    """Write ground truths, clean and noisy sinograms plus a manifest.

    Each phantom is rasterised at twice the side; its 2x2 block average is
    the ground truth while the measurement is simulated from the fine image.
    """
    from . import store, tomo

    out = Path(config.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise StorageError("cannot create dataset directory", out) from exc
    if geom is None:
        geom = tomo.make_geometry(config.side, config.n_angles, config.half_range_deg,
                                  config.n_detectors)
    splits = ["train"] * config.n_train + ["val"] * config.n_val + ["test"] * config.n_test
    seeds = entry_seeds(config.master_seed, len(splits))

    def work(i):
        seed, split = seeds[i], splits[i]
        ident = f"{split}-{i:05d}"
        fine = generate_ellipse_image(seed, 2 * config.side, config.max_ellipses)
        truth = block_average(fine)
        clean = tomo.simulate_measurement(fine, geom, 0.0, seed)
        noisy = tomo.add_noise(clean, config.sigma_rel, seed + 1)
        paths = {"image": f"{ident}.pfm", "sinogram": f"{ident}_sino.pfm",
                 "noisy_sinogram": f"{ident}_noisy.pfm"}
        store.save_image(out / paths["image"], truth)
        store.save_sinogram(out / paths["sinogram"], clean, geom)
        store.save_sinogram(out / paths["noisy_sinogram"], noisy, geom)
        entry = {"id": ident, "split": split, "seed": seed, **paths}
        entry["sha256"] = {k: store.file_hash(out / p) for k, p in paths.items()}
        return entry

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(workers) as pool:
            entries = list(pool.map(work, range(len(splits))))
    else:
        entries = [work(i) for i in range(len(splits))]
    manifest = DatasetManifest(entries, geom.descriptor(), {"sigma_rel": config.sigma_rel},
                               asdict(config))
    store.save_manifest(out / "manifest.json", manifest)
    return manifest

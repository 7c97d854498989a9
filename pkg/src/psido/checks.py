"""Small-scale oracle and property checks behind ``psido verify``."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import ista, opbank, psidonet, tomo
from .wavelet import WaveletSpec, dwt2_array, idwt2_array


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def _run(name, fn):
    t = time.perf_counter()
    try:
        ok, detail = fn()
    except Exception as exc:  # a crashing check is a failing check
        ok, detail = False, f"{type(exc).__name__}: {exc}"
    return CheckResult(name, bool(ok), detail, time.perf_counter() - t)


def run_checks(n_angles=121, half_range_deg=60.0, family="haar", J=4, J0=2, seed=0):
    """Run the suite on a ``2**J`` problem (``J <= 4``) and return the results."""
    J = min(J, 4)
    J0 = min(J0, J - 1)
    side = 2 ** J
    geom = tomo.make_geometry(side, n_angles, half_range_deg)
    spec = WaveletSpec(family, J, J0)
    rng = np.random.default_rng(seed)
    out = []

    def adjoint():
        worst = 0.0
        for _ in range(20):
            u = rng.standard_normal((side, side))
            m = rng.standard_normal(geom.sinogram_shape)
            ru, bm = tomo.radon(u, geom), tomo.backproject(m, geom)
            worst = max(worst, abs(np.vdot(ru, m) - np.vdot(u, bm)) / (np.linalg.norm(ru) * np.linalg.norm(m)))
        return worst <= 1e-9, f"max relative mismatch {worst:.2e}"

    def parseval():
        worst = 0.0
        for _ in range(20):
            u = rng.standard_normal((side, side))
            w = dwt2_array(u, spec)
            worst = max(worst, abs(np.linalg.norm(w) - np.linalg.norm(u)) / np.linalg.norm(u),
                        np.abs(idwt2_array(w, spec) - u).max())
        return worst <= 1e-10, f"max deviation {worst:.2e}"

    def down_up():
        x = rng.standard_normal((8, 8))
        ok = all(np.array_equal(opbank.downsample(opbank.upsample(x, e), e), x) for e in (1, 2, 3))
        return ok, "exact" if ok else "mismatch"

    bank = opbank.build_filter_bank(geom, spec)
    gram = opbank.dense_gram(geom, spec)

    def equivalence():
        worst = 0.0
        for _ in range(20):
            w = rng.standard_normal((side, side))
            ref = (gram @ w.ravel()).reshape(side, side)
            got = opbank.apply_operator(bank, w, "exact")
            worst = max(worst, np.linalg.norm(got - ref) / np.linalg.norm(ref))
        return worst <= 1e-8, f"max relative error {worst:.2e}"

    def nonexpansive():
        a = rng.standard_normal((10000, 4)) * 3
        b = rng.standard_normal((10000, 4)) * 3
        g = rng.uniform(0, 2, 10000)
        worst = max(np.linalg.norm(ista.soft_threshold(a[i], g[i]) - ista.soft_threshold(b[i], g[i]))
                    - np.linalg.norm(a[i] - b[i]) for i in range(10000))
        return worst <= 1e-12, f"max excess {worst:.2e}"

    def monotone():
        u = rng.uniform(0, 1, (side, side))
        m = tomo.radon(u, geom)
        b = dwt2_array(tomo.backproject(m, geom), spec)
        Lk = float(np.linalg.eigvalsh(gram)[-1])
        cfg = ista.IstaConfig(lam=1e-3, L=Lk, max_iter=50, tol=0)
        _, tr = ista.ista_run(lambda w: (gram @ w.ravel()).reshape(side, side), b, cfg)
        rise = float(np.max(np.diff(tr.objective)))
        return rise <= 1e-12, f"largest increase {rise:.2e}"

    def ista_point():
        ex = psidonet.ExactOperator(geom, spec)
        cfg = ista.IstaConfig(max_iter=6, tol=0)
        b = ex.rhs(tomo.radon(rng.uniform(0, 1, (side, side)), geom))
        net = psidonet.Network("O", spec, 4, exact=ex)
        p = psidonet.ista_point("O", spec, 6, 3, 4, cfg)
        blocks = net.blocks(p, b[None])
        _, tr = ista.ista_run(ex, b, cfg, snapshots=True)
        worst = max(np.linalg.norm(x[0] - y) / max(np.linalg.norm(y), 1e-300)
                    for x, y in zip(blocks[1:], tr.snapshots[1:]))
        return worst <= 1e-12, f"max per-block relative deviation {worst:.2e}"

    out.append(_run("tomo adjoint", adjoint))
    out.append(_run("wavelet Parseval / reconstruction", parseval))
    out.append(_run("downsample o upsample identity", down_up))
    out.append(_run("filter bank vs dense Gram", equivalence))
    out.append(_run("soft-threshold nonexpansive", nonexpansive))
    out.append(_run("ISTA objective monotone", monotone))
    out.append(_run("O-network ISTA point", ista_point))
    return out

"""ISTA for the wavelet-sparse least-squares problem and related checks.

The iteration

    w <- S_{lam/L}(w + (b - K w) / L),   K = W R* R W*,  b = W R* m

is proximal gradient descent on ``0.5 ||R W* w - m||^2 + lam ||w||_1``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as kern
from .errors import InvalidArgument, NumericalFailure
from .tomo import radon
from .wavelet import WaveletCoeffs, idwt2_array


@dataclass(frozen=True)
class IstaConfig:
    lam: float = 2e-6
    L: float = 5.0
    max_iter: int = 2000
    tol: float = 2e-4
    record_trace: bool = True

    def __post_init__(self):
        if not self.L > 0:
            raise InvalidArgument("L must be positive")
        if self.lam < 0:
            raise InvalidArgument("lambda must be non-negative")
        if self.max_iter < 0 or self.tol < 0:
            raise InvalidArgument("max_iter and tol must be non-negative")


@dataclass
class IterateTrace:
    """Per-iteration record of a run.

    ``objective[n]`` is ``<w, K w> - 2 <b, w> + 2 lam ||w||_1`` at iterate ``n``,
    i.e. the data-fit objective minus the constant ``||m||^2``.
    ``norms`` holds ``||w^(n)||`` for ``n = 0..iterations``.
    """

    objective: list = field(default_factory=list)
    rel_change: list = field(default_factory=list)
    norms: list = field(default_factory=list)
    snapshots: list | None = None
    iterations: int = 0
    reason: str = ""
    final: np.ndarray | None = None

    @property
    def max_norm(self):
        return max(self.norms) if self.norms else 0.0

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["iteration", "objective", "relative_change"])
            for n, change in enumerate(self.rel_change):
                obj = self.objective[n] if n < len(self.objective) else ""
                out.writerow([n + 1, repr(obj), repr(change)])


def soft_threshold(w, gamma):
    """Component-wise shrinkage, extended to negative ``gamma``.

    For ``gamma >= 0`` this is the usual ``sign(x) max(|x| - gamma, 0)``.
    For ``gamma < 0`` values move away from zero: ``x - gamma`` when
    ``x >= 0`` and ``x + gamma`` otherwise.
    """
    if isinstance(w, WaveletCoeffs):
        return WaveletCoeffs(kern.soft_threshold(w.data, gamma), w.spec)
    return kern.soft_threshold(np.asarray(w, dtype=float), float(gamma))


def soft_threshold_grads(x, gamma):
    """Derivatives of ``S_gamma(x)`` in ``x`` (elementwise) and in ``gamma``.

    The kink ``|x| == gamma`` gets derivative 0 in both.
    """
    x = np.asarray(x, dtype=float)
    if gamma >= 0:
        active = np.abs(x) > gamma
        return active.astype(float), -np.sign(x) * active
    return np.ones_like(x), np.where(x >= 0, -1.0, 1.0)


def _unwrap(w):
    return (w.data, w.spec) if isinstance(w, WaveletCoeffs) else (np.asarray(w, dtype=float), None)


def ista_run(apply_K, b, cfg=IstaConfig(), w0=None, snapshots=False):
    """Run ISTA; returns ``(w, trace)`` with ``w`` of the same kind as ``b``.

    Stops once ``||u+ - u||^2 / ||u||^2 < tol`` for the image-domain iterates
    ``u = W* w``.  The transform is orthogonal, so the ratio is computed on
    the coefficients; when ``||u|| == 0`` the absolute change is used.
    """
    bd, spec = _unwrap(b)
    w = np.zeros_like(bd) if w0 is None else _unwrap(w0)[0].copy()
    if w.shape != bd.shape:
        raise InvalidArgument(f"w0 shape {w.shape} differs from b shape {bd.shape}")
    step = 1.0 / cfg.L
    gamma = cfg.lam / cfg.L
    trace = IterateTrace(snapshots=[w.copy()] if snapshots else None)
    trace.norms.append(float(np.linalg.norm(w)))
    trace.reason = "max_iter"
    # divergence is reported through the finiteness check below
    with np.errstate(over="ignore", invalid="ignore"):
        for n in range(cfg.max_iter):
            kw = apply_K(w)
            if cfg.record_trace:
                trace.objective.append(_surrogate(w, kw, bd, cfg.lam))
            w_new = soft_threshold(w + step * (bd - kw), gamma)
            if not np.all(np.isfinite(w_new)):
                raise NumericalFailure(f"non-finite iterate at iteration {n + 1}", index=n + 1)
            diff = float(np.sum((w_new - w) ** 2))
            base = float(np.sum(w * w))
            change = diff / base if base > 0 else diff
            w = w_new
            trace.iterations = n + 1
            trace.rel_change.append(change)
            trace.norms.append(float(np.sqrt(np.sum(w * w))))
            if snapshots:
                trace.snapshots.append(w.copy())
            if change < cfg.tol:
                trace.reason = "tolerance"
                break
    if cfg.record_trace:
        trace.objective.append(_surrogate(w, apply_K(w), bd, cfg.lam))
    trace.final = w
    return (WaveletCoeffs(w, spec) if spec is not None else w), trace


def perturbed_ista_run(apply_Z, b, cfg=IstaConfig(), w0=None, snapshots=False):
    """ISTA with a surrogate operator ``Z`` in place of ``K``."""
    return ista_run(apply_Z, b, cfg, w0, snapshots)


def _surrogate(w, kw, b, lam):
    return float(np.vdot(w, kw) - 2.0 * np.vdot(b, w) + 2.0 * lam * np.abs(w).sum())


def objective(w, m, geom, spec, lam):
    """``||R W* w - m||^2 + lam ||w||_1``."""
    wd, _ = _unwrap(w)
    resid = radon(idwt2_array(wd, spec), geom) - np.asarray(m, dtype=float)
    return float(np.sum(resid ** 2) + lam * np.abs(wd).sum())


@dataclass
class PerturbationReport:
    measured: float
    bound: float
    rho: float
    L: float
    M: float
    iterations: int

    @property
    def passed(self):
        return self.measured <= self.bound * (1 + 1e-6)


def perturbation_bound(M, rho, L, n):
    """``M ((1 + rho/L)^(n+1) - 1)``."""
    return M * ((1.0 + rho / L) ** (n + 1) - 1.0)


def verify_perturbation_bound(trace_exact, trace_perturbed, rho, L, M_bound=None):
    """Compare the final deviation of two runs with the perturbation bound.

    Both traces must cover the same number of iterations from the same start.
    ``M_bound`` defaults to the largest iterate norm of the exact run.
    """
    n = trace_exact.iterations
    if trace_perturbed.iterations != n:
        raise InvalidArgument(
            f"runs differ in length: {n} vs {trace_perturbed.iterations} iterations")
    if trace_exact.final is None or trace_perturbed.final is None:
        raise InvalidArgument("traces carry no final iterate")
    if trace_exact.final.shape != trace_perturbed.final.shape:
        raise InvalidArgument("final iterates have different shapes")
    if rho < 0 or L <= 0:
        raise InvalidArgument("need rho >= 0 and L > 0")
    M = trace_exact.max_norm if M_bound is None else float(M_bound)
    measured = float(np.linalg.norm(trace_perturbed.final - trace_exact.final))
    return PerturbationReport(measured, perturbation_bound(M, rho, L, n), rho, L, M, n)


@dataclass
class RateStudy:
    deltas: np.ndarray
    lambdas: np.ndarray
    errors: np.ndarray
    iterations: list
    slope: float


def rate_study(geom, spec, sparsity_s, deltas, c0, seed=0, tol=1e-13, max_iter=200000):
    """Error of the regularised solution against noise level with ``lam = c0 delta``.

    A synthetic ``s``-sparse ``w_true`` is measured with noise of norm exactly
    ``delta`` (one fixed direction); each problem is solved by ISTA with
    step ``1/||K||`` and the l1 error ``||w_delta - w_true||_1`` is recorded.
    The slope is fitted in log-log over the positive deltas.
    """
    from .opbank import dense_gram

    if spec.J > 5:
        raise InvalidArgument("the rate study is restricted to J <= 5")
    rng = np.random.default_rng(seed)
    n = spec.side
    K = dense_gram(geom, spec)
    L = float(np.linalg.eigvalsh(K)[-1])
    support = rng.choice(n * n, size=sparsity_s, replace=False)
    w_true = np.zeros(n * n)
    w_true[support] = rng.choice([-1.0, 1.0], sparsity_s) * rng.uniform(0.5, 1.5, sparsity_s)
    clean = radon(idwt2_array(w_true.reshape(n, n), spec), geom)
    direction = rng.standard_normal(clean.shape)
    direction /= np.linalg.norm(direction)
    from .tomo import backproject
    from .wavelet import dwt2_array

    lambdas, errors, iters = [], [], []
    for delta in deltas:
        m = clean + delta * direction
        b = dwt2_array(backproject(m, geom), spec).ravel()
        lam = c0 * delta
        cfg = IstaConfig(lam=lam, L=L, max_iter=max_iter, tol=tol, record_trace=False)
        w, tr = ista_run(lambda v: K @ v, b, cfg)
        lambdas.append(lam)
        errors.append(float(np.abs(w - w_true).sum()))
        iters.append(tr.iterations)
    deltas = np.asarray(deltas, dtype=float)
    errors = np.asarray(errors)
    pos = (deltas > 0) & (errors > 0)
    slope = float(np.polyfit(np.log(deltas[pos]), np.log(errors[pos]), 1)[0]) if pos.sum() >= 2 else float("nan")
    return RateStudy(deltas, np.asarray(lambdas), errors, iters, slope)

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from psido import ista, opbank, tomo
from psido.errors import InvalidArgument, NumericalFailure
from psido.wavelet import WaveletCoeffs, WaveletSpec, dwt2_array

from _support import disc


def test_diagonal_problem_has_closed_form():
    rng = np.random.default_rng(0)
    d = rng.uniform(0.5, 2.0, (8, 8))
    b = rng.standard_normal((8, 8))
    lam = 0.3
    cfg = ista.IstaConfig(lam=lam, L=2.0, max_iter=5000, tol=0)
    w, _ = ista.ista_run(lambda v: d * v, b, cfg)
    ref = np.sign(b) * np.maximum(np.abs(b) - lam, 0) / d
    assert np.allclose(w, ref, atol=1e-12)


def test_matches_convex_solver():
    cvxpy = pytest.importorskip("cvxpy")
    rng = np.random.default_rng(1)
    A = rng.standard_normal((30, 20))
    K, m = A.T @ A, rng.standard_normal(30)
    b, lam = A.T @ m, 2.0
    L = np.linalg.eigvalsh(K)[-1]
    w, tr = ista.ista_run(lambda v: K @ v, b, ista.IstaConfig(lam=lam, L=L, max_iter=200000,
                                                               tol=1e-30))
    x = cvxpy.Variable(20)
    cvxpy.Problem(cvxpy.Minimize(0.5 * cvxpy.sum_squares(A @ x - m) + lam * cvxpy.norm1(x))).solve()
    assert np.allclose(w, x.value, atol=1e-5)


def test_objective_monotone_and_trace_contents():
    spec = WaveletSpec("haar", 4, 2)
    geom = tomo.make_geometry(16, 61)
    K = opbank.dense_gram(geom, spec)
    L = np.linalg.eigvalsh(K)[-1]
    b = dwt2_array(tomo.backproject(tomo.radon(disc(16), geom), geom), spec).ravel()
    cfg = ista.IstaConfig(lam=1e-3, L=L, max_iter=300, tol=0)
    w, tr = ista.ista_run(lambda v: K @ v, b, cfg)
    obj = np.array(tr.objective)
    assert np.all(np.diff(obj) <= 1e-12 * np.abs(obj[:-1]).max())
    assert tr.iterations == 300 and tr.reason == "max_iter"
    assert len(tr.norms) == 301 and len(obj) == 301
    # the trace objective equals the data term minus ||m||^2 with lambda doubled
    m = tomo.radon(disc(16), geom)
    full = ista.objective(w.reshape(16, 16), m, geom, spec, 2 * cfg.lam)
    assert obj[-1] == pytest.approx(full - np.sum(m ** 2), rel=1e-9, abs=1e-9)


def test_tolerance_stop_and_wavelet_coeffs():
    spec = WaveletSpec("haar", 4, 2)
    b = WaveletCoeffs(np.random.default_rng(2).standard_normal((16, 16)), spec)
    w, tr = ista.ista_run(lambda v: v, b, ista.IstaConfig(lam=0.1, L=1.5, tol=1e-10))
    assert isinstance(w, WaveletCoeffs) and tr.reason == "tolerance"
    assert tr.rel_change[-1] < 1e-10


def test_zero_start_uses_absolute_change():
    cfg = ista.IstaConfig(lam=10.0, L=1.0, tol=1e-3)
    w, tr = ista.ista_run(lambda v: v, np.full((4, 4), 0.5), cfg)
    assert tr.iterations == 1 and tr.reason == "tolerance" and not w.any()


def test_snapshots_and_csv(tmp_path):
    cfg = ista.IstaConfig(lam=0.0, L=2.0, max_iter=3, tol=0)
    _, tr = ista.ista_run(lambda v: v, np.ones((4, 4)), cfg, snapshots=True)
    assert len(tr.snapshots) == 4 and np.array_equal(tr.snapshots[0], np.zeros((4, 4)))
    tr.to_csv(tmp_path / "t.csv")
    assert len((tmp_path / "t.csv").read_text().splitlines()) == 4


def test_diverging_step_raises():
    cfg = ista.IstaConfig(lam=0.0, L=1e-3, max_iter=5000, tol=0)
    with pytest.raises(NumericalFailure):
        ista.ista_run(lambda v: 10.0 * v, np.ones((4, 4)), cfg)


@pytest.mark.parametrize("kw", [dict(L=0), dict(lam=-1), dict(max_iter=-1), dict(tol=-1)])
def test_config_validation(kw):
    with pytest.raises(InvalidArgument):
        ista.IstaConfig(**kw)


@settings(max_examples=300, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=2),
       st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=2), st.floats(0, 100))
def test_soft_threshold_nonexpansive(x, y, g):
    x, y = np.array(x), np.array(y)
    d = np.linalg.norm(ista.soft_threshold(x, g) - ista.soft_threshold(y, g))
    assert d <= np.linalg.norm(x - y) * (1 + 1e-12) + 1e-12


def test_soft_threshold_gradients_match_differences():
    rng = np.random.default_rng(3)
    x = rng.standard_normal(200)
    for g in (0.4, -0.3):
        x = x[np.abs(np.abs(x) - abs(g)) > 1e-3]
        dx, dg = ista.soft_threshold_grads(x, g)
        h = 1e-7
        assert np.allclose(dx, (ista.soft_threshold(x + h, g) - ista.soft_threshold(x - h, g)) / (2 * h))
        assert np.allclose(dg, (ista.soft_threshold(x, g + h) - ista.soft_threshold(x, g - h)) / (2 * h))


def test_perturbation_bound_helpers():
    assert ista.perturbation_bound(2.0, 0.0, 1.0, 10) == 0.0
    assert ista.perturbation_bound(1.0, 1.0, 1.0, 2) == pytest.approx(7.0)
    K = np.diag([1.0, 0.5])
    Z = np.diag([1.0, 0.45])
    b = np.array([1.0, 1.0])
    cfg = ista.IstaConfig(lam=0.01, L=1.0, max_iter=40, tol=0)
    _, te = ista.ista_run(lambda v: K @ v, b, cfg)
    _, tz = ista.perturbed_ista_run(lambda v: Z @ v, b, cfg)
    rep = ista.verify_perturbation_bound(te, tz, 0.05, 1.0)
    assert rep.passed and rep.measured > 0
    short = ista.ista_run(lambda v: K @ v, b, ista.IstaConfig(lam=0.01, L=1.0, max_iter=5, tol=0))[1]
    with pytest.raises(InvalidArgument):
        ista.verify_perturbation_bound(te, short, 0.05, 1.0)


def test_rate_study_small():
    spec = WaveletSpec("haar", 3, 2)
    geom = tomo.make_geometry(8, 31)
    study = ista.rate_study(geom, spec, 3, [1e-1, 1e-2, 1e-3], 0.5, tol=1e-16, max_iter=50000)
    assert np.all(np.diff(study.errors) < 0)
    assert np.allclose(study.lambdas, 0.5 * study.deltas)

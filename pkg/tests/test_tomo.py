import numpy as np
import pytest

from psido import tomo
from psido.errors import InvalidArgument

from _support import disc


@pytest.fixture(scope="module")
def geom16():
    return tomo.make_geometry(16, 31)


def test_adjoint_identity(geom16):
    rng = np.random.default_rng(0)
    for _ in range(5):
        u = rng.standard_normal((16, 16))
        q = rng.standard_normal(geom16.sinogram_shape)
        lhs = np.vdot(tomo.radon(u, geom16), q)
        rhs = np.vdot(u, tomo.backproject(q, geom16))
        assert abs(lhs - rhs) <= 1e-9 * abs(lhs)


def test_disc_projection_matches_chord_length():
    # unnormalised operator against the analytic line integral 2 sqrt(r^2 - s^2)
    side, r = 64, 0.5
    geom = tomo.make_geometry(side, 15, normalize=False)
    sino = tomo.radon(disc(side, r), geom)
    s = geom.detector_positions
    chord = 2 * np.sqrt(np.clip(r * r - s * s, 0, None))
    err = np.linalg.norm(sino - chord, axis=1) / np.linalg.norm(chord)
    assert err.max() < 0.02


def test_normal_operator_matches_composition(geom16):
    rng = np.random.default_rng(1)
    u = rng.standard_normal((3, 16, 16))
    op = tomo.normal_operator(geom16)
    got = op(u)
    for i in range(3):
        ref = tomo.backproject(tomo.radon(u[i], geom16), geom16)
        assert np.allclose(got[i], ref, rtol=0, atol=1e-12 * np.abs(ref).max())


def test_normal_kernel_is_size_independent(geom16):
    # the doubled image keeps the same kernel, so R*R on side 32 is still a convolution
    big = geom16.with_side(32)
    rng = np.random.default_rng(2)
    u = rng.standard_normal((32, 32))
    ref = tomo.backproject(tomo.radon(u, big), big)
    assert np.allclose(tomo.NormalOperator(big)(u), ref, atol=1e-12 * np.abs(ref).max())
    k16, k32 = tomo.normal_kernel(big, 16), tomo.normal_kernel(big, 32)
    assert np.allclose(k32[16:-16, 16:-16], k16)


def test_operator_norm_is_normalised_and_converged(geom16):
    est, hist = tomo.estimate_operator_norm(geom16, 100, return_history=True)
    assert abs(est - 1.0) < 1e-8
    assert all(b >= a - 1e-14 for a, b in zip(hist, hist[1:]))
    # dense oracle: largest singular value of the explicit matrix
    n = 16
    cols = [tomo.radon(e.reshape(n, n), geom16).ravel() for e in np.eye(n * n)]
    assert abs(np.linalg.norm(np.array(cols).T, 2) - est) < 1e-8


def test_full_angle_fbp_reconstructs_disc():
    side = 64
    angles = np.linspace(-np.pi / 2, np.pi / 2, 180, endpoint=False)
    geom = tomo.make_geometry(side, angles=angles)
    u = disc(side)
    rec = tomo.fbp(tomo.radon(u, geom), geom)
    assert np.linalg.norm(rec - u) / np.linalg.norm(u) <= 0.05


def test_limited_angle_fbp_is_much_worse():
    side = 64
    u = disc(side)
    full = tomo.make_geometry(side, angles=np.linspace(-np.pi / 2, np.pi / 2, 180, endpoint=False))
    lim = tomo.make_geometry(side, 121, 60.0)
    e_full = np.linalg.norm(tomo.fbp(tomo.radon(u, full), full) - u)
    e_lim = np.linalg.norm(tomo.fbp(tomo.radon(u, lim), lim) - u)
    assert e_lim > 5 * e_full


def test_simulated_data_avoid_inverse_crime(geom16):
    fine = disc(32)
    clean = tomo.simulate_measurement(fine, geom16, 0.0)
    crime = tomo.radon(disc(16), geom16)
    diff = np.linalg.norm(clean - crime) / np.linalg.norm(crime)
    assert 0 < diff < 0.1


def test_noise_level_and_seeding(geom16):
    sino = tomo.radon(disc(16), geom16)
    a = tomo.add_noise(sino, 0.05, 3)
    assert np.array_equal(a, tomo.add_noise(sino, 0.05, 3))
    std = np.std(a - sino)
    assert 0.8 < std / (0.05 * np.abs(sino).max()) < 1.2


def test_geometry_descriptor_round_trip(geom16):
    g2 = tomo.Geometry.from_descriptor(geom16.descriptor())
    assert g2 == geom16 and g2.hash() == geom16.hash()
    assert geom16.hash() != geom16.doubled().hash()


@pytest.mark.parametrize("kwargs", [
    dict(angles=(0.1, 0.0), n_detectors=10, image_side=8),
    dict(angles=(0.0, 2.0), n_detectors=10, image_side=8),
    dict(angles=(), n_detectors=10, image_side=8),
    dict(angles=(0.0,), n_detectors=0, image_side=8),
])
def test_invalid_geometry(kwargs):
    with pytest.raises(InvalidArgument):
        tomo.Geometry(**kwargs)


def test_shape_mismatch_rejected(geom16):
    with pytest.raises(InvalidArgument):
        tomo.radon(np.zeros((8, 8)), geom16)
    with pytest.raises(InvalidArgument):
        tomo.backproject(np.zeros((3, 3)), geom16)
    with pytest.raises(InvalidArgument):
        tomo.simulate_measurement(np.zeros((16, 16)), geom16)

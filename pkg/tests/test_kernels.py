import json
import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from psido import _kernels as k

CASES = [((3, 3), (1, 1), (1, 1)), ((5, 4), (2, 1), (1, 2)), ((9, 9), (4, 4), (2, 1)),
         ((4, 6), (0, 5), (1, 4)), ((15, 15), (7, 7), (1, 1)), ((31, 31), (15, 15), (4, 1))]


def naive(F, c, W, a, b):
    n_in = W.shape[-1]
    n_out = n_in * b // a
    out = np.zeros(W.shape[:-2] + (n_out, n_out))
    for y0 in range(n_out):
        for y1 in range(n_out):
            for x0 in range(n_in):
                for x1 in range(n_in):
                    i, j = a * y0 - b * x0 + c[0], a * y1 - b * x1 + c[1]
                    if 0 <= i < F.shape[0] and 0 <= j < F.shape[1]:
                        out[..., y0, y1] += F[i, j] * W[..., x0, x1]
    return out


@pytest.mark.parametrize("fshape,c,ab", CASES)
def test_forward_matches_naive_loops(fshape, c, ab):
    a, b = ab
    rng = np.random.default_rng(0)
    F = rng.standard_normal(fshape)
    W = rng.standard_normal((2, 8, 8))
    ref = naive(F, c, W, a, b)
    for fn in (k.sconv, k.sconv_np):
        assert np.allclose(fn(F, c, W, a, b), ref, atol=1e-12)


@pytest.mark.parametrize("fshape,c,ab", CASES)
def test_transpose_and_filter_gradient(fshape, c, ab):
    a, b = ab
    rng = np.random.default_rng(1)
    F = rng.standard_normal(fshape)
    W = rng.standard_normal((3, 8, 8))
    Y = rng.standard_normal(k.sconv(F, c, W, a, b).shape)
    lhs = np.vdot(k.sconv(F, c, W, a, b), Y)
    assert abs(lhs - np.vdot(W, k.sconv_t(F, c, Y, a, b))) < 1e-10 * max(1, abs(lhs))
    assert abs(lhs - np.vdot(F, k.sconv_df(Y, W, a, b, c, fshape))) < 1e-10 * max(1, abs(lhs))
    assert np.allclose(k.sconv_t(F, c, Y, a, b), k.sconv_t_np(F, c, Y, a, b), atol=1e-12)
    assert np.allclose(k.sconv_df(Y, W, a, b, c, fshape), k.sconv_df_np(Y, W, a, b, c, fshape),
                       atol=1e-11)


def test_leading_axes_preserved():
    F = np.ones((3, 3))
    W = np.ones((2, 3, 4, 4))
    assert k.sconv(F, (1, 1), W, 1, 1).shape == (2, 3, 4, 4)
    assert k.sconv(F, (1, 1), W, 2, 1).shape == (2, 3, 2, 2)


@settings(max_examples=200, deadline=None)
@given(st.floats(-1e6, 1e6), st.floats(-10, 10))
def test_soft_threshold_scalar(x, g):
    got = float(k.soft_threshold(np.array([x]), g)[0])
    if g >= 0:
        ref = np.sign(x) * max(abs(x) - g, 0.0)
    else:
        ref = x - g if x >= 0 else x + g
    assert got == pytest.approx(ref, abs=1e-9)


def test_soft_threshold_large_array_uses_same_rule():
    x = np.random.default_rng(2).standard_normal((8, 32, 32))
    for g in (0.3, -0.2, 0.0):
        assert np.array_equal(k.soft_threshold(x, g), k.soft_threshold_np(x, g))


_SCRIPT = """
import json, numpy as np
from psido import _kernels as k, opbank, tomo
from psido.wavelet import WaveletSpec
rng = np.random.default_rng(0)
F = rng.standard_normal((5, 5)); W = rng.standard_normal((4, 16, 16))
spec = WaveletSpec("haar", 4, 2)
bank = opbank.build_filter_bank(tomo.make_geometry(16, 31), spec)
tb = opbank.truncate(bank, 4)
out = {"backend": k.BACKEND,
       "sconv": k.sconv(F, (2, 2), W, 1, 2).tolist(),
       "soft": k.soft_threshold(W, 0.5).tolist(),
       "fixed": opbank.apply_operator(tb.fixed, W, "fast").tolist(),
       "rho": tb.rho_estimate}
print(json.dumps(out))
"""


def _run(disable):
    env = dict(os.environ, PSIDO_DISABLE_NUMBA="1" if disable else "0")
    res = subprocess.run([sys.executable, "-c", _SCRIPT], env=env, capture_output=True, text=True,
                         check=True)
    return json.loads(res.stdout)


def test_backends_agree():
    fast, slow = _run(False), _run(True)
    assert fast["backend"] == "numba" and slow["backend"] == "numpy"
    for key in ("sconv", "soft", "fixed"):
        assert np.allclose(fast[key], slow[key], rtol=1e-12, atol=1e-12)
    assert fast["rho"] == pytest.approx(slow["rho"], rel=1e-10)

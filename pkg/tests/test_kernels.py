import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdsmooth import _kernels_py, kernels

compiled = pytest.mark.skipif(kernels.BACKEND != "cython", reason="compiled kernels not built")


def _coeffs(K, n, seed):
    rng = np.random.default_rng(seed)
    M = [rng.normal(size=(K, n, n)) * 0.3 for _ in range(3)]
    c = [rng.normal(size=(K, n)) for _ in range(3)]
    S = []
    for _ in range(3):
        B = rng.normal(size=(K, n, n))
        S.append(B @ np.swapaxes(B, 1, 2))
    jumps = rng.normal(size=(K + 1, n)) * (rng.random((K + 1, 1)) < 0.2)
    Y0 = np.eye(n)
    return M, c, S, rng.normal(size=n), Y0, jumps


@compiled
@settings(max_examples=30, deadline=None)
@given(st.integers(1, 40), st.integers(1, 6), st.integers(0, 10 ** 6), st.booleans())
def test_backends_agree(K, n, seed, with_jumps):
    M, c, S, y0, Y0, jumps = _coeffs(K, n, seed)
    J = jumps if with_jumps else None
    h = 0.05 if seed % 2 else -0.05
    a = kernels.affine_rk4(*M, *c, y0, h, J, backend="python")
    b = kernels.affine_rk4(*M, *c, y0, h, J, backend="cython")
    for x, y in zip(a, b):
        np.testing.assert_allclose(x, y, rtol=1e-12, atol=1e-12)
    JP = None if not with_jumps else np.einsum("ki,kj->kij", jumps, jumps)
    a = kernels.lyap_rk4(*M, *S, Y0, h, JP, backend="python")
    b = kernels.lyap_rk4(*M, *S, Y0, h, JP, backend="cython")
    for x, y in zip(a, b):
        np.testing.assert_allclose(x, y, rtol=1e-12, atol=1e-12)


def test_python_affine_matches_closed_form():
    # dy/dt = -y + 1 has y(t) = 1 + (y0 - 1) e^{-t}
    K = 100
    M = [np.full((K, 1, 1), -1.0)] * 3
    c = [np.ones((K, 1))] * 3
    _, dep = _kernels_py.affine_rk4(*M, *c, np.array([3.0]), 0.01)
    assert dep[-1, 0] == pytest.approx(1 + 2 * np.exp(-1.0), abs=1e-10)


def test_lyapunov_stays_symmetric():
    M, c, S, y0, Y0, _ = _coeffs(50, 4, 1)
    _, Y = kernels.lyap_rk4(*M, *S, Y0, 0.02)
    np.testing.assert_array_equal(Y, np.swapaxes(Y, 1, 2))


def test_unknown_backend():
    with pytest.raises(ValueError):
        kernels.affine_rk4(*([np.zeros((1, 1, 1))] * 3), *([np.zeros((1, 1))] * 3),
                           np.zeros(1), 0.1, backend="fortran")


def test_pure_python_switch():
    code = "from cdsmooth import kernels; print(kernels.BACKEND)"
    env = {**os.environ, "CDSMOOTH_PURE_PYTHON": "1"}
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True)
    assert out.stdout.strip() == "python"

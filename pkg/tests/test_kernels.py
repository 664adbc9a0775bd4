"""The compiled kernels and the numpy fallback must agree."""
import os
import subprocess
import sys

import numpy as np
import pytest

from offsite.tensor import _kernels_py as py
from offsite.tensor import kernels

try:
    from offsite.tensor import _ckernels as cy
except ImportError:  # pragma: no cover - extension not built
    cy = None

needs_ext = pytest.mark.skipif(cy is None, reason="compiled extension not built")


def _rand(shape, dtype, seed=0, scale=1.0):
    return (np.random.default_rng(seed).standard_normal(shape) * scale).astype(dtype)


def tol(dtype):
    return dict(rtol=2e-5, atol=2e-6) if dtype == np.float32 else dict(rtol=1e-12, atol=1e-13)


@needs_ext
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_layer_norm_agrees(dtype):
    x = _rand((37, 24), dtype, 1, 3.0)
    g, b = _rand(24, dtype, 2), _rand(24, dtype, 3)
    for a, c in zip(py.layer_norm_fwd(x, g, b, 1e-5), cy.layer_norm_fwd(x, g, b, 1e-5)):
        np.testing.assert_allclose(a, c, **tol(dtype))
    _, xhat, rstd = py.layer_norm_fwd(x, g, b, 1e-5)
    dy = _rand((37, 24), dtype, 4)
    for a, c in zip(py.layer_norm_bwd(dy, xhat, rstd, g), cy.layer_norm_bwd(dy, xhat, rstd, g)):
        np.testing.assert_allclose(a, c, **tol(dtype))


@needs_ext
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_causal_softmax_agrees(dtype):
    s = _rand((3, 2, 9, 9), dtype, 5, 4.0)
    p_py, p_cy = py.causal_softmax_fwd(s), cy.causal_softmax_fwd(s)
    np.testing.assert_allclose(p_py, p_cy, **tol(dtype))
    dp = _rand(s.shape, dtype, 6)
    np.testing.assert_allclose(py.causal_softmax_bwd(p_py, dp), cy.causal_softmax_bwd(p_py, dp), **tol(dtype))


@needs_ext
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_cross_entropy_agrees(dtype):
    z = _rand((50, 31), dtype, 7, 3.0)
    t = np.random.default_rng(8).integers(0, 31, 50).astype(np.int64)
    (l_py, p_py), (l_cy, p_cy) = py.xent_fwd(z, t), cy.xent_fwd(z, t)
    assert l_py == pytest.approx(l_cy, rel=1e-6 if dtype == np.float32 else 1e-12)
    np.testing.assert_allclose(p_py, p_cy, **tol(dtype))
    np.testing.assert_allclose(py.xent_bwd(p_py, t, 0.02), cy.xent_bwd(p_py, t, 0.02), **tol(dtype))


@needs_ext
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_adamw_agrees(dtype):
    args = []
    for impl in (py, cy):
        p, g = _rand(200, dtype, 9), _rand(200, dtype, 10)
        m, v = _rand(200, dtype, 11, 0.1), np.abs(_rand(200, dtype, 12, 0.1))
        impl.adamw_update(p, g, m, v, 1e-3, 0.9, 0.999, 1e-8, 0.01, 0.19, 0.002)
        args.append((p, m, v))
    for a, c in zip(*args):
        np.testing.assert_allclose(a, c, **tol(dtype))


def test_backend_name_is_known():
    assert kernels.BACKEND in ("cython", "python")


def test_env_var_forces_fallback():
    env = dict(os.environ, OFFSITE_KERNELS="python")
    out = subprocess.run([sys.executable, "-c", "from offsite.tensor import BACKEND; print(BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


def test_adamw_reference_step():
    # straight-line AdamW in float64
    p = np.array([1.0, -2.0, 0.5])
    g = np.array([0.1, 0.2, -0.3])
    m, v = np.zeros(3), np.zeros(3)
    lr, b1, b2, eps, wd = 0.01, 0.9, 0.999, 1e-8, 0.1
    expect_m = (1 - b1) * g
    expect_v = (1 - b2) * g * g
    mhat, vhat = expect_m / (1 - b1), expect_v / (1 - b2)
    expect_p = p - lr * wd * p - lr * mhat / (np.sqrt(vhat) + eps)
    py.adamw_update(p, g, m, v, lr, b1, b2, eps, wd, 1 - b1, 1 - b2)
    np.testing.assert_allclose(p, expect_p, rtol=1e-12)
    np.testing.assert_allclose(m, expect_m, rtol=1e-12)
    np.testing.assert_allclose(v, expect_v, rtol=1e-12)

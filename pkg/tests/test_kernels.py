import numpy as np
import pytest

from ppdepth import kernels
from ppdepth import _kernels_py as py

pytestmark = pytest.mark.skipif(not kernels.have_compiled(), reason="compiled extension not built")


@pytest.fixture(scope="module")
def cc():
    return kernels.backend("compiled")


@pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-12), (np.float32, 1e-5)])
def test_gelu_backward_matches(cc, rng, dtype, tol):
    x = rng.standard_normal(1000).astype(dtype)
    g = rng.standard_normal(1000).astype(dtype)
    th = np.tanh(0.7978845608028654 * (x + 0.044715 * x * x * x)).astype(dtype)
    a, b = np.empty_like(x), np.empty_like(x)
    cc.gelu_backward(g, x, th, a)
    py.gelu_backward(g, x, th, b)
    assert np.allclose(a, b, atol=tol, rtol=tol)


@pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-12), (np.float32, 1e-5)])
def test_layer_norm_kernels_match(cc, rng, dtype, tol):
    x = (rng.standard_normal((17, 24)) * 3 + 1).astype(dtype)
    outs = []
    for mod in (cc, py):
        xhat, inv = np.empty_like(x), np.empty(17, dtype=dtype)
        mod.layer_norm_forward(x, 1e-6, xhat, inv)
        gx = np.empty_like(x)
        mod.layer_norm_backward(np.ascontiguousarray(x[::-1]), xhat, inv, gx)
        outs.append((xhat, inv, gx))
    for a, b in zip(*outs):
        assert np.allclose(a, b, atol=tol, rtol=tol)


def test_nms_matches(cc, rng):
    mag = np.abs(rng.standard_normal((20, 23)))
    gx, gy = rng.standard_normal((2, 20, 23))
    assert np.array_equal(cc.nms(mag, gx, gy), py.nms(mag, gx, gy))


def test_hysteresis_matches(cc, rng):
    s = np.abs(rng.standard_normal((30, 30)))
    s[s < 0.8] = 0
    a = np.asarray(cc.hysteresis(s, 1.0, 2.0), dtype=bool)
    b = py.hysteresis(s, 1.0, 2.0)
    assert np.array_equal(a, b)


@pytest.mark.parametrize("nq,nr", [(1, 1), (50, 300), (400, 7)])
def test_nearest_sqdist_matches_brute_force(cc, rng, nq, nr):
    q = rng.uniform(-3, 3, size=(nq, 3))
    r = rng.uniform(-3, 3, size=(nr, 3)) * np.array([1, 1, 0.1])
    brute = ((q[:, None, :] - r[None]) ** 2).sum(-1).min(1)
    assert np.allclose(cc.nearest_sqdist(q, r), brute, rtol=1e-12, atol=1e-15)
    assert np.allclose(py.nearest_sqdist(q, r), brute, rtol=1e-12, atol=1e-15)


def test_active_backend_reported():
    assert kernels.BACKEND in ("compiled", "python")
    with pytest.raises(ValueError):
        kernels.backend("gpu")

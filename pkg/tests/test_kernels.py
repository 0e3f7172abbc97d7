"""The numba kernels must agree with their pure-numpy twins."""

import numpy as np
import pytest

from nucvae import kernels


@pytest.fixture(autouse=True)
def restore_backend():
    prev = kernels.get_backend()
    yield
    kernels.set_backend(prev)


needs_numba = pytest.mark.skipif(not kernels.HAVE_NUMBA, reason="numba unavailable")


@needs_numba
def test_lstm_gates_forward_backward_agree():
    rng = np.random.default_rng(0)
    gpre = rng.standard_normal((5, 24))
    c_prev = rng.standard_normal((5, 6))
    h1, c1, g1 = kernels.lstm_gates_forward_np(gpre, c_prev)
    h2, c2, g2 = kernels.lstm_gates_forward_nb(gpre, c_prev)
    np.testing.assert_allclose(h1, h2, rtol=1e-14, atol=1e-15)
    np.testing.assert_allclose(c1, c2, rtol=1e-14, atol=1e-15)
    np.testing.assert_allclose(g1, g2, rtol=1e-14, atol=1e-15)

    dh = rng.standard_normal((5, 6))
    dc = rng.standard_normal((5, 6))
    dg1, dcp1 = kernels.lstm_gates_backward_np(dh, dc, c_prev, c1, g1)
    dg2, dcp2 = kernels.lstm_gates_backward_nb(dh, dc, c_prev, c2, g2)
    np.testing.assert_allclose(dg1, dg2, rtol=1e-13, atol=1e-14)
    np.testing.assert_allclose(dcp1, dcp2, rtol=1e-13, atol=1e-14)


@needs_numba
def test_embedding_grad_agree():
    rng = np.random.default_rng(1)
    idx = rng.integers(0, 9, size=40)
    grad_out = rng.standard_normal((40, 5))
    t1 = np.zeros((9, 5))
    t2 = np.zeros((9, 5))
    kernels.embedding_grad_np(t1, idx, grad_out)
    kernels.embedding_grad_nb(t2, idx, grad_out)
    np.testing.assert_allclose(t1, t2, rtol=1e-14, atol=1e-15)


@needs_numba
def test_adam_step_agree():
    rng = np.random.default_rng(2)
    shape = (7, 3)
    p1 = rng.standard_normal(shape)
    p2 = p1.copy()
    g = rng.standard_normal(shape)
    m1, v1 = np.zeros(shape), np.zeros(shape)
    m2, v2 = np.zeros(shape), np.zeros(shape)
    for t in range(1, 4):
        bc1, bc2 = 1 - 0.9**t, 1 - 0.999**t
        kernels.adam_step_np(p1, g, m1, v1, 1e-3, 0.9, 0.999, 1e-8, bc1, bc2)
        kernels.adam_step_nb(p2, g, m2, v2, 1e-3, 0.9, 0.999, 1e-8, bc1, bc2)
    np.testing.assert_allclose(p1, p2, rtol=1e-13, atol=1e-15)
    np.testing.assert_allclose(m1, m2, rtol=1e-13, atol=1e-15)
    np.testing.assert_allclose(v1, v2, rtol=1e-13, atol=1e-15)


def test_backend_selection():
    kernels.set_backend("numpy")
    assert kernels.get_backend() == "numpy"
    assert kernels._active["adam_step"] is kernels.adam_step_np
    kernels.set_backend("auto")
    expected = "numba" if kernels.HAVE_NUMBA else "numpy"
    assert kernels.get_backend() == expected
    with pytest.raises(ValueError):
        kernels.set_backend("cuda")

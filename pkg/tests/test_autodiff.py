"""Finite-difference checks and behavior tests for the autodiff tape."""

import numpy as np
import pytest

from nucvae import autodiff as ad
from nucvae import kernels
from nucvae.autodiff import Tensor

from gradcheck import assert_grads_match

BACKENDS = ["numpy"] + (["numba"] if kernels.HAVE_NUMBA else [])


@pytest.fixture(autouse=True)
def restore_backend():
    prev = kernels.get_backend()
    yield
    kernels.set_backend(prev)


def rnd(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def test_elementwise_and_reductions():
    rng = np.random.default_rng(0)
    a = rnd(rng, 3, 4)
    b = rnd(rng, 3, 4)
    bias = rnd(rng, 4)

    def loss():
        x = ad.add(ad.mul(a, b), bias)          # broadcast bias
        x = ad.sub(x, ad.square(b))
        x = ad.mul(ad.sigmoid(x), ad.tanh(a))
        x = ad.add(ad.softplus(x), ad.exp(ad.mul(x, 0.1)))
        x = ad.add(x, ad.log(ad.add(ad.square(x), 1.0)))
        col = ad.tmean(x, axis=0)
        return ad.add(ad.tsum(ad.tmean(x, axis=1)), ad.tsum(col))

    assert_grads_match(loss, {"a": a, "b": b, "bias": bias})


def test_matmul_concat_narrow_reshape():
    rng = np.random.default_rng(1)
    a = rnd(rng, 3, 5)
    w1 = rnd(rng, 5, 4)
    w2 = rnd(rng, 5, 2)

    def loss():
        x = ad.concat([ad.matmul(a, w1), ad.matmul(a, w2)], axis=1)
        y = ad.narrow(x, 1, 1, 4)
        y = ad.reshape(y, (12,))
        return ad.tsum(ad.mul(y, y))

    assert_grads_match(loss, {"a": a, "w1": w1, "w2": w2})


def test_neg_scalar_mixing():
    rng = np.random.default_rng(2)
    a = rnd(rng, 4)

    def loss():
        return ad.tsum(ad.add(ad.neg(a), ad.mul(2.0, ad.sub(1.0, a))))

    assert_grads_match(loss, {"a": a})
    assert np.allclose(a.grad, -3.0)


def test_softmax_nll_matches_manual_and_grad():
    rng = np.random.default_rng(3)
    logits = rnd(rng, 4, 6)
    targets = np.array([0, 5, 2, 3])
    mask = np.array([1.0, 1.0, 0.0, 1.0])

    nll = ad.softmax_nll(logits, targets, mask)
    z = logits.data
    ref = -np.log(np.exp(z) / np.exp(z).sum(1, keepdims=True))[np.arange(4), targets]
    assert np.allclose(nll.data, ref * mask, atol=1e-12)

    def loss():
        return ad.tsum(ad.softmax_nll(logits, targets, mask))

    assert_grads_match(loss, {"logits": logits})


def test_embedding_gather_scatter():
    rng = np.random.default_rng(4)
    for backend in BACKENDS:
        kernels.set_backend(backend)
        table = rnd(rng, 7, 3)
        idx = np.array([[1, 2, 2], [0, 6, 1]])
        coef = Tensor(rng.standard_normal((2, 3, 3)))

        def loss():
            return ad.tsum(ad.mul(ad.embedding(table, idx), coef))

        assert_grads_match(loss, {"table": table})


@pytest.mark.parametrize("backend", BACKENDS)
def test_lstm_cell_grad(backend):
    kernels.set_backend(backend)
    rng = np.random.default_rng(5)
    x = rnd(rng, 2, 3)
    h0 = rnd(rng, 2, 4)
    c0 = rnd(rng, 2, 4)
    w = rnd(rng, 3, 16)
    u = rnd(rng, 4, 16)
    b = rnd(rng, 16)
    coef = Tensor(rng.standard_normal((2, 8)))

    def loss():
        return ad.tsum(ad.mul(ad.lstm_cell(x, h0, c0, w, u, b), coef))

    assert_grads_match(loss, {"x": x, "h0": h0, "c0": c0, "w": w, "u": u, "b": b})


@pytest.mark.parametrize("backend", BACKENDS)
def test_lstm_seq_grad_with_variable_lengths(backend):
    kernels.set_backend(backend)
    rng = np.random.default_rng(6)
    x = rnd(rng, 3, 5, 2)
    w = rnd(rng, 2, 12)
    u = rnd(rng, 3, 12)
    b = rnd(rng, 12)
    lengths = np.array([5, 2, 4])
    coef = Tensor(rng.standard_normal((3, 5, 3)))

    def loss():
        return ad.tsum(ad.mul(ad.lstm_seq(x, lengths, w, u, b), coef))

    assert_grads_match(loss, {"x": x, "w": w, "u": u, "b": b})


def test_lstm_seq_masks_padded_tail():
    rng = np.random.default_rng(7)
    x = rnd(rng, 2, 4, 2)
    w, u, b = rnd(rng, 2, 8), rnd(rng, 2, 8), rnd(rng, 8)
    out = ad.lstm_seq(x, np.array([2, 4]), w, u, b)
    assert np.all(out.data[0, 2:] == 0.0)
    assert np.all(out.data[1] != 0.0)


def test_lstm_seq_matches_cell_chain():
    rng = np.random.default_rng(8)
    x = rnd(rng, 2, 3, 2)
    w, u, b = rnd(rng, 2, 8), rnd(rng, 2, 8), rnd(rng, 8)
    seq = ad.lstm_seq(x, np.array([3, 3]), w, u, b)
    h = Tensor(np.zeros((2, 2)))
    c = Tensor(np.zeros((2, 2)))
    for t in range(3):
        hc = ad.lstm_cell(Tensor(x.data[:, t]), h, c, w, u, b)
        h = ad.narrow(hc, 1, 0, 2)
        c = ad.narrow(hc, 1, 2, 2)
        assert np.allclose(seq.data[:, t], h.data, atol=1e-12)


def test_rows_at_time_and_reverse():
    rng = np.random.default_rng(9)
    x = rnd(rng, 3, 4, 2)
    lengths = np.array([4, 1, 3])
    coef = Tensor(rng.standard_normal((3, 2)))
    coef3 = Tensor(rng.standard_normal((3, 4, 2)))

    rev = ad.reverse_within_length(x, lengths)
    assert np.allclose(rev.data[0], x.data[0, ::-1])
    assert np.allclose(rev.data[1], x.data[1])  # length-1 prefix + untouched tail
    assert np.allclose(rev.data[2, :3], x.data[2, 2::-1])
    twice = ad.reverse_within_length(rev, lengths)
    assert np.allclose(twice.data, x.data, atol=0)

    def loss():
        picked = ad.rows_at_time(ad.reverse_within_length(x, lengths), lengths - 1)
        return ad.add(
            ad.tsum(ad.mul(picked, coef)),
            ad.tsum(ad.mul(ad.reverse_within_length(x, lengths), coef3)),
        )

    assert_grads_match(loss, {"x": x})


def test_backward_requires_scalar():
    t = Tensor(np.zeros(3), requires_grad=True)
    with pytest.raises(ValueError):
        ad.backward(ad.mul(t, 2.0))


def test_no_grad_skips_graph():
    a = Tensor(np.ones(3), requires_grad=True)
    with ad.no_grad():
        out = ad.mul(a, 3.0)
    assert out._backward is None and not out.requires_grad


def test_grad_accumulates_across_shared_use():
    a = Tensor(np.array([2.0]), requires_grad=True)
    loss = ad.add(ad.mul(a, 3.0), ad.mul(a, 4.0))
    ad.backward(loss)
    assert np.allclose(a.grad, 7.0)

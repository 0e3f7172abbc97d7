"""Central finite-difference gradient checking used across the test suite."""

import numpy as np

from nucvae import autodiff as ad


def numeric_grad(loss_fn, param, h=1e-5):
    """Central-difference gradient of loss_fn() w.r.t. every param element."""
    flat = param.data.reshape(-1)
    grad = np.zeros_like(flat)
    with ad.no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            plus = loss_fn().item()
            flat[i] = orig - h
            minus = loss_fn().item()
            flat[i] = orig
            grad[i] = (plus - minus) / (2.0 * h)
    return grad.reshape(param.data.shape)


def max_rel_error(loss_fn, params, h=1e-5, floor=1e-6):
    """Worst relative error between analytic and numeric grads per param.

    The floor keeps near-zero gradients from blowing up the denominator;
    below it the comparison is effectively absolute.
    """
    ad.zero_grads(params.values())
    loss = loss_fn()
    ad.backward(loss)
    report = {}
    for name, p in params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        numeric = numeric_grad(loss_fn, p, h)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
        report[name] = float((np.abs(analytic - numeric) / denom).max())
    return report


def assert_grads_match(loss_fn, params, h=1e-5, rtol=1e-3, floor=1e-6):
    report = max_rel_error(loss_fn, params, h=h, floor=floor)
    bad = {k: v for k, v in report.items() if v > rtol}
    assert not bad, f"gradient mismatches: {bad}"
    return report

"""Hot numeric kernels: fused LSTM gate math, embedding scatter-add, Adam.

Each kernel has a numba @njit implementation and a pure-numpy twin. The
active backend is chosen once at import from the NUCVAE_KERNELS env var
("numba", "numpy", or "auto"; default auto = numba when importable) and can
be switched at runtime with set_backend(). All kernels operate on float64
C-contiguous arrays; gate layout is [input | forget | cell | output].

benchmarks/bench_kernels.py times the two backends against each other.
"""

import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dep, but stay usable
    HAVE_NUMBA = False


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------

def _sigmoid(x):
    # overflow in exp only saturates the result, so silence the warning
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def lstm_gates_forward_np(gpre, c_prev):
    """Pointwise LSTM cell update from pre-activation gates.

    gpre: (B, 4H) = x@W + h_prev@U + b. Returns (h, c, gates) where gates
    stores the post-activation values needed by the backward pass.
    """
    hdim = c_prev.shape[1]
    gates = np.empty_like(gpre)
    gates[:, : 2 * hdim] = _sigmoid(gpre[:, : 2 * hdim])          # i, f
    gates[:, 2 * hdim : 3 * hdim] = np.tanh(gpre[:, 2 * hdim : 3 * hdim])  # g
    gates[:, 3 * hdim :] = _sigmoid(gpre[:, 3 * hdim :])          # o
    i = gates[:, :hdim]
    f = gates[:, hdim : 2 * hdim]
    g = gates[:, 2 * hdim : 3 * hdim]
    o = gates[:, 3 * hdim :]
    c = f * c_prev + i * g
    h = o * np.tanh(c)
    return h, c, gates


def lstm_gates_backward_np(dh, dc_in, c_prev, c, gates):
    """Backward of lstm_gates_forward. Returns (dgpre, dc_prev)."""
    hdim = c_prev.shape[1]
    i = gates[:, :hdim]
    f = gates[:, hdim : 2 * hdim]
    g = gates[:, 2 * hdim : 3 * hdim]
    o = gates[:, 3 * hdim :]
    tc = np.tanh(c)
    dc = dc_in + dh * o * (1.0 - tc * tc)
    dgpre = np.empty_like(gates)
    dgpre[:, :hdim] = dc * g * i * (1.0 - i)
    dgpre[:, hdim : 2 * hdim] = dc * c_prev * f * (1.0 - f)
    dgpre[:, 2 * hdim : 3 * hdim] = dc * i * (1.0 - g * g)
    dgpre[:, 3 * hdim :] = dh * tc * o * (1.0 - o)
    dc_prev = dc * f
    return dgpre, dc_prev


def embedding_grad_np(grad_table, idx, grad_out):
    """Accumulate grad_out rows into grad_table at idx (in place)."""
    np.add.at(grad_table, idx, grad_out)


def adam_step_np(param, grad, m, v, lr, beta1, beta2, eps, bc1, bc2):
    """One Adam update, in place. bc1/bc2 are the bias corrections 1-b^t."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    mhat = m / bc1
    vhat = v / bc2
    param -= lr * mhat / (np.sqrt(vhat) + eps)


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def lstm_gates_forward_nb(gpre, c_prev):
        batch, hdim = c_prev.shape
        gates = np.empty_like(gpre)
        h = np.empty_like(c_prev)
        c = np.empty_like(c_prev)
        for b in range(batch):
            for j in range(hdim):
                gi = 1.0 / (1.0 + np.exp(-gpre[b, j]))
                gf = 1.0 / (1.0 + np.exp(-gpre[b, hdim + j]))
                gg = np.tanh(gpre[b, 2 * hdim + j])
                go = 1.0 / (1.0 + np.exp(-gpre[b, 3 * hdim + j]))
                cc = gf * c_prev[b, j] + gi * gg
                gates[b, j] = gi
                gates[b, hdim + j] = gf
                gates[b, 2 * hdim + j] = gg
                gates[b, 3 * hdim + j] = go
                c[b, j] = cc
                h[b, j] = go * np.tanh(cc)
        return h, c, gates

    @njit(cache=True)
    def lstm_gates_backward_nb(dh, dc_in, c_prev, c, gates):
        batch, hdim = c_prev.shape
        dgpre = np.empty_like(gates)
        dc_prev = np.empty_like(c_prev)
        for b in range(batch):
            for j in range(hdim):
                gi = gates[b, j]
                gf = gates[b, hdim + j]
                gg = gates[b, 2 * hdim + j]
                go = gates[b, 3 * hdim + j]
                tc = np.tanh(c[b, j])
                dc = dc_in[b, j] + dh[b, j] * go * (1.0 - tc * tc)
                dgpre[b, j] = dc * gg * gi * (1.0 - gi)
                dgpre[b, hdim + j] = dc * c_prev[b, j] * gf * (1.0 - gf)
                dgpre[b, 2 * hdim + j] = dc * gi * (1.0 - gg * gg)
                dgpre[b, 3 * hdim + j] = dh[b, j] * tc * go * (1.0 - go)
                dc_prev[b, j] = dc * gf
        return dgpre, dc_prev

    @njit(cache=True)
    def embedding_grad_nb(grad_table, idx, grad_out):
        n, edim = grad_out.shape
        for r in range(n):
            row = idx[r]
            for j in range(edim):
                grad_table[row, j] += grad_out[r, j]

    @njit(cache=True)
    def adam_step_nb(param, grad, m, v, lr, beta1, beta2, eps, bc1, bc2):
        n = param.size
        p = param.reshape(n)
        g = grad.reshape(n)
        mm = m.reshape(n)
        vv = v.reshape(n)
        for j in range(n):
            mm[j] = beta1 * mm[j] + (1.0 - beta1) * g[j]
            vv[j] = beta2 * vv[j] + (1.0 - beta2) * g[j] * g[j]
            p[j] -= lr * (mm[j] / bc1) / (np.sqrt(vv[j] / bc2) + eps)


# ---------------------------------------------------------------------------
# backend selection
# ---------------------------------------------------------------------------

_BACKENDS = {
    "numpy": {
        "lstm_gates_forward": lstm_gates_forward_np,
        "lstm_gates_backward": lstm_gates_backward_np,
        "embedding_grad": embedding_grad_np,
        "adam_step": adam_step_np,
    }
}
if HAVE_NUMBA:
    _BACKENDS["numba"] = {
        "lstm_gates_forward": lstm_gates_forward_nb,
        "lstm_gates_backward": lstm_gates_backward_nb,
        "embedding_grad": embedding_grad_nb,
        "adam_step": adam_step_nb,
    }

_active = {}
_active_name = None


def set_backend(name):
    """Select the kernel backend: "numba", "numpy", or "auto"."""
    global _active_name
    if name == "auto":
        name = "numba" if HAVE_NUMBA else "numpy"
    if name not in _BACKENDS:
        raise ValueError(
            f"unknown kernel backend {name!r}; available: {sorted(_BACKENDS)}"
        )
    _active.update(_BACKENDS[name])
    _active_name = name


def get_backend():
    return _active_name


set_backend(os.environ.get("NUCVAE_KERNELS", "auto"))


def lstm_gates_forward(gpre, c_prev):
    return _active["lstm_gates_forward"](gpre, c_prev)


def lstm_gates_backward(dh, dc_in, c_prev, c, gates):
    return _active["lstm_gates_backward"](dh, dc_in, c_prev, c, gates)


def embedding_grad(grad_table, idx, grad_out):
    return _active["embedding_grad"](grad_table, idx, grad_out)


def adam_step(param, grad, m, v, lr, beta1, beta2, eps, bc1, bc2):
    return _active["adam_step"](param, grad, m, v, lr, beta1, beta2, eps, bc1, bc2)

"""Reverse-mode autodiff over float64 numpy arrays.

A Tensor wraps an ndarray plus an optional gradient and a backward closure;
building an expression records the graph, backward() walks it in reverse
topological order. The op set is deliberately small: exactly what a
recurrent VAE with affine heads and MLP estimators needs. Recurrent and
scatter-heavy steps call the fused kernels in kernels.py; dense matmuls go
through BLAS.

Gradient correctness is pinned by central finite differences in the test
suite, so every new op must come with a check there.
"""

import numpy as np

from . import kernels

_grad_enabled = True


class no_grad:
    """Context manager disabling graph construction (inference/FD evals)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._backward = None
        self._parents = ()

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; all routed through the module-level ops
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def astensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, rng=None, scale=None):
    """Parameter tensor. With rng/scale, init U(-scale, scale) of given shape."""
    if rng is not None:
        data = rng.uniform(-scale, scale, size=data)
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def _make(data, parents, backward_fn):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(loss):
    """Backpropagate from a scalar loss tensor."""
    if loss.data.size != 1:
        raise ValueError("backward() requires a scalar loss")
    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited and p._parents:
                stack.append((p, False))
            elif id(p) not in visited:
                visited.add(id(p))
                topo.append(p)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def zero_grads(params):
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# elementwise and linear algebra
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = astensor(a), astensor(b)
    out_data = a.data + b.data

    def back(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), back)


def sub(a, b):
    a, b = astensor(a), astensor(b)
    out_data = a.data - b.data

    def back(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, -_unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), back)


def mul(a, b):
    a, b = astensor(a), astensor(b)
    out_data = a.data * b.data

    def back(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), back)


def neg(a):
    a = astensor(a)

    def back(g):
        _accum(a, -g)

    return _make(-a.data, (a,), back)


def matmul(a, b):
    a, b = astensor(a), astensor(b)
    out_data = a.data @ b.data

    def back(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _make(out_data, (a, b), back)


def sigmoid(a):
    a = astensor(a)
    out_data = np.empty_like(a.data)
    pos = a.data >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ex = np.exp(a.data[~pos])
    out_data[~pos] = ex / (1.0 + ex)

    def back(g):
        _accum(a, g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), back)


def tanh(a):
    a = astensor(a)
    out_data = np.tanh(a.data)

    def back(g):
        _accum(a, g * (1.0 - out_data * out_data))

    return _make(out_data, (a,), back)


def exp(a):
    a = astensor(a)
    out_data = np.exp(a.data)

    def back(g):
        _accum(a, g * out_data)

    return _make(out_data, (a,), back)


def log(a):
    a = astensor(a)

    def back(g):
        _accum(a, g / a.data)

    return _make(np.log(a.data), (a,), back)


def softplus(a):
    """log(1 + e^x), computed stably."""
    a = astensor(a)
    out_data = np.logaddexp(0.0, a.data)

    def back(g):
        s = np.empty_like(a.data)
        pos = a.data >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
        ex = np.exp(a.data[~pos])
        s[~pos] = ex / (1.0 + ex)
        _accum(a, g * s)

    return _make(out_data, (a,), back)


def square(a):
    a = astensor(a)

    def back(g):
        _accum(a, g * 2.0 * a.data)

    return _make(a.data * a.data, (a,), back)


def tsum(a, axis=None, keepdims=False):
    a = astensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(gg, a.data.shape).copy())

    return _make(out_data, (a,), back)


def tmean(a, axis=None, keepdims=False):
    a = astensor(a)
    if axis is None:
        count = a.data.size
    else:
        count = a.data.shape[axis]
    out_data = a.data.mean(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is None:
            _accum(a, np.broadcast_to(g / count, a.data.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(gg / count, a.data.shape).copy())

    return _make(out_data, (a,), back)


def concat(tensors, axis):
    tensors = [astensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(t, g[tuple(sl)])

    return _make(out_data, tuple(tensors), back)


def reshape(a, shape):
    a = astensor(a)
    orig = a.data.shape

    def back(g):
        _accum(a, g.reshape(orig))

    return _make(a.data.reshape(shape), (a,), back)


def narrow(a, axis, start, length):
    """Contiguous slice [start, start+length) along axis."""
    a = astensor(a)
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)

    def back(g):
        if not a.requires_grad:
            return
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        a.grad[sl] += g

    return _make(a.data[sl].copy(), (a,), back)


# ---------------------------------------------------------------------------
# network primitives
# ---------------------------------------------------------------------------

def embedding(table, idx):
    """Rows of table at idx; output idx.shape + (E,)."""
    idx = np.asarray(idx, dtype=np.int64)
    out_data = table.data[idx]

    def back(g):
        if not table.requires_grad:
            return
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        g2d = np.ascontiguousarray(g.reshape(-1, table.data.shape[1]))
        kernels.embedding_grad(table.grad, idx.reshape(-1), g2d)

    return _make(out_data, (table,), back)


def lstm_cell(x, h_prev, c_prev, w, u, b):
    """One LSTM step. Returns [h | c] concatenated, shape (B, 2H)."""
    gpre = x.data @ w.data + h_prev.data @ u.data + b.data
    h, c, gates = kernels.lstm_gates_forward(gpre, c_prev.data)
    out_data = np.concatenate([h, c], axis=1)
    hdim = c.shape[1]

    def back(g):
        dh = np.ascontiguousarray(g[:, :hdim])
        dc_in = np.ascontiguousarray(g[:, hdim:])
        dgpre, dc_prev = kernels.lstm_gates_backward(
            dh, dc_in, c_prev.data, c, gates
        )
        _accum(x, dgpre @ w.data.T)
        _accum(h_prev, dgpre @ u.data.T)
        _accum(c_prev, dc_prev)
        _accum(w, x.data.T @ dgpre)
        _accum(u, h_prev.data.T @ dgpre)
        _accum(b, dgpre.sum(axis=0))

    return _make(out_data, (x, h_prev, c_prev, w, u, b), back)


def lstm_seq(x, lengths, w, u, b):
    """Unidirectional LSTM over a padded batch, zero initial state.

    x: (B, T, E); lengths: (B,) valid lengths. Output (B, T, H) with
    positions at or beyond each example's length zeroed, so stacked layers
    and gathers never see stale recurrent state from the padded tail.
    """
    batch, tsteps, _ = x.data.shape
    hdim = u.data.shape[0]
    lengths = np.asarray(lengths, dtype=np.int64)
    # time-major internal buffers keep every per-step slice contiguous
    gin = x.data.reshape(batch * tsteps, -1) @ w.data + b.data
    gin = np.ascontiguousarray(
        gin.reshape(batch, tsteps, 4 * hdim).transpose(1, 0, 2)
    )
    hs = np.empty((tsteps, batch, hdim))
    cs = np.empty((tsteps, batch, hdim))
    gates_all = np.empty((tsteps, batch, 4 * hdim))
    h = np.zeros((batch, hdim))
    c = np.zeros((batch, hdim))
    for t in range(tsteps):
        gpre = gin[t] + h @ u.data
        h, c, gates = kernels.lstm_gates_forward(gpre, c)
        hs[t] = h
        cs[t] = c
        gates_all[t] = gates
    out_data = hs.transpose(1, 0, 2).copy()
    tail = np.arange(tsteps)[None, :] >= lengths[:, None]
    out_data[tail] = 0.0

    def back(g):
        g = g.transpose(1, 0, 2).copy()
        g[tail.T] = 0.0
        dgin = np.empty_like(gates_all)
        dh_next = np.zeros((batch, hdim))
        dc_next = np.zeros((batch, hdim))
        zeros = np.zeros((batch, hdim))
        du = np.zeros_like(u.data) if u.requires_grad else None
        for t in range(tsteps - 1, -1, -1):
            dh = g[t] + dh_next
            c_prev = cs[t - 1] if t > 0 else zeros
            dgpre, dc_prev = kernels.lstm_gates_backward(
                dh, dc_next, c_prev, cs[t], gates_all[t]
            )
            dgin[t] = dgpre
            dh_next = dgpre @ u.data.T
            dc_next = dc_prev
            if t > 0 and du is not None:
                du += hs[t - 1].T @ dgpre
        if du is not None:
            _accum(u, du)
        dgin2d = np.ascontiguousarray(dgin.transpose(1, 0, 2)).reshape(
            batch * tsteps, -1
        )
        _accum(x, (dgin2d @ w.data.T).reshape(x.data.shape))
        _accum(w, x.data.reshape(batch * tsteps, -1).T @ dgin2d)
        _accum(b, dgin2d.sum(axis=0))

    return _make(out_data, (x, w, u, b), back)


def rows_at_time(h_all, t_idx):
    """Per-example gather along the time axis: out[b] = h_all[b, t_idx[b]]."""
    t_idx = np.asarray(t_idx, dtype=np.int64)
    batch = h_all.data.shape[0]
    rows = np.arange(batch)
    out_data = h_all.data[rows, t_idx]

    def back(g):
        if not h_all.requires_grad:
            return
        if h_all.grad is None:
            h_all.grad = np.zeros_like(h_all.data)
        h_all.grad[rows, t_idx] += g

    return _make(out_data, (h_all,), back)


def _reverse_index(tsteps, lengths):
    # positions within each length reversed; padded tail left in place
    idx = np.tile(np.arange(tsteps), (len(lengths), 1))
    for b, n in enumerate(lengths):
        idx[b, :n] = np.arange(n - 1, -1, -1)
    return idx


def reverse_within_length(x, lengths):
    """Reverse each sequence inside its valid length (self-inverse)."""
    lengths = np.asarray(lengths, dtype=np.int64)
    batch, tsteps = x.data.shape[:2]
    idx = _reverse_index(tsteps, lengths)
    rows = np.arange(batch)[:, None]
    out_data = x.data[rows, idx]

    def back(g):
        _accum(x, g[rows, idx])

    return _make(out_data, (x,), back)


def softmax_nll(logits, targets, mask):
    """Per-example negative log-likelihood, multiplied by mask. Shape (B,)."""
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=np.float64)
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    ex = np.exp(z - zmax)
    denom = ex.sum(axis=1)
    logz = np.log(denom) + zmax[:, 0]
    rows = np.arange(z.shape[0])
    out_data = (logz - z[rows, targets]) * mask

    def back(g):
        probs = ex / denom[:, None]
        probs[rows, targets] -= 1.0
        _accum(logits, probs * (g * mask)[:, None])

    return _make(out_data, (logits,), back)


def affine(x, w, b):
    """x @ w + b, the everywhere-used linear map."""
    return add(matmul(x, w), b)

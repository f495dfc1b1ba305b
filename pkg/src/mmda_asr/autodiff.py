"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Every differentiable operation returns a new :class:`Tensor` that remembers
its parents and a closure mapping the output gradient to input gradients.
Each such node receives a monotonically increasing sequence number when it
is created, so the creation order is a valid topological order of the
graph.  :func:`backward` collects the nodes reachable from the loss and
visits each of them exactly once, in reverse creation order.

The tape is dynamic: a fresh graph is built by every forward pass, which
suits variable-length sequences.

Set ``MMDA_DEBUG_NAN=1`` (or call :func:`set_debug`) to assert that every
op output is finite.
"""

import contextlib
import itertools
import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError, OOVError, ConfigError

_seq_counter = itertools.count()
_grad_enabled = True
_debug = os.environ.get("MMDA_DEBUG_NAN", "0") not in ("", "0")

MAX_RANK = 3


def set_debug(flag):
    global _debug
    _debug = bool(flag)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled():
    return _grad_enabled


class Tensor:
    """Dense real tensor of rank 0-3 with an optional gradient accumulator.

    Leaves created with ``requires_grad=True`` get a zero-initialised
    ``grad`` array of the same shape. Interior nodes carry the backward
    closure instead and never store gradients themselves.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_seq", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        if arr.ndim > MAX_RANK:
            raise DimensionError(f"rank {arr.ndim} tensors are not supported (max {MAX_RANK})")
        if any(d < 1 for d in arr.shape):
            raise DimensionError(f"tensor dimensions must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents = ()
        self._backward = None
        self._op = None
        self._seq = -1
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return self._backward is None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def zero_grad(self):
        if self.grad is not None:
            self.grad.fill(0.0)

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self):
        extra = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{extra})"

    def __len__(self):
        return self.data.shape[0]

    # -- operator sugar ---------------------------------------------------
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

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _const_like(x, ref):
    """Wrap a python scalar / array as a constant with ``ref``'s dtype."""
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=ref.data.dtype))


def _make(data, parents, backward, op):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        out._op = op
        out._seq = next(_seq_counter)
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
        out._op = op
        out._seq = -1
    if _debug and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite output from op '{op}'")
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def backward(loss):
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

    Repeated calls on the same (intact) graph accumulate.
    """
    if not isinstance(loss, Tensor) or loss.data.size != 1 or loss.ndim > 1:
        shape = getattr(loss, "shape", None)
        raise ContractError(f"backward() needs a scalar loss, got shape {shape}")
    if not loss.requires_grad:
        return
    seed = np.ones_like(loss.data)
    if loss.is_leaf:
        loss.grad += seed
        return

    nodes = []
    seen = set()
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        if t._backward is None:
            continue
        nodes.append(t)
        for p in t._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append(p)
    nodes.sort(key=lambda t: t._seq, reverse=True)

    grads = {id(loss): seed}
    for node in nodes:
        g = grads.pop(id(node), None)
        if g is None:
            continue
        in_grads = node._backward(g)
        for parent, pg in zip(node._parents, in_grads):
            if pg is None or not parent.requires_grad:
                continue
            if parent._backward is None:
                parent.grad += pg
            else:
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b):
    a = _const_like(a, b) if not isinstance(a, Tensor) else a
    b = _const_like(b, a)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    a = _const_like(a, b) if not isinstance(a, Tensor) else a
    b = _const_like(b, a)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    a = _const_like(a, b) if not isinstance(a, Tensor) else a
    b = _const_like(b, a)
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad * bd, (a, b), bw, "mul")


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a):
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sigmoid(a):
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a):
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def apply_activation(x, kind):
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "tanh":
        return tanh(x)
    raise ConfigError(f"unknown activation '{kind}' (expected sigmoid or tanh)")


def _sigmoid(x):
    # tanh form never overflows
    return 0.5 * np.tanh(0.5 * x) + 0.5


# ---------------------------------------------------------------------------
# linear algebra and reductions
# ---------------------------------------------------------------------------

def matmul(a, b):
    """Matrix product with numpy semantics for ranks 1-3.

    Supported: (k)@(k,n), (m,k)@(k,n), (B,m,k)@(k,n), (B,m,k)@(B,k,n).
    """
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    if b.ndim == 3 and (a.ndim != 3 or a.shape[0] != b.shape[0]):
        raise DimensionError(f"matmul batch mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = g @ np.swapaxes(bd, -1, -2)
        if b.requires_grad:
            if ad.ndim == 1:
                gb = np.outer(ad, g)
            elif bd.ndim == 2 and ad.ndim == 3:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _make(out, (a, b), bw, "matmul")


def tsum(a, axis=None, keepdims=False):
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw, "sum")


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape):
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None):
    inv = None if axes is None else tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    datas = [t.data for t in tensors]
    try:
        out = np.concatenate(datas, axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat shape mismatch: {[d.shape for d in datas]}") from exc
    sizes = np.cumsum([d.shape[axis] for d in datas])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(out, tuple(tensors), bw, "concat")


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)

    def bw(g):
        return tuple(np.squeeze(x, axis=axis) for x in np.split(g, n, axis=axis))

    return _make(out, tuple(tensors), bw, "stack")


def getitem(a, idx):
    shape = a.shape
    out = a.data[idx]
    if np.ndim(out) == 0:
        out = np.asarray(out)

    basic = _is_basic_index(idx)

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(out, copy=True), (a,), bw, "getitem")


def _is_basic_index(idx):
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(p is None or p is Ellipsis or isinstance(p, (slice, int, np.integer)) for p in parts)


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------

def _masked_shift(x, axis, mask):
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return x - m


def softmax(x, axis=-1, mask=None):
    """Softmax with max-subtraction. Positions where ``mask`` is False get 0."""
    z = _masked_shift(x.data, axis, mask)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), bw, "softmax")


def log_softmax(x, axis=-1, mask=None):
    z = _masked_shift(x.data, axis, mask)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)
    if mask is not None:
        out = np.where(mask, out, 0.0)

    def bw(g):
        if mask is not None:
            g = np.where(mask, g, 0.0)
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), bw, "log_softmax")


# ---------------------------------------------------------------------------
# indexing ops
# ---------------------------------------------------------------------------

def embedding_lookup(table, ids):
    """Gather rows of ``table`` (V x E). Output shape is ``ids.shape + (E,)``."""
    ids = np.asarray(ids, dtype=np.int64)
    V = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        bad = int(ids.max()) if ids.max() >= V else int(ids.min())
        raise OOVError(f"token id {bad} out of vocabulary of size {V}")
    out = table.data[ids]

    def bw(g):
        full = np.zeros(table.shape, dtype=g.dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _make(out, (table,), bw, "embedding")


def gather_time(x, idx):
    """out[b, t] = x[b, idx[b, t]] for a (B, T, F) tensor."""
    idx = np.asarray(idx, dtype=np.int64)
    B = x.shape[0]
    rows = np.arange(B)[:, None]
    out = x.data[rows, idx]

    def bw(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        np.add.at(full, (np.broadcast_to(rows, idx.shape), idx), g)
        return (full,)

    return _make(out, (x,), bw, "gather_time")


def pick_last(x, ids):
    """Select ``x[..., ids[...]]`` along the last axis (e.g. target log-probs)."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and ids.max() >= x.shape[-1]:
        raise OOVError(f"token id {int(ids.max())} out of vocabulary of size {x.shape[-1]}")
    out = np.take_along_axis(x.data, ids[..., None], axis=-1)[..., 0]

    def bw(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        np.put_along_axis(full, ids[..., None], g[..., None], axis=-1)
        return (full,)

    return _make(out, (x,), bw, "pick_last")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv1d_same(seq, kernel, batched=False):
    """Same-length 1-D cross-correlation with zero padding.

    ``seq`` is a single sequence, (T,) or (T, 1), or a (B, T) batch when
    ``batched`` is set. ``kernel`` is (K,) or (F, K) with K odd. Output is
    (T, F) or (B, T, F) with
    ``out[..., t, f] = sum_k kernel[f, k] * pad(seq)[..., t + k]``.
    """
    K = kernel.shape[-1]
    if K % 2 == 0:
        raise ConfigError(f"conv1d_same needs an odd kernel width, got {K}")
    sd = seq.data
    if batched:
        if sd.ndim != 2:
            raise DimensionError(f"batched conv1d_same expects (B, T), got {sd.shape}")
        s2 = sd
    else:
        if sd.ndim == 2 and sd.shape[1] != 1:
            raise DimensionError(f"conv1d_same expects (T,) or (T, 1), got {sd.shape}")
        s2 = sd.reshape(1, -1)
    kd = kernel.data if kernel.ndim == 2 else kernel.data.reshape(1, K)
    pad = K // 2
    padded = np.pad(s2, ((0, 0), (pad, pad)))
    win = np.ascontiguousarray(sliding_window_view(padded, K, axis=1))  # B x T x K
    out = win @ kd.T  # B x T x F
    T = s2.shape[1]

    def bw(g):
        g3 = g.reshape(out.shape)
        gs = gk = None
        if kernel.requires_grad:
            gk = np.einsum("btf,btk->fk", g3, win).reshape(kernel.shape)
        if seq.requires_grad:
            gw = g3 @ kd  # B x T x K
            gp = np.zeros_like(padded)
            for k in range(K):
                gp[:, k:k + T] += gw[:, :, k]
            gs = gp[:, pad:pad + T].reshape(sd.shape)
        return gs, gk

    return _make(out if batched else out[0], (seq, kernel), bw, "conv1d")


# ---------------------------------------------------------------------------
# fused LSTM primitives
# ---------------------------------------------------------------------------
# Gate layout along the 4H axis: input, forget, output, candidate.

def lstm_cell(x, h, c, W, b):
    """One fused LSTM step; returns a (B, 2H) tensor holding [h', c']."""
    H = h.shape[-1]
    I = x.shape[-1]
    if W.shape != (I + H, 4 * H) or b.shape != (4 * H,):
        raise DimensionError(
            f"lstm weights {W.shape}/{b.shape} do not fit input {x.shape} and state {h.shape}")
    Wd = W.data
    xd, hd, cd = x.data, h.data, c.data
    z = xd @ Wd[:I] + hd @ Wd[I:] + b.data
    i = _sigmoid(z[..., :H])
    f = _sigmoid(z[..., H:2 * H])
    o = _sigmoid(z[..., 2 * H:3 * H])
    g = np.tanh(z[..., 3 * H:])
    c_new = f * cd + i * g
    tc = np.tanh(c_new)
    h_new = o * tc
    out = np.concatenate([h_new, c_new], axis=-1)

    def bw(grad):
        dh = grad[..., :H]
        dc = grad[..., H:] + dh * o * (1.0 - tc * tc)
        dz = np.concatenate([
            dc * g * i * (1.0 - i),
            dc * cd * f * (1.0 - f),
            dh * tc * o * (1.0 - o),
            dc * i * (1.0 - g * g),
        ], axis=-1)
        xh = np.concatenate([xd, hd], axis=-1)
        if xh.ndim == 1:
            dW = np.outer(xh, dz)
        else:
            dW = xh.T @ dz
        dxh = dz @ Wd.T
        return dxh[..., :I], dxh[..., I:], dc * f, dW, dz.sum(axis=0) if dz.ndim > 1 else dz

    return _make(out, (x, h, c, W, b), bw, "lstm_cell")


def reverse_index(lengths, T):
    """Per-sequence time reversal of a right-padded batch (an involution).

    Valid frames t < L are mapped to L-1-t; padding stays in place.
    """
    lengths = np.asarray(lengths)
    t = np.arange(T)[None, :]
    return np.where(t < lengths[:, None], lengths[:, None] - 1 - t, t)


def _lstm_scan(xw, Wh):
    """Run D independent LSTMs over time-major pre-activations.

    ``xw`` is (T, D, B, 4H) = x @ Wx + b, ``Wh`` is (D, H, 4H). Returns the
    hidden states (T, D, B, H) and a cache for :func:`_lstm_scan_grad`.
    """
    T, D, B, H4 = xw.shape
    H = H4 // 4
    dt = xw.dtype
    # sigmoid(z) = 0.5 * tanh(z / 2) + 0.5, so halve the i/f/o columns once
    scale = np.ones(H4, dtype=dt)
    scale[:3 * H] = 0.5
    xs = xw * scale
    Whs = Wh * scale
    acts = np.empty_like(xw)
    cs = np.empty((T, D, B, H), dtype=dt)
    tcs = np.empty_like(cs)
    hs = np.empty_like(cs)
    h = np.zeros((D, B, H), dtype=dt)
    c = h
    for t in range(T):
        z = np.matmul(h, Whs)
        z += xs[t]
        a = acts[t]
        np.tanh(z, out=a)
        sg = a[..., :3 * H]
        sg *= 0.5
        sg += 0.5
        c = a[..., H:2 * H] * c
        c += a[..., :H] * a[..., 3 * H:]
        cs[t] = c
        np.tanh(c, out=tcs[t])
        h = np.multiply(a[..., 2 * H:3 * H], tcs[t], out=hs[t])
    return hs, (acts, cs, tcs)


def _lstm_scan_grad(G, hs, cache, Wh):
    """Backprop through :func:`_lstm_scan`; returns d(xw) (T, D, B, 4H) and dWh."""
    acts, cs, tcs = cache
    T, D, B, H = hs.shape
    i, f, o, g = (acts[..., k * H:(k + 1) * H] for k in range(4))
    c_prev = np.concatenate([np.zeros_like(cs[:1]), cs[:-1]], axis=0)
    fac_i = g * i * (1.0 - i)
    fac_f = c_prev * f * (1.0 - f)
    fac_o = tcs * o * (1.0 - o)
    fac_g = i * (1.0 - g * g)
    oc = o * (1.0 - tcs * tcs)
    dZ = np.empty_like(acts)
    WhT = np.swapaxes(Wh, -1, -2)
    dh_carry = np.zeros((D, B, H), dtype=G.dtype)
    dc_carry = dh_carry
    for t in range(T - 1, -1, -1):
        dh = G[t] + dh_carry
        dct = dh * oc[t]
        dct += dc_carry
        dz = dZ[t]
        np.multiply(dct, fac_i[t], out=dz[..., :H])
        np.multiply(dct, fac_f[t], out=dz[..., H:2 * H])
        np.multiply(dh, fac_o[t], out=dz[..., 2 * H:3 * H])
        np.multiply(dct, fac_g[t], out=dz[..., 3 * H:])
        dh_carry = np.matmul(dz, WhT)
        dc_carry = dct * f[t]
    h_prev = np.concatenate([np.zeros_like(hs[:1]), hs[:-1]], axis=0)
    # (D, H, T*B) @ (D, T*B, 4H)
    hp = np.transpose(h_prev, (1, 3, 0, 2)).reshape(D, H, T * B)
    dWh = hp @ np.transpose(dZ, (1, 0, 2, 3)).reshape(D, T * B, 4 * H)
    return dZ, dWh


def _check_lstm_weights(x, W, b):
    I = x.shape[-1]
    H = W.shape[1] // 4
    if W.shape != (I + H, 4 * H) or b.shape != (4 * H,):
        raise DimensionError(f"lstm weights {W.shape}/{b.shape} do not fit input {x.shape}")
    return I, H


def _directional_lstm(x, params, lengths):
    """Shared forward/backward for uni- and bidirectional fused LSTM ops.

    ``params`` is a list of (W, b, reverse) triples, one per direction.
    """
    B, T, I = x.shape
    dims = [_check_lstm_weights(x, W, b) for W, b, _ in params]
    H = dims[0][1]
    if any(h != H for _, h in dims):
        raise DimensionError("all directions must share the hidden size")
    lengths = np.full(B, T) if lengths is None else np.asarray(lengths)
    rev = reverse_index(lengths, T)
    rows = np.arange(B)[:, None]
    xd = x.data
    x_rev = xd[rows, rev] if any(r for _, _, r in params) else None
    xs = [x_rev if r else xd for _, _, r in params]
    xw = np.stack([xi @ W.data[:I] + b.data for xi, (W, b, _) in zip(xs, params)])  # D,B,T,4H
    Wh = np.stack([W.data[I:] for W, _, _ in params])
    hs, cache = _lstm_scan(np.ascontiguousarray(np.transpose(xw, (2, 0, 1, 3))), Wh)
    hs_bt = np.transpose(hs, (1, 2, 0, 3))  # D,B,T,H
    outs = [hs_bt[d][rows, rev] if r else hs_bt[d] for d, (_, _, r) in enumerate(params)]
    out = np.concatenate(outs, axis=-1)

    def bw(grad):
        gs = []
        for d, (_, _, r) in enumerate(params):
            gd = grad[..., d * H:(d + 1) * H]
            gs.append(gd[rows, rev] if r else gd)
        G = np.ascontiguousarray(np.transpose(np.stack(gs), (2, 0, 1, 3)))  # T,D,B,H
        dZ, dWh = _lstm_scan_grad(G, hs, cache, Wh)
        dZ = np.transpose(dZ, (1, 2, 0, 3))  # D,B,T,4H
        grads = []
        dx = np.zeros_like(xd) if x.requires_grad else None
        for d, (W, b, r) in enumerate(params):
            dz2 = dZ[d].reshape(B * T, 4 * H)
            dWx = xs[d].reshape(B * T, I).T @ dz2
            grads.append(np.concatenate([dWx, dWh[d]], axis=0))
            grads.append(dz2.sum(axis=0))
            if dx is not None:
                dxd = dZ[d] @ W.data[:I].T
                dx += dxd[rows, rev] if r else dxd
        return (dx, *grads)

    parents = (x,) + tuple(t for W, b, _ in params for t in (W, b))
    return out, parents, bw


def lstm_layer(x, W, b, lengths=None, reverse=False):
    """Run an LSTM over a right-padded (B, T, I) batch -> hidden states (B, T, H).

    With ``reverse`` each sequence is processed from its own last valid
    frame backwards. Outputs at padded frames are unspecified, but padding
    never influences the valid frames.
    """
    out, parents, bw = _directional_lstm(x, [(W, b, reverse)], lengths)
    return _make(out, parents, bw, "lstm_layer")


def bilstm_layer(x, Wf, bf, Wb, bb, lengths=None):
    """Forward and backward LSTMs in one scan; output (B, T, 2H) = [fwd; bwd]."""
    out, parents, bw = _directional_lstm(x, [(Wf, bf, False), (Wb, bb, True)], lengths)
    return _make(out, parents, bw, "bilstm_layer")


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


# ---------------------------------------------------------------------------
# fused teacher-forced attention decoder
# ---------------------------------------------------------------------------

def attention_decoder(enc, keys, emb_in, mask, Wq, U, kernel, w, W, b):
    """Run the location-aware attention decoder over a whole target prefix.

    Shapes: ``enc`` (B, T, P) encoder output, ``keys`` (B, T, A) its key
    projection (bias included), ``emb_in`` (B, S, E) embedded decoder
    inputs, ``mask`` (B, T) boolean valid-frame mask. Parameters as in
    the composed layers: ``Wq`` (Hd, A), ``U`` (F, A), ``kernel`` (F, K),
    ``w`` (A, 1), LSTM ``W`` (E+P+Hd, 4Hd) and ``b`` (4Hd,).

    Step s attends with the previous decoder state h_{s-1} (and the
    previous alignment, uniform over valid frames before step 0), then
    feeds [emb_s; context_s] to the LSTM. Returns (B, S, Hd+P) holding
    [h_s; context_s] per step, which is exactly what the output layer
    consumes. Numerically this is the step-by-step composition of
    ``attention_energies``/``attend``/``decoder_step``; it exists only to
    keep graph bookkeeping out of the inner training loop.
    """
    B, T, P = enc.shape
    S, E = emb_in.shape[1], emb_in.shape[2]
    A = keys.shape[-1]
    Hd = Wq.shape[0]
    F_, K = kernel.shape
    if K % 2 == 0:
        raise ConfigError(f"location kernel width must be odd, got {K}")
    if W.shape != (E + P + Hd, 4 * Hd) or b.shape != (4 * Hd,):
        raise DimensionError(f"decoder lstm weights {W.shape}/{b.shape} do not fit "
                             f"input {E + P} and state {Hd}")
    if keys.shape != (B, T, A) or U.shape != (F_, A) or w.shape != (A, 1):
        raise DimensionError("attention parameter shapes are inconsistent")
    mask = np.asarray(mask, dtype=bool)
    dt = enc.data.dtype
    encd, keysd, embd = enc.data, keys.data, emb_in.data
    Wqd, wv, Wd, bd = Wq.data, w.data[:, 0], W.data, b.data
    KU = kernel.data.T @ U.data  # K x A: conv followed by U in one product
    pad = K // 2
    H = Hd
    scale = np.ones(4 * H, dtype=dt)
    scale[:3 * H] = 0.5
    Ws, bs = Wd * scale, bd * scale
    neg = np.where(mask, 0.0, -np.inf).astype(dt)
    lengths = mask.sum(axis=1)

    aligns = np.empty((S + 1, B, T), dtype=dt)  # aligns[s] = alignment used as "previous" at step s
    aligns[0] = mask / lengths[:, None]
    padded = np.zeros((S, B, T + K - 1), dtype=dt)
    ths = np.empty((S, B, T, A), dtype=dt)
    xins = np.empty((S, B, E + P + H), dtype=dt)
    acts = np.empty((S, B, 4 * H), dtype=dt)
    cs = np.empty((S, B, H), dtype=dt)
    tcs = np.empty((S, B, H), dtype=dt)
    out = np.empty((B, S, H + P), dtype=dt)
    h = np.zeros((B, H), dtype=dt)
    c = np.zeros((B, H), dtype=dt)
    xins[:, :, :E] = np.transpose(embd, (1, 0, 2))
    for s in range(S):
        padded[s, :, pad:pad + T] = aligns[s]
        # a contiguous copy keeps matmul on its fast path
        win = np.ascontiguousarray(sliding_window_view(padded[s], K, axis=1))
        pre = win @ KU
        pre += keysd
        pre += (h @ Wqd)[:, None, :]
        th = np.tanh(pre, out=ths[s])
        e = th @ wv
        e += neg
        e -= e.max(axis=1, keepdims=True)
        a = np.exp(e, out=aligns[s + 1])
        a /= a.sum(axis=1, keepdims=True)
        ctx = (a[:, None, :] @ encd)[:, 0]
        xin = xins[s]
        xin[:, E:E + P] = ctx
        xin[:, E + P:] = h
        z = xin @ Ws
        z += bs
        g = np.tanh(z, out=acts[s])
        sg = g[:, :3 * H]
        sg *= 0.5
        sg += 0.5
        c = g[:, H:2 * H] * c
        c += g[:, :H] * g[:, 3 * H:]
        cs[s] = c
        np.tanh(c, out=tcs[s])
        h = g[:, 2 * H:3 * H] * tcs[s]
        out[:, s, :H] = h
        out[:, s, H:] = ctx

    def bw(grad):
        G = np.transpose(grad, (1, 0, 2))  # S, B, H+P
        i, f, o, gg = (acts[..., k * H:(k + 1) * H] for k in range(4))
        c_prev = np.concatenate([np.zeros_like(cs[:1]), cs[:-1]], axis=0)
        fac_i = gg * i * (1.0 - i)
        fac_f = c_prev * f * (1.0 - f)
        fac_o = tcs * o * (1.0 - o)
        fac_g = i * (1.0 - gg * gg)
        oc = o * (1.0 - tcs * tcs)
        dZ = np.empty_like(acts)
        dPre = np.empty_like(ths)
        dQ = np.empty((S, B, A), dtype=dt)
        De = np.empty((S, B, T), dtype=dt)
        dCtx = np.empty((S, B, P), dtype=dt)
        dXin = np.empty_like(xins)
        WT = Wd.T
        WqT = Wqd.T
        KUT = KU.T
        facw = ths * ths
        np.subtract(1.0, facw, out=facw)
        facw *= wv  # d e / d pre, up to the per-frame factor de
        ones_t = np.ones(T, dtype=dt)
        dh_carry = np.zeros((B, H), dtype=dt)
        dc_carry = np.zeros((B, H), dtype=dt)
        da_carry = np.zeros((B, T), dtype=dt)
        for s in range(S - 1, -1, -1):
            dh = G[s, :, :H] + dh_carry
            dct = dh * oc[s]
            dct += dc_carry
            dz = dZ[s]
            np.multiply(dct, fac_i[s], out=dz[:, :H])
            np.multiply(dct, fac_f[s], out=dz[:, H:2 * H])
            np.multiply(dh, fac_o[s], out=dz[:, 2 * H:3 * H])
            np.multiply(dct, fac_g[s], out=dz[:, 3 * H:])
            dxin = np.matmul(dz, WT, out=dXin[s])
            dc_carry = dct * f[s]
            dctx = np.add(G[s, :, H:], dxin[:, E:E + P], out=dCtx[s])
            a = aligns[s + 1]
            da = (encd @ dctx[:, :, None])[..., 0]
            da += da_carry
            de = da - (a * da).sum(axis=1, keepdims=True)
            de *= a
            De[s] = de
            dpre = np.multiply(de[:, :, None], facw[s], out=dPre[s])
            dq = np.matmul(ones_t, dpre, out=dQ[s])  # sum over time, faster than .sum
            dh_carry = dxin[:, E + P:] + dq @ WqT
            if s > 0:
                dwin = dpre @ KUT  # B, T, K
                dp = np.zeros((B, T + K - 1), dtype=dt)
                for k in range(K):
                    dp[:, k:k + T] += dwin[:, :, k]
                da_carry = dp[:, pad:pad + T]
        grads = []
        # enc, keys, emb_in
        A_all = np.transpose(aligns[1:], (1, 2, 0))  # B, T, S
        grads.append(A_all @ np.transpose(dCtx, (1, 0, 2)) if enc.requires_grad else None)
        grads.append(dPre.sum(axis=0) if keys.requires_grad else None)
        grads.append(np.transpose(dXin[:, :, :E], (1, 0, 2))
                     if emb_in.requires_grad else None)
        # Wq: h_{s-1} is the state slice of xin
        Hprev = xins[:, :, E + P:].reshape(S * B, H)
        grads.append(Hprev.T @ dQ.reshape(S * B, A))
        win_all = sliding_window_view(padded, K, axis=2).reshape(-1, K)
        dKU = win_all.T @ dPre.reshape(-1, A)
        grads.append(kernel.data @ dKU)  # U
        grads.append(U.data @ dKU.T)  # kernel
        dw = ths.reshape(-1, A).T @ De.reshape(-1)
        grads.append(dw[:, None])
        grads.append(xins.reshape(S * B, -1).T @ dZ.reshape(S * B, -1))
        grads.append(dZ.sum(axis=(0, 1)))
        return tuple(grads)

    return _make(out, (enc, keys, emb_in, Wq, U, kernel, w, W, b), bw, "attention_decoder")



def finite_diff_check(f, params, eps=1e-6, max_coords=None, rng=None, floor=1e-3):
    """Compare analytic gradients of ``f`` against central differences.

    ``f`` is a zero-argument callable returning a scalar Tensor computed from
    the current values of ``params`` (leaf tensors, perturbed in place).
    With ``max_coords`` set, at most that many random coordinates per
    parameter are probed. Relative error per coordinate is
    ``|a - n| / max(|a|, |n|, floor)``; the maximum is returned.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    rng = rng if rng is not None else np.random.default_rng(0)
    for p in params:
        p.zero_grad()
    loss = f()
    backward(loss)
    analytic = [p.grad.copy() for p in params]

    worst = 0.0
    with no_grad():
        for p, ga in zip(params, analytic):
            flat = p.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = rng.choice(flat.size, size=max_coords, replace=False)
            gflat = ga.reshape(-1)
            for k in coords:
                orig = flat[k]
                flat[k] = orig + eps
                fp = float(f().data)
                flat[k] = orig - eps
                fm = float(f().data)
                flat[k] = orig
                num = (fp - fm) / (2.0 * eps)
                a = float(gflat[k])
                err = abs(a - num) / max(abs(a), abs(num), floor)
                worst = max(worst, err)
    for p in params:
        p.zero_grad()
    return worst

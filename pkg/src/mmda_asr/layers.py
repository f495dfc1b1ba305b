"""LSTM, pyramidal projection-biLSTM encoder, location-aware attention, decoder step.

Parameters live in flat ``{name: Tensor}`` dicts so that model code can
partition them into groups by name prefix. All builders draw from a
``numpy.random.Generator`` and initialise uniformly in [-0.1, 0.1]; LSTM
forget-gate biases start at 1.0.
"""

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError

INIT_SCALE = 0.1
CONV_CHANNELS = 10
CONV_WIDTH = 5


def uniform(rng, shape, dtype, scale=None, name=None):
    """Trainable tensor drawn from uniform(-scale, scale) (default INIT_SCALE)."""
    scale = INIT_SCALE if scale is None else scale
    data = rng.uniform(-scale, scale, size=shape).astype(dtype)
    return Tensor(data, requires_grad=True, name=name)


# ---------------------------------------------------------------------------
# LSTM
# ---------------------------------------------------------------------------

class LstmCellParams:
    """Weights of one LSTM cell: ``W`` is (I+H) x 4H, ``b`` is 4H.

    The four (I+H) x H gate blocks are laid out as input, forget, output,
    candidate along the second axis.
    """

    GATES = ("input", "forget", "output", "candidate")

    def __init__(self, W, b):
        self.W = W
        self.b = b

    @classmethod
    def init(cls, rng, input_dim, hidden_dim, dtype=np.float64, scale=None):
        W = uniform(rng, (input_dim + hidden_dim, 4 * hidden_dim), dtype, scale)
        b = uniform(rng, (4 * hidden_dim,), dtype, scale)
        b.data[hidden_dim:2 * hidden_dim] = 1.0
        return cls(W, b)

    @property
    def hidden_dim(self):
        return self.W.shape[1] // 4

    @property
    def input_dim(self):
        return self.W.shape[0] - self.hidden_dim

    def gate_block(self, gate):
        H = self.hidden_dim
        k = self.GATES.index(gate)
        return self.W.data[:, k * H:(k + 1) * H], self.b.data[k * H:(k + 1) * H]

    def tensors(self, prefix):
        return {f"{prefix}.W": self.W, f"{prefix}.b": self.b}


def lstm_cell_step(x, h, c, p, fused=False):
    """Single LSTM step built from primitive ops (or the fused kernel).

    Works on vectors (I,) or batches (B, I). Returns ``(h', c')``.
    """
    H = p.hidden_dim
    if x.shape[-1] != p.input_dim or h.shape[-1] != H or c.shape != h.shape:
        raise DimensionError(
            f"lstm_cell_step: x {x.shape}, h {h.shape}, c {c.shape} vs cell I={p.input_dim}, H={H}")
    if fused:
        hc = ad.lstm_cell(x, h, c, p.W, p.b)
        return hc[..., :H], hc[..., H:]
    z = ad.concat([x, h], axis=-1) @ p.W + p.b
    i = ad.sigmoid(z[..., :H])
    f = ad.sigmoid(z[..., H:2 * H])
    o = ad.sigmoid(z[..., 2 * H:3 * H])
    g = ad.tanh(z[..., 3 * H:])
    c_new = f * c + i * g
    h_new = o * ad.tanh(c_new)
    return h_new, c_new


# ---------------------------------------------------------------------------
# projection biLSTM and the pyramidal encoder
# ---------------------------------------------------------------------------

class BiLstmProjParams:
    """Forward/backward LSTMs plus a linear projection of their outputs.

    With ``subsample`` the concatenated 2H outputs of adjacent frame pairs
    are joined (4H) before projecting, halving the time axis.
    """

    def __init__(self, fwd, bwd, proj_W, proj_b, subsample=False):
        self.fwd = fwd
        self.bwd = bwd
        self.proj_W = proj_W
        self.proj_b = proj_b
        self.subsample = subsample

    @classmethod
    def init(cls, rng, input_dim, hidden_dim, proj_dim, subsample=False, dtype=np.float64, scale=None):
        fwd = LstmCellParams.init(rng, input_dim, hidden_dim, dtype, scale)
        bwd = LstmCellParams.init(rng, input_dim, hidden_dim, dtype, scale)
        k = 4 if subsample else 2
        return cls(fwd, bwd, uniform(rng, (k * hidden_dim, proj_dim), dtype, scale),
                   uniform(rng, (proj_dim,), dtype, scale), subsample)

    def tensors(self, prefix):
        out = {}
        out.update(self.fwd.tensors(f"{prefix}.fwd"))
        out.update(self.bwd.tensors(f"{prefix}.bwd"))
        out[f"{prefix}.proj.W"] = self.proj_W
        out[f"{prefix}.proj.b"] = self.proj_b
        return out

    def swapped(self):
        """Mapping under which the layer commutes with time reversal.

        Exchanges the forward/backward LSTMs and the matching halves of the
        projection rows. Only defined for non-subsampling layers.
        """
        if self.subsample:
            raise ContractError("direction swap is only defined without subsampling")
        H = self.fwd.hidden_dim
        Wd = self.proj_W.data
        W = np.concatenate([Wd[H:], Wd[:H]], axis=0)
        return BiLstmProjParams(self.bwd, self.fwd, Tensor(W, requires_grad=True),
                                self.proj_b, subsample=False)


def lengths_to_mask(lengths, T):
    return np.arange(T)[None, :] < np.asarray(lengths)[:, None]


def _as_batch(seq):
    if seq.ndim == 2:
        return ad.reshape(seq, (1,) + seq.shape), True
    return seq, False


def pair_concat(x, lengths):
    """Join adjacent frame pairs of a (B, T, F) batch -> (B, ceil(T/2), 2F).

    A sequence of odd length is padded by repeating its final frame.
    """
    B, T, F = x.shape
    T2 = (T + 1) // 2
    lengths = np.asarray(lengths)
    idx = np.minimum(np.arange(2 * T2)[None, :], (lengths - 1)[:, None])
    y = ad.gather_time(x, idx)
    return ad.reshape(y, (B, T2, 2 * F)), (lengths + 1) // 2


def projection_bilstm_layer(seq, params, lengths=None, activation="tanh"):
    """Bidirectional LSTM, concatenated directions, linear projection.

    ``seq`` is (T, I) or a right-padded (B, T, I) batch with ``lengths``.
    Returns ``(out, lengths)`` where out is (T', P) / (B, T', P).
    """
    x, single = _as_batch(seq)
    B, T, _ = x.shape
    if T < 1:
        raise ContractError("projection_bilstm_layer needs T >= 1")
    lengths = np.full(B, T) if lengths is None else np.asarray(lengths)
    h = ad.bilstm_layer(x, params.fwd.W, params.fwd.b, params.bwd.W, params.bwd.b, lengths)
    if params.subsample:
        h, lengths = pair_concat(h, lengths)
    out = h @ params.proj_W + params.proj_b
    if activation == "tanh":
        out = ad.tanh(out)
    elif activation is not None:
        raise ValueError(f"unknown projection activation {activation!r}")
    if single:
        out = ad.reshape(out, out.shape[1:])
    return out, lengths


def encoder_length(L):
    return math.ceil(math.ceil(L / 2) / 2)


def pyramidal_encode(X, layers, lengths=None):
    """Stacked projection-biLSTMs; subsampling layers halve the time axis.

    With the default 4-layer stack (subsampling in layers 1 and 2) an input of
    L frames yields ``ceil(ceil(L/2)/2)`` output frames.
    """
    x, single = _as_batch(X)
    if x.shape[1] < 1:
        raise ContractError("pyramidal_encode needs L >= 1")
    lengths = np.full(x.shape[0], x.shape[1]) if lengths is None else np.asarray(lengths)
    for layer in layers:
        x, lengths = projection_bilstm_layer(x, layer, lengths)
        if x.shape[1] > lengths.max():
            x = x[:, :int(lengths.max())]
    if single:
        x = ad.reshape(x, x.shape[1:])
    return x, lengths


# ---------------------------------------------------------------------------
# location-aware attention
# ---------------------------------------------------------------------------

class AttentionParams:
    """Energy ``w' tanh(Wq s + Wk h_t + U conv(a_prev)_t + b)``."""

    def __init__(self, Wq, Wk, U, kernel, b, w):
        self.Wq, self.Wk, self.U, self.kernel, self.b, self.w = Wq, Wk, U, kernel, b, w

    @classmethod
    def init(cls, rng, dec_dim, enc_dim, att_dim, channels=CONV_CHANNELS, width=CONV_WIDTH,
             dtype=np.float64, scale=None):
        return cls(
            uniform(rng, (dec_dim, att_dim), dtype, scale),
            uniform(rng, (enc_dim, att_dim), dtype, scale),
            uniform(rng, (channels, att_dim), dtype, scale),
            uniform(rng, (channels, width), dtype, scale),
            uniform(rng, (att_dim,), dtype, scale),
            uniform(rng, (att_dim, 1), dtype, scale),
        )

    def tensors(self, prefix):
        return {f"{prefix}.Wq": self.Wq, f"{prefix}.Wk": self.Wk, f"{prefix}.U": self.U,
                f"{prefix}.conv": self.kernel, f"{prefix}.b": self.b, f"{prefix}.w": self.w}


class AttentionState:
    """Per-batch attention memory: encoder output, its key projection, mask and
    the previous alignment (uniform over valid frames before the first step)."""

    def __init__(self, enc_out, lengths, params, prev_alignment=None):
        if enc_out.ndim == 2:
            enc_out = ad.reshape(enc_out, (1,) + enc_out.shape)
        B, T, _ = enc_out.shape
        self.enc_out = enc_out
        self.lengths = np.full(B, T) if lengths is None else np.asarray(lengths)
        self.mask = lengths_to_mask(self.lengths, T)
        self.keys = enc_out @ params.Wk + params.b
        if prev_alignment is None:
            a = self.mask / self.lengths[:, None]
            prev_alignment = Tensor(a.astype(enc_out.dtype))
        if prev_alignment.shape != (B, T):
            raise ContractError(
                f"previous alignment shape {prev_alignment.shape} != encoder length {(B, T)}")
        self.prev_alignment = prev_alignment


def attention_energies(dec_state, st, params):
    B, T, _ = st.enc_out.shape
    q = ad.reshape(dec_state @ params.Wq, (B, 1, -1))
    loc = ad.conv1d_same(st.prev_alignment, params.kernel, batched=True) @ params.U
    e = ad.tanh(st.keys + q + loc) @ params.w
    return ad.reshape(e, (B, T))


def attend(energies, st):
    alignment = ad.softmax(energies, axis=-1, mask=st.mask)
    B, T = alignment.shape
    context = ad.reshape(ad.reshape(alignment, (B, 1, T)) @ st.enc_out, (B, -1))
    return context, alignment


def location_attention_step(dec_state, enc_out, st, params):
    """One attention step. ``enc_out`` must be the tensor ``st`` was built on.

    Returns ``(context, alignment)``; the caller advances ``st.prev_alignment``.
    """
    if enc_out is not st.enc_out and enc_out.shape[-2] != st.prev_alignment.shape[-1]:
        raise ContractError(
            f"alignment length {st.prev_alignment.shape[-1]} != encoder length {enc_out.shape[-2]}")
    single = dec_state.ndim == 1
    if single:
        dec_state = ad.reshape(dec_state, (1, -1))
    context, alignment = attend(attention_energies(dec_state, st, params), st)
    if single:
        return ad.reshape(context, (-1,)), ad.reshape(alignment, (-1,))
    return context, alignment


# ---------------------------------------------------------------------------
# decoder
# ---------------------------------------------------------------------------

class DecoderParams:
    """Token embedding, single-layer LSTM over [embedding; context], output layer
    over [h; context]."""

    def __init__(self, emb, cell, out_W, out_b):
        self.emb, self.cell, self.out_W, self.out_b = emb, cell, out_W, out_b

    @classmethod
    def init(cls, rng, vocab_size, emb_dim, ctx_dim, hidden_dim, dtype=np.float64, scale=None):
        return cls(
            uniform(rng, (vocab_size, emb_dim), dtype, scale),
            LstmCellParams.init(rng, emb_dim + ctx_dim, hidden_dim, dtype, scale),
            uniform(rng, (hidden_dim + ctx_dim, vocab_size), dtype, scale),
            uniform(rng, (vocab_size,), dtype, scale),
        )

    @property
    def vocab_size(self):
        return self.emb.shape[0]

    def tensors(self, prefix):
        out = {f"{prefix}.emb": self.emb}
        out.update(self.cell.tensors(f"{prefix}.lstm"))
        out[f"{prefix}.out.W"] = self.out_W
        out[f"{prefix}.out.b"] = self.out_b
        return out


def decoder_step(y_prev, context, h, c, params, emb=None):
    """Embed ``y_prev``, run one LSTM step on [emb; context], emit logits.

    ``emb`` may carry a precomputed embedding of ``y_prev``.
    """
    if emb is None:
        emb = ad.embedding_lookup(params.emb, y_prev)
    h_new, c_new = lstm_cell_step(ad.concat([emb, context], axis=-1), h, c, params.cell, fused=True)
    logits = ad.concat([h_new, context], axis=-1) @ params.out_W + params.out_b
    return logits, h_new, c_new

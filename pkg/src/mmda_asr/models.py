"""Attention encoder-decoder with an augmenting encoder, and a character RNNLM.

Three objectives share one parameter set:

* speech:  X -> acoustic encoder -> attention -> decoder
* MMDA:    x_hat -> augmenting encoder -> attention -> decoder
* PSDA:    x_hat -> augmenting encoder (D-dim pseudo-speech) -> acoustic
  encoder -> attention -> decoder

Every loss is the mean per-token negative log-likelihood under teacher
forcing, averaged over the utterances in the batch. Recurrent and attention
state is reset for every utterance.
"""

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, OOVError
from .layers import (
    AttentionParams, AttentionState, BiLstmProjParams, DecoderParams, LstmCellParams,
    attend, attention_energies, decoder_step, lstm_cell_step, projection_bilstm_layer,
    pyramidal_encode, uniform,
)
from .vocab import EOS, PAD, SOS

GROUPS = ("enc", "att", "dec", "da")
MODES = ("none", "mmda", "psda")


@dataclass
class ModelDims:
    feat_dim: int = 40
    enc_hidden: int = 128
    proj_dim: int = 128
    enc_layers: int = 4
    subsample_layers: tuple = (0, 1)
    att_dim: int = 128
    conv_channels: int = 10
    conv_width: int = 5
    dec_emb: int = 64
    dec_hidden: int = 128
    aug_emb: int = 64
    aug_hidden: int = 128
    # half-width of the uniform initialiser for every weight and bias
    init_scale: float = 0.1
    # extra factor on the PSDA output projection at initialisation, so that
    # pseudo-speech starts near the unit scale of normalised acoustic frames
    # instead of ~4x quieter (weak input -> attention is slow to align)
    pseudo_speech_gain: float = 4.0

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "subsample_layers" in d:
            d["subsample_layers"] = tuple(d["subsample_layers"])
        return cls(**d)


class ParamPartition:
    """Disjoint named parameter groups enc / att / dec / da."""

    def __init__(self, groups):
        self.groups = {g: dict(groups[g]) for g in GROUPS}
        seen = set()
        for g in GROUPS:
            overlap = seen & set(self.groups[g])
            if overlap:
                raise ContractError(f"parameter(s) {sorted(overlap)} in more than one group")
            seen |= set(self.groups[g])

    def __getitem__(self, group):
        return self.groups[group]

    def named(self):
        for g in GROUPS:
            yield from self.groups[g].items()

    def group_of(self, name):
        return name.split(".", 1)[0]

    def grad_norms(self):
        return {g: float(np.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2))
                                     for p in self.groups[g].values())))
                for g in GROUPS}


def trainable_mask(phase, partition=None):
    """Groups updated in each phase; batch type decides which get gradients."""
    if phase == "pretrain_mmda":
        return {"da", "att", "dec"}
    if phase == "pretrain_psda":
        return {"da", "enc", "att", "dec"}
    if phase == "main":
        return set(GROUPS)
    raise ConfigError(f"unknown phase {phase!r}")


class Seq2Seq:
    """Listen-attend-spell style model plus the data-augmenting encoder."""

    def __init__(self, out_vocab_size, aug_vocab_size, dims=None, mode="mmda", seed=0,
                 dtype=np.float32):
        if mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
        self.dims = dims = dims or ModelDims()
        self.mode = mode
        self.dtype = np.dtype(dtype)
        self.out_vocab_size = out_vocab_size
        self.aug_vocab_size = aug_vocab_size
        self.vocab = None
        self.inventory = None
        rng = np.random.default_rng(seed)
        sc = dims.init_scale

        self.enc_layers = []
        for k in range(dims.enc_layers):
            in_dim = dims.feat_dim if k == 0 else dims.proj_dim
            self.enc_layers.append(BiLstmProjParams.init(
                rng, in_dim, dims.enc_hidden, dims.proj_dim,
                subsample=k in dims.subsample_layers, dtype=dtype, scale=sc))
        self.att = AttentionParams.init(rng, dims.dec_hidden, dims.proj_dim, dims.att_dim,
                                        dims.conv_channels, dims.conv_width, dtype=dtype, scale=sc)
        self.dec = DecoderParams.init(rng, out_vocab_size, dims.dec_emb, dims.proj_dim,
                                      dims.dec_hidden, dtype=dtype, scale=sc)
        self.aug_out_dim = dims.feat_dim if mode == "psda" else dims.proj_dim
        self.aug_emb = uniform(rng, (aug_vocab_size, dims.aug_emb), dtype, sc)
        self.aug_layer = BiLstmProjParams.init(rng, dims.aug_emb, dims.aug_hidden,
                                               self.aug_out_dim, dtype=dtype, scale=sc)
        if mode == "psda":
            self.aug_layer.proj_W.data *= self.dtype.type(dims.pseudo_speech_gain)

        enc = {}
        for k, layer in enumerate(self.enc_layers):
            enc.update(layer.tensors(f"enc.l{k}"))
        da = {"da.emb": self.aug_emb}
        da.update(self.aug_layer.tensors("da.blstm"))
        self.partition = ParamPartition({
            "enc": enc,
            "att": self.att.tensors("att"),
            "dec": self.dec.tensors("dec"),
            "da": da,
        })
        for name, p in self.partition.named():
            p.name = name

    # -- parameter access ---------------------------------------------------
    @property
    def kind(self):
        return "PSDA" if self.mode == "psda" else "MMDA"

    @property
    def time_reduction(self):
        """Input frames per acoustic-encoder output frame."""
        return 2 ** len(self.dims.subsample_layers)

    def named_parameters(self):
        return list(self.partition.named())

    def parameters(self, groups=GROUPS):
        return [p for g in groups for p in self.partition[g].values()]

    def zero_grad(self):
        for _, p in self.partition.named():
            p.zero_grad()

    def state_arrays(self):
        return {name: p.data for name, p in self.partition.named()}

    def load_arrays(self, arrays, groups=GROUPS):
        for g in groups:
            for name, p in self.partition[g].items():
                src = np.asarray(arrays[name])
                if src.shape != p.shape:
                    raise ContractError(f"{name}: shape {src.shape} != {p.shape}")
                p.data[...] = src

    # -- encoders -------------------------------------------------------------
    def _pad_feats(self, feats):
        lengths = np.array([len(f) for f in feats])
        if any(L < 1 for L in lengths):
            raise ContractError("empty feature sequence")
        D = self.dims.feat_dim
        X = np.zeros((len(feats), lengths.max(), D), dtype=self.dtype)
        for b, f in enumerate(feats):
            f = np.asarray(f)
            if f.ndim != 2 or f.shape[1] != D:
                raise ConfigError(f"feature dim {f.shape} does not match model D={D}")
            X[b, :len(f)] = f
        return Tensor(X), lengths

    def encode_speech(self, feats):
        X, lengths = self._pad_feats(feats)
        return pyramidal_encode(X, self.enc_layers, lengths)

    def encode_aug(self, seqs):
        lengths = np.array([len(s) for s in seqs])
        if any(L < 1 for L in lengths):
            raise ContractError("empty augmenting sequence")
        ids = np.full((len(seqs), lengths.max()), PAD, dtype=np.int64)
        for b, s in enumerate(seqs):
            ids[b, :len(s)] = s
        emb = ad.embedding_lookup(self.aug_emb, ids)
        act = None if self.mode == "psda" else "tanh"
        return projection_bilstm_layer(emb, self.aug_layer, lengths, activation=act)

    def pseudo_speech(self, seqs):
        if self.aug_out_dim != self.dims.feat_dim:
            raise ConfigError(
                f"PSDA needs augmenting output dim {self.dims.feat_dim}, model has {self.aug_out_dim}")
        return self.encode_aug(seqs)

    # -- decoder -------------------------------------------------------------
    def _zeros(self, B, H):
        return Tensor(np.zeros((B, H), dtype=self.dtype))

    def decode_loss(self, enc_out, lengths, targets, fused=True):
        """Teacher-forced mean per-token NLL for targets ``[sos, ..., eos]``.

        ``fused=False`` runs the step-by-step composition of the attention
        and decoder layers instead of the single fused op (same values).
        """
        B = len(targets)
        for y in targets:
            if len(y) < 2:
                raise ContractError("target sequence needs at least sos and eos")
        n_pred = np.array([len(y) - 1 for y in targets])
        Tin = n_pred.max()
        inp = np.full((B, Tin), PAD, dtype=np.int64)
        out = np.full((B, Tin), PAD, dtype=np.int64)
        for b, y in enumerate(targets):
            inp[b, :n_pred[b]] = y[:-1]
            out[b, :n_pred[b]] = y[1:]
        V = self.out_vocab_size
        if inp.max() >= V or out.max() >= V:
            raise OOVError(f"target id {max(inp.max(), out.max())} outside vocabulary of size {V}")

        emb = ad.embedding_lookup(self.dec.emb, inp)
        st = AttentionState(enc_out, lengths, self.att)
        if fused:
            att, cell = self.att, self.dec.cell
            hc = ad.attention_decoder(st.enc_out, st.keys, emb, st.mask, att.Wq, att.U,
                                      att.kernel, att.w, cell.W, cell.b)
            logits = hc @ self.dec.out_W + self.dec.out_b
        else:
            h = c = self._zeros(B, self.dims.dec_hidden)
            steps = []
            for t in range(Tin):
                context, align = attend(attention_energies(h, st, self.att), st)
                st.prev_alignment = align
                lg, h, c = decoder_step(None, context, h, c, self.dec, emb=emb[:, t])
                steps.append(lg)
            logits = ad.stack(steps, axis=1)
        logp = ad.log_softmax(logits, axis=-1)
        picked = ad.pick_last(logp, out)
        w = (np.arange(Tin)[None, :] < n_pred[:, None]) / (n_pred[:, None] * B)
        return -ad.tsum(picked * Tensor(w.astype(self.dtype)))

    # -- recognition ---------------------------------------------------------
    def greedy_decode(self, feats, max_len=None):
        """Batched greedy decoding; returns token id lists without sentinels."""
        with ad.no_grad():
            enc_out, lengths = self.encode_speech(feats)
            B = len(feats)
            max_len = max_len or int(2 * enc_out.shape[1] + 10)
            st = AttentionState(enc_out, lengths, self.att)
            h = c = self._zeros(B, self.dims.dec_hidden)
            y = np.full(B, SOS)
            done = np.zeros(B, dtype=bool)
            hyps = [[] for _ in range(B)]
            for _ in range(max_len):
                context, align = attend(attention_energies(h, st, self.att), st)
                st.prev_alignment = align
                lg, h, c = decoder_step(y, context, h, c, self.dec)
                scores = lg.data.copy()
                scores[:, [PAD, SOS]] = -np.inf  # never emitted
                y = np.argmax(scores, axis=-1)
                for b in range(B):
                    if not done[b]:
                        if y[b] == EOS:
                            done[b] = True
                        else:
                            hyps[b].append(int(y[b]))
                if done.all():
                    break
        return hyps

    def transcribe(self, feats, decode_cfg=None, lm=None):
        """Text hypotheses for a list of feature sequences (needs ``vocab``)."""
        from .decoding import recognize
        if self.vocab is None:
            raise ConfigError("transcribe needs the model's output vocabulary")
        return [self.vocab.decode(ids) for ids in recognize(self, feats, decode_cfg, lm)]

    def scorer(self, feat):
        return AsrScorer(self, feat)


class AsrScorer:
    """Incremental ASR scorer for beam search over one utterance."""

    def __init__(self, model, feat):
        self.model = model
        with ad.no_grad():
            enc_out, lengths = model.encode_speech([feat])
            self.enc = enc_out.data
            self.keys = AttentionState(enc_out, lengths, model.att).keys.data
        self.T = self.enc.shape[1]

    def init_state(self):
        m = self.model
        H = m.dims.dec_hidden
        return (np.zeros(H, m.dtype), np.zeros(H, m.dtype),
                np.full(self.T, 1.0 / self.T, dtype=m.dtype))

    def step(self, states, tokens):
        m = self.model
        n = len(states)
        with ad.no_grad():
            st = AttentionState.__new__(AttentionState)
            st.enc_out = Tensor(np.broadcast_to(self.enc, (n,) + self.enc.shape[1:]))
            st.keys = Tensor(np.broadcast_to(self.keys, (n,) + self.keys.shape[1:]))
            st.lengths = np.full(n, self.T)
            st.mask = np.ones((n, self.T), dtype=bool)
            st.prev_alignment = Tensor(np.stack([s[2] for s in states]))
            h = Tensor(np.stack([s[0] for s in states]))
            c = Tensor(np.stack([s[1] for s in states]))
            context, align = attend(attention_energies(h, st, m.att), st)
            lg, h2, c2 = decoder_step(np.asarray(tokens), context, h, c, m.dec)
            logp = ad.log_softmax(lg, axis=-1).data.astype(np.float64)
        new = [(h2.data[i], c2.data[i], align.data[i]) for i in range(n)]
        return logp, new


# ---------------------------------------------------------------------------
# the three objectives
# ---------------------------------------------------------------------------

def _batchify(x, y):
    if len(y) and np.ndim(y[0]) == 0:
        return [x], [y]
    return list(x), list(y)


def asr_log_likelihood(model, X, y):
    """Speech objective: gradients reach enc, att and dec only."""
    feats, ys = _batchify(X, y)
    if any(len(t) == 0 for t in ys):
        raise ContractError("empty target sequence")
    enc_out, lengths = model.encode_speech(feats)
    return model.decode_loss(enc_out, lengths, ys)


def mmda_log_likelihood(model, x_hat, y):
    """MMDA text objective: the augmenting encoder replaces the acoustic one."""
    seqs, ys = _batchify(x_hat, y)
    if any(len(s) == 0 for s in seqs):
        raise ContractError("empty augmenting sequence")
    out, lengths = model.encode_aug(seqs)
    return model.decode_loss(out, lengths, ys)


def psda_log_likelihood(model, x_hat, y):
    """PSDA text objective: pseudo-speech is fed through the acoustic encoder."""
    seqs, ys = _batchify(x_hat, y)
    if any(len(s) == 0 for s in seqs):
        raise ContractError("empty augmenting sequence")
    pseudo, lengths = model.pseudo_speech(seqs)
    enc_out, lengths = pyramidal_encode(pseudo, model.enc_layers, lengths)
    return model.decode_loss(enc_out, lengths, ys)


def text_log_likelihood(model, x_hat, y):
    """Augmenting-batch objective for the model's wiring."""
    if model.mode == "psda":
        return psda_log_likelihood(model, x_hat, y)
    return mmda_log_likelihood(model, x_hat, y)


# ---------------------------------------------------------------------------
# character RNN language model
# ---------------------------------------------------------------------------

@dataclass
class LmDims:
    emb: int = 64
    hidden: int = 128
    init_scale: float = 0.1


class RnnLm:
    """Embedding, single-layer LSTM, output layer over the ASR vocabulary."""

    def __init__(self, vocab_size, dims=None, seed=0, dtype=np.float32):
        self.dims = dims = dims or LmDims()
        self.vocab_size = vocab_size
        self.dtype = np.dtype(dtype)
        self.vocab = None
        rng = np.random.default_rng(seed)
        sc = dims.init_scale
        self.emb = uniform(rng, (vocab_size, dims.emb), dtype, sc)
        self.cell = LstmCellParams.init(rng, dims.emb, dims.hidden, dtype, scale=sc)
        self.out_W = uniform(rng, (dims.hidden, vocab_size), dtype, sc)
        self.out_b = uniform(rng, (vocab_size,), dtype, sc)
        self.params = {"lm.emb": self.emb, "lm.lstm.W": self.cell.W, "lm.lstm.b": self.cell.b,
                       "lm.out.W": self.out_W, "lm.out.b": self.out_b}

    def named_parameters(self):
        return list(self.params.items())

    def parameters(self):
        return list(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def state_arrays(self):
        return {k: p.data for k, p in self.params.items()}

    def load_arrays(self, arrays):
        for k, p in self.params.items():
            p.data[...] = np.asarray(arrays[k])

    def _check(self, ids):
        for i in ids:
            if not 0 <= int(i) < self.vocab_size:
                raise OOVError(f"token id {i} outside LM vocabulary of size {self.vocab_size}")

    def loss(self, seqs):
        """Mean per-token NLL of ``[sos, ..., eos]`` sequences."""
        seqs = [list(s) for s in seqs]
        for s in seqs:
            self._check(s)
        n = np.array([len(s) - 1 for s in seqs])
        B, T = len(seqs), n.max()
        inp = np.full((B, T), PAD, dtype=np.int64)
        out = np.full((B, T), PAD, dtype=np.int64)
        for b, s in enumerate(seqs):
            inp[b, :n[b]] = s[:-1]
            out[b, :n[b]] = s[1:]
        mask = np.arange(T)[None, :] < n[:, None]
        x = ad.embedding_lookup(self.emb, inp)
        h = ad.lstm_layer(x, self.cell.W, self.cell.b, lengths=n)
        logp = ad.log_softmax(h @ self.out_W + self.out_b, axis=-1)
        w = mask / (n[:, None] * B)
        return -ad.tsum(ad.pick_last(logp, out) * Tensor(w.astype(self.dtype)))

    def init_state(self):
        H = self.dims.hidden
        return (np.zeros(H, self.dtype), np.zeros(H, self.dtype))

    def step(self, states, tokens):
        tokens = np.asarray(tokens)
        self._check(tokens)
        with ad.no_grad():
            h = Tensor(np.stack([s[0] for s in states]))
            c = Tensor(np.stack([s[1] for s in states]))
            x = ad.embedding_lookup(self.emb, tokens)
            h2, c2 = lstm_cell_step(x, h, c, self.cell, fused=True)
            logp = ad.log_softmax(h2 @ self.out_W + self.out_b, axis=-1).data.astype(np.float64)
        return logp, [(h2.data[i], c2.data[i]) for i in range(len(states))]

    def scorer(self):
        return self


def rnnlm_logprob(prefix, next_id, lm):
    """log P_LM(next | prefix); ``prefix`` starts with sos."""
    prefix = list(prefix)
    lm._check(prefix + [next_id])
    state = lm.init_state()
    logp = None
    for tok in prefix:
        logp, (state,) = lm.step([state], [tok])
    return float(logp[0, next_id])


def model_header(model):
    hdr = {
        "kind": model.kind,
        "mode": model.mode,
        "dims": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(model.dims).items()},
        "out_vocab_size": model.out_vocab_size,
        "aug_vocab_size": model.aug_vocab_size,
    }
    if model.vocab is not None:
        hdr["out_vocab"] = model.vocab.symbols
        hdr["out_vocab_hash"] = model.vocab.digest()
    if model.inventory is not None:
        hdr["aug_inventory"] = model.inventory.symbols
        hdr["aug_vocab_hash"] = model.inventory.digest()
    return hdr

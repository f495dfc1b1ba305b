"""Pretraining, rho-scheduled multi-task training, optimizer and checkpoints.

Training runs in two phases:

* ``pretrain`` -- ``pretrain_batches`` update steps on augmenting batches
  only, with the phase's trainable groups (MMDA: da/att/dec, PSDA: all);
* ``main`` -- every step draws its task: an augmenting batch with
  probability ``rho``, otherwise a speech batch. The phase ends once the
  speech-batch budget is spent (or early stopping triggers).

Optimizer rule (Adam, "lazy"): a parameter whose group is not trainable in
the current phase, or whose gradient is exactly zero on the current batch,
is skipped entirely -- neither its value nor its moments nor its step count
change. Hence speech batches never touch the augmenting encoder and MMDA
text batches never touch the acoustic encoder.
"""

import dataclasses
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .augmentation import DurationModel, PhonemeInventory, sample_durations
from .checkpoint import check_tensors, read_container, write_container
from .decoding import corpus_cer_wer
from .errors import CheckpointError, ConfigError, ContractError, TrainingError
from .models import (
    GROUPS, MODES, LmDims, ModelDims, RnnLm, Seq2Seq, asr_log_likelihood, model_header,
    text_log_likelihood, trainable_mask,
)
from .vocab import Vocab, merge_vocabularies

SPEECH, AUGMENTING = "speech", "augmenting"


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def _check_rho(rho):
    if not 0.0 < rho < 1.0:
        raise ConfigError(f"rho must lie in the open interval (0, 1), got {rho}")


@dataclass
class TrainConfig:
    rho: float = 0.5
    pretrain_batches: int = 2000
    batch_size: int = 8
    learning_rate: float = 1e-3
    grad_clip: float = 5.0
    max_epochs: int = 20
    seed: int = 0
    mode: str = "mmda"
    languages: list = field(default_factory=list)
    # main-phase speech-batch budget; 0 means max_epochs passes over the data
    speech_batches: int = 0
    # main phase without any augmenting batch (the rho -> 0 limit)
    speech_only: bool = False
    # speech batches between dev evaluations; 0 means once per epoch
    eval_every: int = 0
    patience: int = 3

    def __post_init__(self):
        self.validate()

    def validate(self):
        _check_rho(self.rho)
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.pretrain_batches < 0:
            raise ConfigError("pretrain_batches must be >= 0")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("batch_size and max_epochs must be >= 1")
        if not self.learning_rate > 0 or not self.grad_clip > 0:
            raise ConfigError("learning_rate and grad_clip must be positive")
        if self.speech_batches < 0 or self.eval_every < 0 or self.patience < 1:
            raise ConfigError("speech_batches/eval_every must be >= 0 and patience >= 1")

    @classmethod
    def from_mapping(cls, mapping):
        """Build from strings (key=value files, CLI) or JSON values."""
        kwargs = {}
        fields = {f.name: f for f in dataclasses.fields(cls)}
        for key, val in mapping.items():
            key = key.replace("-", "_")
            if key not in fields:
                raise ConfigError(f"unknown training option {key!r}")
            default = fields[key].default
            if default is dataclasses.MISSING:
                default = fields[key].default_factory()
            kwargs[key] = _coerce(key, val, default)
        return cls(**kwargs)

    def to_dict(self):
        return dataclasses.asdict(self)


def _coerce(key, val, default):
    if not isinstance(val, str):
        return val
    try:
        if isinstance(default, bool):
            if val.lower() in ("1", "true", "yes", "on"):
                return True
            if val.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(val)
        if isinstance(default, int):
            return int(val)
        if isinstance(default, float):
            return float(val)
        if isinstance(default, list):
            return json.loads(val)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {val!r}") from None
    return val


def draw_task(rng, rho):
    """``augmenting`` with probability rho, else ``speech``."""
    _check_rho(rho)
    return AUGMENTING if rng.random() < rho else SPEECH


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class Adam:
    """Adam with per-parameter step counts and the lazy skipping rule."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.t = {n: 0 for n in self.params}

    def update(self, names):
        for n in names:
            p = self.params[n]
            g = p.grad
            if not g.any():
                continue
            self.t[n] += 1
            t = self.t[n]
            m, v = self.m[n], self.v[n]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * (g * g)
            step = self.lr * math.sqrt(1 - self.beta2 ** t) / (1 - self.beta1 ** t)
            p.data -= (step * m / (np.sqrt(v) + self.eps)).astype(p.data.dtype)

    def arrays(self):
        out = {}
        for n in self.params:
            out[f"opt.m.{n}"] = self.m[n]
            out[f"opt.v.{n}"] = self.v[n]
        return out

    def load(self, arrays, steps):
        for n in self.params:
            self.m[n][...] = arrays[f"opt.m.{n}"]
            self.v[n][...] = arrays[f"opt.v.{n}"]
            self.t[n] = int(steps[n])


def clip_grad_norm(params, max_norm):
    """Scale gradients in place so their global L2 norm is <= max_norm.

    Returns the norm before clipping.
    """
    total = math.sqrt(sum(float(np.sum(np.square(p.grad, dtype=np.float64))) for p in params))
    if total > max_norm:
        scale = max_norm / total
        for p in params:
            p.grad *= p.grad.dtype.type(scale)
    return total


# ---------------------------------------------------------------------------
# batch streams
# ---------------------------------------------------------------------------

def _rng_state(rng):
    return rng.bit_generator.state


def _rng_from_state(state):
    rng = np.random.default_rng()
    rng.bit_generator.state = state
    return rng


class IndexStream:
    """Endless batches of indices into a corpus of ``n`` items.

    Each pass is a fresh seeded permutation; the final batch of a pass may be
    smaller. ``epoch`` counts completed passes.
    """

    def __init__(self, n, batch_size, seed):
        if n < 1:
            raise ContractError("cannot stream an empty corpus")
        self.n, self.batch_size = n, batch_size
        self.rng = np.random.default_rng(seed)
        self.perm = self.rng.permutation(n)
        self.pos = 0
        self.epoch = 0

    @property
    def batches_per_epoch(self):
        return -(-self.n // self.batch_size)

    def next(self):
        if self.pos >= self.n:
            self.perm = self.rng.permutation(self.n)
            self.pos = 0
            self.epoch += 1
        idx = self.perm[self.pos:self.pos + self.batch_size]
        where = (self.epoch, self.pos)
        self.pos += len(idx)
        return idx.tolist(), where

    def state(self):
        return {"n": self.n, "batch_size": self.batch_size, "rng": _rng_state(self.rng),
                "perm": self.perm.tolist(), "pos": self.pos, "epoch": self.epoch}

    @classmethod
    def from_state(cls, st):
        s = cls.__new__(cls)
        s.n, s.batch_size = st["n"], st["batch_size"]
        s.rng = _rng_from_state(st["rng"])
        s.perm = np.asarray(st["perm"], dtype=np.int64)
        s.pos, s.epoch = st["pos"], st["epoch"]
        return s


@dataclass
class Batch:
    kind: str
    id: str
    utt_ids: list
    inputs: list
    targets: list


def mix_corpora(corpora):
    """Concatenate ``(language, utterances)`` corpora and merge their vocabularies.

    Sampling proportional to corpus size follows from shuffling the
    concatenation once per epoch. All corpora must share the feature dim.
    """
    corpora = list(corpora)
    if not corpora:
        raise ConfigError("mix_corpora needs at least one corpus")
    dims, utts, vocabs = {}, [], []
    for lang, us in corpora:
        us = list(us)
        if not us:
            raise ConfigError(f"corpus {lang!r} is empty")
        dims[lang] = _feat_dim(us[0])
        utts.extend(us)
        vocabs.append(Vocab.from_texts(u.text for u in us))
    if len(set(dims.values())) > 1:
        raise ConfigError(f"feature dimensions differ across corpora: {dims}")
    return utts, merge_vocabularies(vocabs)


def _feat_dim(u):
    if hasattr(u, "features") and getattr(u, "_cache", None) is None and hasattr(u, "feat"):
        from .data import read_feature_header
        return read_feature_header(u.feat)[1]
    return np.asarray(u.features()).shape[1]


def attention_duration_model(dm, model):
    """Rescale a frames-per-phoneme model to the time axis the augmenting
    encoder's output lands on.

    PSDA output is pseudo-speech at input-frame rate and goes through the
    acoustic encoder, so ``dm`` is used as is. MMDA output replaces the
    acoustic encoder's output, which runs ``model.time_reduction`` times
    slower; without rescaling, attention pretrained on text would learn to
    advance several times faster per output symbol than speech needs.
    """
    if dm is None or model.mode != "mmda":
        return dm
    r = model.time_reduction
    return DurationModel(dm.mean / r, dm.std / r)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def evaluate_dev(model, dev, decode_cfg=None, chunk=50):
    """Corpus CER of ``model.transcribe`` over the dev utterances."""
    dev = list(dev)
    if not dev:
        raise ContractError("empty dev set")
    hyps = []
    for k in range(0, len(dev), chunk):
        part = dev[k:k + chunk]
        hyps.extend(model.transcribe([u.features() for u in part], decode_cfg))
    return corpus_cer_wer([(u.text, h) for u, h in zip(dev, hyps)])[0]


def augmenting_loss(model, xs, ys, batch_size=32):
    """Mean per-utterance text-task loss (no gradients)."""
    total = 0.0
    with ad.no_grad():
        for k in range(0, len(xs), batch_size):
            bx, by = xs[k:k + batch_size], ys[k:k + batch_size]
            total += text_log_likelihood(model, bx, by).item() * len(bx)
    return total / len(xs)


# ---------------------------------------------------------------------------
# training state and steps
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    optimizer: Adam
    task_rng: np.random.Generator
    speech_stream: IndexStream = None
    aug_stream: IndexStream = None
    step: int = 0
    phase: str = "pretrain"
    speech_steps: int = 0
    aug_steps: int = 0
    best_dev: float = float("inf")
    bad_evals: int = 0
    evals: int = 0
    stopped: bool = False
    best_params: dict = None

    def to_json(self):
        return {
            "step": self.step, "phase": self.phase, "speech_steps": self.speech_steps,
            "aug_steps": self.aug_steps,
            "best_dev": None if math.isinf(self.best_dev) else self.best_dev,
            "bad_evals": self.bad_evals, "evals": self.evals, "stopped": self.stopped,
            "task_rng": _rng_state(self.task_rng),
            "speech_stream": self.speech_stream.state() if self.speech_stream else None,
            "aug_stream": self.aug_stream.state() if self.aug_stream else None,
            "opt_steps": dict(self.optimizer.t),
            "opt_hyper": [self.optimizer.lr, self.optimizer.beta1, self.optimizer.beta2,
                          self.optimizer.eps],
            "has_best": self.best_params is not None,
        }


def phase_groups(phase, mode):
    if phase == "pretrain":
        return trainable_mask("pretrain_psda" if mode == "psda" else "pretrain_mmda")
    return trainable_mask("main")


def train_step(model, batch, task, cfg, state):
    """zero grads -> loss -> backward -> clip -> lazy Adam update.

    Returns ``(state, loss, grad_norm)``; ``grad_norm`` is the pre-clip
    global norm over the trainable groups.
    """
    if task != batch.kind:
        raise ContractError(f"task {task!r} does not match batch kind {batch.kind!r}")
    if not batch.inputs:
        raise ContractError("empty batch")
    model.zero_grad()
    if task == SPEECH:
        loss = asr_log_likelihood(model, batch.inputs, batch.targets)
    else:
        loss = text_log_likelihood(model, batch.inputs, batch.targets)
    value = float(loss.item())
    if not math.isfinite(value):
        raise TrainingError(f"non-finite loss {value} at step {state.step} on batch {batch.id} "
                            f"(utterances {batch.utt_ids[:4]}...)")
    ad.backward(loss)
    groups = phase_groups(state.phase, model.mode)
    names = [n for n, _ in model.named_parameters() if n.split(".", 1)[0] in groups]
    params = [state.optimizer.params[n] for n in names]
    norm = clip_grad_norm(params, cfg.grad_clip)
    state.optimizer.update(names)
    state.step += 1
    if task == SPEECH:
        state.speech_steps += 1
    else:
        state.aug_steps += 1
    return state, value, norm


class Trainer:
    """Owns the data, the model and the :class:`TrainState` of one run.

    ``speech``: list of utterances (objects with ``id``, ``text`` and
    ``features()``); ``aug``: list of ``{id, phoneme_ids, text}`` records,
    duration-expanded at batch time unless ``dm`` is None. ``dm`` is given
    in input frames per phoneme (see :func:`attention_duration_model`).
    """

    def __init__(self, model, cfg, speech, vocab, aug=None, dm=None, dev=None, log=None,
                 state=None):
        cfg.validate()
        if model.mode != cfg.mode:
            raise ConfigError(f"model mode {model.mode!r} does not match config mode {cfg.mode!r}")
        self.model, self.cfg, self.vocab = model, cfg, vocab
        self.speech = list(speech)
        self.speech_feats = [np.asarray(u.features()) for u in self.speech]
        self.speech_targets = [vocab.encode(u.text) for u in self.speech]
        self.aug = list(aug or [])
        self.aug_targets = [vocab.encode(r["text"]) for r in self.aug]
        self.dm = dm
        self.batch_dm = attention_duration_model(dm, model)
        self.dev = list(dev or [])
        self.log = log
        self.uses_aug = cfg.mode != "none"
        if self.uses_aug and not self.aug and (cfg.pretrain_batches or not cfg.speech_only):
            raise ConfigError(f"mode {cfg.mode!r} needs augmenting data")
        if state is None:
            state = TrainState(
                optimizer=Adam(model.named_parameters(), cfg.learning_rate),
                task_rng=np.random.default_rng([cfg.seed, 0]),
                speech_stream=IndexStream(len(self.speech), cfg.batch_size, [cfg.seed, 1]),
                aug_stream=(IndexStream(len(self.aug), cfg.batch_size, [cfg.seed, 2])
                            if self.aug else None),
            )
            state.phase = "pretrain" if self.uses_aug and cfg.pretrain_batches > 0 else "main"
        else:
            if state.speech_stream.n != len(self.speech):
                raise CheckpointError("speech corpus size differs from the checkpoint (field 'speech_stream')")
            if self.aug and (state.aug_stream is None or state.aug_stream.n != len(self.aug)):
                raise CheckpointError("augmenting corpus size differs from the checkpoint (field 'aug_stream')")
        self.state = state
        self.history = []

    # -- batches ------------------------------------------------------------
    @property
    def speech_budget(self):
        if self.cfg.speech_batches:
            return self.cfg.speech_batches
        return self.cfg.max_epochs * self.state.speech_stream.batches_per_epoch

    @property
    def eval_interval(self):
        return self.cfg.eval_every or self.state.speech_stream.batches_per_epoch

    def next_batch(self, task):
        st = self.state
        if task == SPEECH:
            idx, (ep, pos) = st.speech_stream.next()
            return Batch(SPEECH, f"speech/e{ep}/p{pos}", [self.speech[i].id for i in idx],
                         [self.speech_feats[i] for i in idx], [self.speech_targets[i] for i in idx])
        stream = st.aug_stream
        idx, (ep, pos) = stream.next()
        if self.batch_dm is not None:
            xs = [sample_durations(self.aug[i]["phoneme_ids"], self.batch_dm, stream.rng)
                  for i in idx]
        else:
            xs = [self.aug[i]["phoneme_ids"] for i in idx]
        return Batch(AUGMENTING, f"augmenting/e{ep}/p{pos}", [self.aug[i]["id"] for i in idx],
                     xs, [self.aug_targets[i] for i in idx])

    # -- loop ---------------------------------------------------------------
    def _emit(self, rec):
        self.history.append(rec)
        if self.log is not None:
            self.log(rec)

    def _step(self, task):
        batch = self.next_batch(task)
        _, loss, norm = train_step(self.model, batch, task, self.cfg, self.state)
        self._emit({"step": self.state.step, "phase": self.state.phase, "task": task,
                    "loss": loss, "grad_norm": norm})

    def pretrain(self, max_steps=None):
        """Augmenting-only steps until ``pretrain_batches`` is reached."""
        st = self.state
        while st.phase == "pretrain" and st.step < self.cfg.pretrain_batches:
            if max_steps is not None and st.step >= max_steps:
                return st
            self._step(AUGMENTING)
        if st.phase == "pretrain":
            st.phase = "main"
        return st

    def _evaluate(self):
        st = self.state
        cer = evaluate_dev(self.model, self.dev)
        st.evals += 1
        self._emit({"event": "dev", "step": st.step, "speech_steps": st.speech_steps,
                    "dev_cer": cer})
        if cer < st.best_dev:
            st.best_dev = cer
            st.bad_evals = 0
            st.best_params = {n: p.data.copy() for n, p in self.model.named_parameters()}
        else:
            st.bad_evals += 1
            if st.bad_evals >= self.cfg.patience:
                st.stopped = True

    def run(self, max_steps=None):
        """Train to completion, or until ``state.step == max_steps`` (for
        interrupt/resume). Returns the state."""
        st = self.pretrain(max_steps)
        if st.phase == "pretrain":
            return st
        cfg = self.cfg
        mixing = self.uses_aug and not cfg.speech_only
        while not st.stopped and st.speech_steps < self.speech_budget:
            if max_steps is not None and st.step >= max_steps:
                return st
            task = draw_task(st.task_rng, cfg.rho) if mixing else SPEECH
            self._step(task)
            if task == SPEECH and self.dev and st.speech_steps % self.eval_interval == 0:
                self._evaluate()
        if st.best_params is not None:
            for n, p in self.model.named_parameters():
                p.data[...] = st.best_params[n]
        st.phase = "done"
        return st

    def loss_trace(self):
        return [r["loss"] for r in self.history if "loss" in r]


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _vocab_header(model):
    hdr = model_header(model) if isinstance(model, Seq2Seq) else {
        "kind": "RNNLM", "dims": dataclasses.asdict(model.dims), "vocab_size": model.vocab_size}
    if isinstance(model, RnnLm) and model.vocab is not None:
        hdr["out_vocab"] = model.vocab.symbols
        hdr["out_vocab_hash"] = model.vocab.digest()
    return hdr


def save_checkpoint(model, state, path, extra=None):
    """Write parameters, optimizer moments and the training state."""
    header = {"model": _vocab_header(model)}
    arrays = dict(model.state_arrays())
    if state is not None:
        header["train_state"] = state.to_json()
        arrays.update(state.optimizer.arrays())
        if state.best_params is not None:
            arrays.update({f"best.{n}": a for n, a in state.best_params.items()})
    if extra:
        header["extra"] = extra
    write_container(path, header, arrays)


def _expect(header_val, actual, field_name):
    if actual is not None and header_val != actual:
        raise CheckpointError(f"checkpoint field '{field_name}' mismatch: {header_val!r} != {actual!r}")


def load_checkpoint(path, vocab=None, inventory=None, kind=None):
    """Returns ``(model, state, header)``; ``state`` is None for a bare model.

    Optional ``vocab``/``inventory``/``kind`` are verified against the
    stored hashes and model kind.
    """
    header, arrays = read_container(path)
    mh = header.get("model")
    if not isinstance(mh, dict) or "kind" not in mh:
        raise CheckpointError(f"{path}: header lacks field 'model.kind'")
    _expect(mh["kind"], kind, "kind")
    if vocab is not None:
        _expect(mh.get("out_vocab_hash"), vocab.digest(), "out_vocab_hash")
    if inventory is not None:
        _expect(mh.get("aug_vocab_hash"), inventory.digest(), "aug_vocab_hash")
    try:
        if mh["kind"] == "RNNLM":
            model = RnnLm(mh["vocab_size"], LmDims(**mh["dims"]))
        else:
            model = Seq2Seq(mh["out_vocab_size"], mh["aug_vocab_size"],
                            ModelDims.from_dict(mh["dims"]), mode=mh["mode"])
    except (KeyError, TypeError) as e:
        raise CheckpointError(f"{path}: incomplete model header (field {e})") from None
    if "out_vocab" in mh:
        model.vocab = Vocab.from_symbols(mh["out_vocab"])
        if model.vocab.digest() != mh.get("out_vocab_hash"):
            raise CheckpointError(f"{path}: vocabulary does not match field 'out_vocab_hash'")
    if "aug_inventory" in mh:
        model.inventory = PhonemeInventory.from_symbols(mh["aug_inventory"])
        if model.inventory.digest() != mh.get("aug_vocab_hash"):
            raise CheckpointError(f"{path}: inventory does not match field 'aug_vocab_hash'")
    shapes = {n: p.shape for n, p in model.named_parameters()}
    check_tensors(arrays, shapes)
    model.load_arrays({n: arrays[n] for n in shapes})

    ts = header.get("train_state")
    if ts is None:
        return model, None, header
    check_tensors(arrays, shapes, prefix="opt.m.")
    check_tensors(arrays, shapes, prefix="opt.v.")
    lr, b1, b2, eps = ts["opt_hyper"]
    opt = Adam(model.named_parameters(), lr, b1, b2, eps)
    opt.load({k: v for k, v in arrays.items() if k.startswith("opt.")}, ts["opt_steps"])
    state = TrainState(
        optimizer=opt,
        task_rng=_rng_from_state(ts["task_rng"]),
        speech_stream=IndexStream.from_state(ts["speech_stream"]) if ts["speech_stream"] else None,
        aug_stream=IndexStream.from_state(ts["aug_stream"]) if ts["aug_stream"] else None,
        step=ts["step"], phase=ts["phase"], speech_steps=ts["speech_steps"],
        aug_steps=ts["aug_steps"],
        best_dev=float("inf") if ts["best_dev"] is None else ts["best_dev"],
        bad_evals=ts["bad_evals"], evals=ts["evals"], stopped=ts["stopped"],
    )
    if ts.get("has_best"):
        check_tensors(arrays, shapes, prefix="best.")
        state.best_params = {n: arrays[f"best.{n}"].astype(model.dtype) for n in shapes}
    return model, state, header


# ---------------------------------------------------------------------------
# language model training
# ---------------------------------------------------------------------------

def train_lm(lm, texts, vocab, steps, batch_size=16, lr=1e-3, grad_clip=5.0, seed=0, log=None):
    """Plain Adam on mean per-token NLL over ``[sos, text, eos]`` sequences."""
    seqs = [vocab.encode(t) for t in texts]
    if not seqs:
        raise ContractError("LM training needs at least one sentence")
    opt = Adam(lm.named_parameters(), lr)
    stream = IndexStream(len(seqs), batch_size, [seed, 3])
    names = [n for n, _ in lm.named_parameters()]
    losses = []
    for step in range(steps):
        idx, _ = stream.next()
        lm.zero_grad()
        loss = lm.loss([seqs[i] for i in idx])
        value = float(loss.item())
        if not math.isfinite(value):
            raise TrainingError(f"non-finite LM loss at step {step}")
        ad.backward(loss)
        norm = clip_grad_norm(lm.parameters(), grad_clip)
        opt.update(names)
        losses.append(value)
        if log is not None:
            log({"step": step + 1, "phase": "lm", "task": "text", "loss": value, "grad_norm": norm})
    return losses

"""Beam search with shallow language-model fusion, plus CER/WER scoring.

Scorers share a tiny incremental interface::

    init_state() -> state
    step(states, tokens) -> (logp: ndarray[n, V], new_states)

``AsrScorer`` (models) and ``RnnLm`` implement it; tests use table-driven
scorers. A hypothesis' score is always recomputed from its two component
sums, ``asr_logp + lam * lm_logp``, never accumulated incrementally.
"""

from collections import namedtuple
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError
from .vocab import EOS, PAD, SOS


def fuse_score(asr_logp, lm_logp, lam):
    """Composite score of a (partial) hypothesis."""
    return asr_logp + lam * lm_logp


@dataclass
class DecodeConfig:
    beam_size: int = 5
    lam: float = 0.3
    max_len: int = 0  # 0: derived from the input length
    length_norm: bool = True

    def __post_init__(self):
        if int(self.beam_size) < 1:
            raise ConfigError(f"beam_size must be >= 1, got {self.beam_size}")
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        self.beam_size = int(self.beam_size)


@dataclass
class Hypothesis:
    tokens: list
    asr_logp: float = 0.0
    lm_logp: float = 0.0
    lam: float = 0.0
    state: object = field(default=None, repr=False)
    lm_state: object = field(default=None, repr=False)
    finished: bool = False

    @property
    def score(self):
        return fuse_score(self.asr_logp, self.lm_logp, self.lam)

    @property
    def length(self):
        """Number of emitted tokens (eos included, sos excluded)."""
        return max(1, len(self.tokens) - 1)

    def normalized_score(self, length_norm=True):
        return self.score / self.length if length_norm else self.score

    def output(self, eos=EOS):
        """Emitted tokens without the leading sos and trailing eos."""
        toks = self.tokens[1:]
        if toks and toks[-1] == eos:
            toks = toks[:-1]
        return list(toks)


def _rank_key(h, length_norm):
    return (-h.normalized_score(length_norm), tuple(h.tokens))


def beam_search(scorer, lm=None, cfg=None, sos=SOS, eos=EOS, blocked=(PAD, SOS), max_len=None):
    """Returns ``(best, finished_pool)``.

    Every step expands each live hypothesis over the non-blocked vocabulary
    and keeps the ``beam_size`` best expansions by cumulative fused score
    (ties: lexicographically smaller token sequence first). Expansions ending
    in ``eos`` move to the finished pool and stop occupying the beam. The
    winner is the finished hypothesis with the best length-normalised score.
    If nothing finishes, the best live hypothesis is returned with
    ``finished=False``. ``eos=None`` disables finishing (fixed-length search).
    """
    cfg = cfg or DecodeConfig()
    lam = cfg.lam if lm is not None else 0.0
    max_len = max_len or cfg.max_len
    if not max_len or max_len < 1:
        raise ConfigError("beam search needs a positive max_len")
    live = [Hypothesis([sos], 0.0, 0.0, lam, scorer.init_state(),
                       lm.init_state() if lm is not None else None)]
    finished = []
    blocked = set(int(b) for b in blocked)
    for _ in range(max_len):
        if not live:
            break
        last = [h.tokens[-1] for h in live]
        la, states = scorer.step([h.state for h in live], last)
        if lm is not None:
            ll, lm_states = lm.step([h.lm_state for h in live], last)
        else:
            ll, lm_states = np.zeros_like(la), [None] * len(live)
        V = la.shape[1]
        allowed = [v for v in range(V) if v not in blocked]
        cands = []
        for i, h in enumerate(live):
            asr = h.asr_logp + la[i, allowed]
            lmp = h.lm_logp + ll[i, allowed]
            sc = fuse_score(asr, lmp, lam)
            for j, v in enumerate(allowed):
                cands.append((-sc[j], h.tokens + [v], i, asr[j], lmp[j]))
        cands.sort(key=lambda c: (c[0], c[1]))
        live = []
        for negsc, toks, i, asr, lmp in cands[:cfg.beam_size]:
            h = Hypothesis(toks, float(asr), float(lmp), lam, states[i], lm_states[i])
            if eos is not None and toks[-1] == eos:
                h.finished = True
                finished.append(h)
            else:
                live.append(h)
    pool = finished if finished else live
    best = min(pool, key=lambda h: _rank_key(h, cfg.length_norm))
    return best, sorted(finished, key=lambda h: _rank_key(h, cfg.length_norm))


def greedy_search(scorer, max_len, sos=SOS, eos=EOS, blocked=(PAD, SOS)):
    """Reference greedy decoder: argmax per step (lowest id on ties)."""
    state = scorer.init_state()
    tokens, total = [sos], 0.0
    blocked = set(int(b) for b in blocked)
    for _ in range(max_len):
        logp, (state,) = scorer.step([state], [tokens[-1]])
        row = np.array(logp[0], dtype=np.float64)
        for b in blocked:
            if b < len(row):
                row[b] = -np.inf
        v = int(np.argmax(row))
        total += row[v]
        tokens.append(v)
        if eos is not None and v == eos:
            break
    return tokens, total


def default_max_len(enc_len):
    return int(2 * enc_len + 10)


def beam_search_fusion(X, model, lm=None, cfg=None):
    """Decode one feature sequence with the ASR model and optional LM."""
    cfg = cfg or DecodeConfig()
    scorer = model.scorer(X)
    max_len = cfg.max_len or default_max_len(scorer.T)
    return beam_search(scorer, lm, cfg, max_len=max_len)


def recognize(model, feats, cfg=None, lm=None):
    """Token-ID outputs for a list of feature sequences.

    Without a config (or with beam 1 and no LM) a batched greedy pass is
    used; otherwise each utterance is beam-searched.
    """
    if cfg is None or (cfg.beam_size == 1 and lm is None):
        max_len = cfg.max_len if cfg is not None and cfg.max_len else None
        return model.greedy_decode(feats, max_len=max_len)
    return [beam_search_fusion(x, model, lm, cfg)[0].output() for x in feats]


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

EditOps = namedtuple("EditOps", "distance substitutions insertions deletions")


def edit_distance(ref, hyp):
    """Unit-cost Levenshtein distance with an S/I/D decomposition.

    Among minimal alignments the backtrace prefers match/substitution, then
    deletion, then insertion.
    """
    ref, hyp = list(ref), list(hyp)
    n, m = len(ref), len(hyp)
    D = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        D[i][0] = i
    for j in range(m + 1):
        D[0][j] = j
    for i in range(1, n + 1):
        Di, Dp, r = D[i], D[i - 1], ref[i - 1]
        for j in range(1, m + 1):
            sub = Dp[j - 1] + (r != hyp[j - 1])
            dele = Dp[j] + 1
            ins = Di[j - 1] + 1
            Di[j] = min(sub, dele, ins)
    S = I = Dl = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and D[i][j] == D[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]):
            S += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and D[i][j] == D[i - 1][j] + 1:
            Dl += 1
            i -= 1
        else:
            I += 1
            j -= 1
    return EditOps(D[n][m], S, I, Dl)


def corpus_cer_wer(pairs):
    """Pooled error rates over ``(reference, hypothesis)`` string pairs."""
    pairs = list(pairs)
    if not pairs:
        raise ContractError("corpus_cer_wer needs at least one pair")
    ce = cn = we = wn = 0
    for ref, hyp in pairs:
        ce += edit_distance(ref, hyp).distance
        cn += len(ref)
        rw, hw = ref.split(), hyp.split()
        we += edit_distance(rw, hw).distance
        wn += len(rw)
    if cn == 0:
        raise ContractError("total reference length is zero")
    return ce / cn, (we / wn if wn else float(we > 0))

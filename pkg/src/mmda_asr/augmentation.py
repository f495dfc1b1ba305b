"""Text-derived augmenting data.

Raw sentences are filtered against the speech training character set,
converted to phoneme IDs through a pronunciation lexicon (with per-character
grapheme fallback for unknown words), and expanded in time by repeating every
phoneme a number of frames drawn from a single Gaussian shared by all
phonemes. The Gaussian's mean is the corpus ratio of input frames to output
characters in the speech training data; its standard deviation is a quarter
of the mean.
"""

import hashlib
import json
import logging
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, FormatError, OOVError

log = logging.getLogger(__name__)

PHONE_PAD = "<pad>"
WORD_BOUNDARY = "<wb>"
FALLBACK_PREFIX = "g:"
DEFAULT_MIN_LEN = 4
DEFAULT_MAX_LEN = 300
SIGMA_RATIO = 0.25


class PhonemeInventory:
    """Symbol table for augmenting inputs.

    Order: pad (0), word boundary (1), lexicon phones sorted by code point,
    then grapheme fallback symbols ``g:<char>`` sorted by character.
    """

    PAD = 0
    WB = 1

    def __init__(self, phones, graphemes=()):
        phones = sorted(set(phones))
        for p in phones:
            if p in (PHONE_PAD, WORD_BOUNDARY) or p.startswith(FALLBACK_PREFIX):
                raise ContractError(f"phone symbol {p!r} collides with a reserved symbol")
        fallback = [FALLBACK_PREFIX + ch for ch in sorted(set(graphemes))]
        self.symbols = [PHONE_PAD, WORD_BOUNDARY] + phones + fallback
        self.index = {s: i for i, s in enumerate(self.symbols)}

    @classmethod
    def from_symbols(cls, symbols):
        symbols = list(symbols)
        phones = [s for s in symbols[2:] if not s.startswith(FALLBACK_PREFIX)]
        graphemes = [s[len(FALLBACK_PREFIX):] for s in symbols[2:] if s.startswith(FALLBACK_PREFIX)]
        inv = cls(phones, graphemes)
        if inv.symbols != symbols:
            raise FormatError("stored phoneme inventory is not in canonical order")
        return inv

    def __len__(self):
        return len(self.symbols)

    def __eq__(self, other):
        return isinstance(other, PhonemeInventory) and self.symbols == other.symbols

    def id(self, symbol):
        try:
            return self.index[symbol]
        except KeyError:
            raise OOVError(f"symbol {symbol!r} not in phoneme inventory") from None

    def fallback_id(self, ch):
        return self.id(FALLBACK_PREFIX + ch)

    def digest(self):
        blob = json.dumps(self.symbols, ensure_ascii=False).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]


class Lexicon:
    """Word -> phoneme-ID pronunciation map over a :class:`PhonemeInventory`.

    ``graphemes`` lists the characters that may need a fallback symbol
    (normally the speech training character set).
    """

    def __init__(self, entries, graphemes=()):
        entries = {w: list(p) for w, p in entries.items()}
        for w, pron in entries.items():
            if not pron:
                raise ContractError(f"empty pronunciation for word {w!r}")
        phones = {p for pron in entries.values() for p in pron}
        self.inventory = PhonemeInventory(phones, graphemes)
        self.entries = entries
        self._ids = {w: [self.inventory.id(p) for p in pron] for w, pron in entries.items()}

    def __contains__(self, word):
        return word in self._ids

    def __len__(self):
        return len(self._ids)

    def pronounce(self, word):
        """Phoneme IDs for ``word``; unknown words fall back to graphemes."""
        ids = self._ids.get(word)
        if ids is not None:
            return list(ids)
        return [self.inventory.fallback_id(ch) for ch in word]

    @classmethod
    def load(cls, path, graphemes=()):
        """Read ``word<TAB>ph1 ph2 ...`` lines (UTF-8); later duplicates win."""
        entries = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if not line.strip():
                    continue
                if "\t" not in line:
                    raise FormatError(f"{path}:{lineno}: expected 'word<TAB>phones'")
                word, phones = line.split("\t", 1)
                entries[word] = phones.split()
        return cls(entries, graphemes)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for w in sorted(self.entries):
                fh.write(f"{w}\t{' '.join(self.entries[w])}\n")


@dataclass(frozen=True)
class DurationModel:
    """Frames per phoneme ~ N(mean, std^2), shared by all phonemes."""

    mean: float
    std: float

    def __post_init__(self):
        if not self.mean > 0 or self.std < 0:
            raise ContractError(f"invalid duration model mean={self.mean} std={self.std}")

    @classmethod
    def from_mean(cls, mean, ratio=SIGMA_RATIO):
        return cls(float(mean), ratio * float(mean))


@dataclass
class AugmentingExample:
    x_hat: list
    y: list
    phonemes: list


# ---------------------------------------------------------------------------

def _in_range(sentence, charset, min_len, max_len):
    return min_len <= len(sentence) <= max_len and all(ch in charset for ch in sentence)


def filter_corpus(sentences, train_charset, min_len=DEFAULT_MIN_LEN, max_len=DEFAULT_MAX_LEN):
    """Keep sentences whose characters all occur in ``train_charset`` and
    whose length lies in ``[min_len, max_len]``; input order is preserved."""
    charset = set(train_charset)
    if not charset:
        raise ContractError("training character set is empty")
    kept = [s for s in sentences if _in_range(s, charset, min_len, max_len)]
    if not kept:
        log.warning("filter_corpus kept no sentences")
    return kept


def phonemize_sentence(sentence, lex):
    """Concatenate word pronunciations, separated by the word-boundary ID."""
    out = []
    for k, word in enumerate(sentence.split()):
        if k:
            out.append(PhonemeInventory.WB)
        out.extend(lex.pronounce(word))
    return out


def estimate_duration_mean(utterances, ratio=SIGMA_RATIO):
    """Pooled frames-per-character ratio over ``(num_frames, num_chars)`` pairs.

    Accepts pairs or mappings with ``frames`` and ``text`` keys. The result
    is sum(L) / sum(|y|), not the mean of the per-utterance ratios.
    """
    total_frames = total_syms = 0
    n = 0
    for u in utterances:
        if isinstance(u, dict):
            L, ylen = int(u["frames"]), len(u["text"])
        else:
            L, ylen = int(u[0]), int(u[1])
        if L <= 0 or ylen <= 0:
            raise ContractError(f"utterance with L={L}, |y|={ylen}; both must be positive")
        total_frames += L
        total_syms += ylen
        n += 1
    if n == 0:
        raise ContractError("cannot estimate durations from an empty manifest")
    return DurationModel.from_mean(total_frames / total_syms, ratio)


def round_half_up(x):
    return np.floor(np.asarray(x) + 0.5)


def sample_durations(phonemes, dm, rng):
    """Repeat every phoneme ``max(1, round(d))`` times, ``d ~ N(mean, std^2)``."""
    phonemes = np.asarray(phonemes, dtype=np.int64)
    if phonemes.size == 0:
        raise ContractError("cannot expand an empty phoneme sequence")
    d = rng.normal(dm.mean, dm.std, size=phonemes.size)
    reps = np.maximum(1, round_half_up(d)).astype(np.int64)
    return np.repeat(phonemes, reps).tolist()


def build_augmenting_example(sentence, lex, dm, rng, vocab):
    phon = phonemize_sentence(sentence, lex)
    if not phon:
        raise ContractError(f"sentence {sentence!r} has no words")
    return AugmentingExample(sample_durations(phon, dm, rng), vocab.encode(sentence), phon)


def collapse_expansion(x_hat):
    """Inverse of duration expansion: merge runs of identical IDs."""
    out = []
    for i in x_hat:
        if not out or out[-1] != i:
            out.append(i)
    return out


# ---------------------------------------------------------------------------
# corpus files
# ---------------------------------------------------------------------------

def prepare_augmenting(sentences, lex, train_charset, min_len=DEFAULT_MIN_LEN,
                       max_len=DEFAULT_MAX_LEN, dm=None, seed=0, expand=False):
    """Filter + phonemize; with ``expand`` also apply durations (needs ``dm``).

    Returns a list of ``{id, phoneme_ids, text}`` records in input order.
    """
    kept = filter_corpus(sentences, train_charset, min_len, max_len)
    rng = np.random.default_rng(seed)
    width = max(6, len(str(len(kept))))
    recs = []
    for k, s in enumerate(kept):
        ids = phonemize_sentence(s, lex)
        if expand:
            if dm is None:
                raise ContractError("expansion requires a duration model")
            ids = sample_durations(ids, dm, rng)
        recs.append({"id": f"aug{k:0{width}d}", "phoneme_ids": ids, "text": s})
    return recs


def write_augmenting_corpus(path, records, meta=None):
    """JSON lines; an optional first line ``{"meta": {...}}`` stores settings."""
    with open(path, "w", encoding="utf-8") as fh:
        if meta is not None:
            fh.write(json.dumps({"meta": meta}, sort_keys=True) + "\n")
        for r in records:
            fh.write(json.dumps({"id": r["id"], "phoneme_ids": list(map(int, r["phoneme_ids"])),
                                 "text": r["text"]}, ensure_ascii=False) + "\n")


def read_augmenting_corpus(path):
    """Returns ``(records, meta)``."""
    records, meta = [], {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise FormatError(f"{path}:{lineno}: {e}") from None
            if "meta" in obj and lineno == 1:
                meta = obj["meta"]
                continue
            if not obj.get("phoneme_ids") or not obj.get("text"):
                raise FormatError(f"{path}:{lineno}: record needs phoneme_ids and text")
            records.append(obj)
    return records, meta

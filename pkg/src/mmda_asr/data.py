"""On-disk formats, the synthetic toy task, subsetting and curve export.

Feature file layout (little-endian)::

    b"FEAT" | u32 version | u32 L | u32 D | L*D float32, row-major frames

Manifests are JSON lines ``{"id", "feat", "text", "lang"}``; relative
``feat`` paths are resolved against the manifest's directory.
"""

import csv
import json
import os
import shutil
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .augmentation import Lexicon, round_half_up
from .errors import ConfigError, ContractError, FormatError

FEAT_MAGIC = b"FEAT"
FEAT_VERSION = 1
FEAT_HEADER = struct.Struct("<4sIII")
FRAME_SHIFT_S = 0.01  # seconds per frame when converting to "hours"

# ---------------------------------------------------------------------------
# feature files
# ---------------------------------------------------------------------------


def write_feature_file(path, feats):
    X = np.asarray(feats)
    if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
        raise ContractError(f"feature matrix must be L x D with L, D >= 1, got {X.shape}")
    with open(path, "wb") as fh:
        fh.write(FEAT_HEADER.pack(FEAT_MAGIC, FEAT_VERSION, X.shape[0], X.shape[1]))
        fh.write(np.ascontiguousarray(X, dtype="<f4").tobytes())


def _parse_feature_header(blob, path):
    if len(blob) < FEAT_HEADER.size:
        raise FormatError(f"{path}: truncated header at byte offset {len(blob)}: "
                          f"expected {FEAT_HEADER.size} bytes, got {len(blob)}")
    magic, version, L, D = FEAT_HEADER.unpack_from(blob)
    if magic != FEAT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at byte offset 0 (expected {FEAT_MAGIC!r})")
    if version != FEAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version} at byte offset 4")
    if L < 1 or D < 1:
        raise FormatError(f"{path}: invalid dimensions L={L}, D={D} at byte offset 8")
    return L, D


def read_feature_header(path):
    with open(path, "rb") as fh:
        return _parse_feature_header(fh.read(FEAT_HEADER.size), path)


def read_feature_file(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    L, D = _parse_feature_header(blob, path)
    expected = FEAT_HEADER.size + 4 * L * D
    if len(blob) != expected:
        kind = "truncated payload" if len(blob) < expected else "trailing bytes"
        raise FormatError(f"{path}: {kind} at byte offset {min(len(blob), expected)}: "
                          f"expected {expected} bytes, got {len(blob)}")
    return np.frombuffer(blob, dtype="<f4", offset=FEAT_HEADER.size).reshape(L, D).astype(np.float32)


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

@dataclass
class Utterance:
    id: str
    feat: str
    text: str
    lang: str = ""
    _cache: object = field(default=None, repr=False, compare=False)

    def features(self):
        if self._cache is None:
            self._cache = read_feature_file(self.feat)
        return self._cache

    @property
    def frames(self):
        if self._cache is not None:
            return len(self._cache)
        return read_feature_header(self.feat)[0]

    def record(self, base=None):
        feat = os.path.relpath(self.feat, base) if base else self.feat
        return {"id": self.id, "feat": feat, "text": self.text, "lang": self.lang}


def read_manifest(path, check_files=True):
    base = os.path.dirname(os.path.abspath(path))
    utts, seen = [], set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise FormatError(f"{path}:{lineno}: {e}") from None
            missing = {"id", "feat", "text"} - set(rec)
            if missing:
                raise FormatError(f"{path}:{lineno}: missing field(s) {sorted(missing)}")
            if rec["id"] in seen:
                raise FormatError(f"{path}:{lineno}: duplicate id {rec['id']!r}")
            if not rec["text"]:
                raise FormatError(f"{path}:{lineno}: empty text for {rec['id']!r}")
            seen.add(rec["id"])
            feat = rec["feat"] if os.path.isabs(rec["feat"]) else os.path.join(base, rec["feat"])
            if check_files and not os.path.exists(feat):
                raise FormatError(f"{path}:{lineno}: feature file {rec['feat']!r} not found")
            utts.append(Utterance(rec["id"], feat, rec["text"], rec.get("lang", "")))
    return utts


def write_manifest(path, utts):
    base = os.path.dirname(os.path.abspath(path))
    with open(path, "w", encoding="utf-8") as fh:
        for u in utts:
            fh.write(json.dumps(u.record(base), ensure_ascii=False) + "\n")


def subset_manifest(utts, fraction, seed):
    """Seeded random subset of ``round(fraction * N)`` utterances.

    The subset is a prefix of one seeded permutation, so for a fixed seed
    smaller fractions always select subsets of larger ones. Manifest order
    is kept.
    """
    if not 0 < fraction <= 1:
        raise ConfigError(f"fraction must lie in (0, 1], got {fraction}")
    utts = list(utts)
    n = int(round_half_up(fraction * len(utts)))
    if n < 1:
        raise ConfigError(f"fraction {fraction} of {len(utts)} utterances is empty")
    perm = np.random.default_rng(seed).permutation(len(utts))
    keep = np.sort(perm[:n])
    return [utts[i] for i in keep]


def hours_of(utts):
    return sum(u.frames for u in utts) * FRAME_SHIFT_S / 3600.0


# ---------------------------------------------------------------------------
# synthetic toy task
# ---------------------------------------------------------------------------

LETTERS = "abcdefghijklmnopqrstuvwxyz"
SIL = "sil"


@dataclass
class ToyTaskSpec:
    """Synthetic speech: fixed per-phoneme vectors, Gaussian durations and noise.

    Every letter is pronounced by one of ``n_phonemes - 1`` letter phonemes
    (several letters share a phoneme, so spelling needs word knowledge);
    a silence phoneme separates words. Sentences come from a random sparse
    word-bigram model.
    """

    n_phonemes: int = 20
    charset: str = LETTERS
    feat_dim: int = 40
    min_words: int = 3
    max_words: int = 12
    min_word_len: int = 2
    max_word_len: int = 4
    n_words: int = 200
    successors: int = 8
    noise_std: float = 0.1
    dur_mean: float = 4.0
    dur_std: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.noise_std < 0 or self.dur_std < 0 or self.dur_mean <= 0:
            raise ConfigError("noise/duration parameters out of range")
        if not 2 <= self.n_phonemes <= len(self.charset) + 1:
            raise ConfigError("need 2 <= n_phonemes <= len(charset) + 1")
        if not 1 <= self.min_words <= self.max_words:
            raise ConfigError("bad sentence length range")

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


class ToyTask:
    """Everything derived from a :class:`ToyTaskSpec` seed."""

    def __init__(self, spec=None):
        self.spec = spec = spec or ToyTaskSpec()
        rng = np.random.default_rng(spec.seed)
        n_letter_ph = spec.n_phonemes - 1
        self.phones = [f"p{k:02d}" for k in range(n_letter_ph)] + [SIL]
        # many-to-one letter -> phoneme map, every phoneme used at least once
        order = rng.permutation(len(spec.charset))
        assign = np.empty(len(spec.charset), dtype=np.int64)
        assign[order] = np.arange(len(spec.charset)) % n_letter_ph
        self.letter_phone = {ch: int(assign[k]) for k, ch in enumerate(spec.charset)}
        while True:
            emis = rng.normal(size=(spec.n_phonemes, spec.feat_dim))
            d = np.linalg.norm(emis[:, None] - emis[None], axis=-1)
            if np.all(d[~np.eye(len(emis), dtype=bool)] > 1e-6):
                break
        self.emissions = emis.astype(np.float32)
        self.words = self._make_words(rng)
        self.pron = {w: self._pron(w) for w in self.words}
        self.by_pron = {tuple(p): w for w, p in self.pron.items()}
        V = len(self.words)
        self.start = rng.dirichlet(np.full(V, 0.5))
        succ = np.zeros((V, V))
        for i in range(V):
            nxt = rng.choice(V, size=min(spec.successors, V), replace=False)
            succ[i, nxt] = rng.dirichlet(np.full(len(nxt), 0.5))
        self.bigram = succ

    def _pron(self, word):
        return [self.letter_phone[ch] for ch in word]

    def _make_words(self, rng):
        spec = self.spec
        words, prons = [], set()
        attempts = 0
        while len(words) < spec.n_words:
            attempts += 1
            if attempts > 1000 * spec.n_words:
                raise ConfigError("could not draw enough distinct words for the toy lexicon")
            n = int(rng.integers(spec.min_word_len, spec.max_word_len + 1))
            w = "".join(spec.charset[i] for i in rng.integers(0, len(spec.charset), size=n))
            p = tuple(self._pron(w))
            # adjacent identical phonemes would merge in a duration-collapsed view
            if any(a == b for a, b in zip(p, p[1:])) or p in prons:
                continue
            words.append(w)
            prons.add(p)
        return words

    def lexicon(self, graphemes=None):
        entries = {w: [self.phones[k] for k in p] for w, p in self.pron.items()}
        return Lexicon(entries, self.spec.charset if graphemes is None else graphemes)

    def sample_sentence(self, rng):
        n = int(rng.integers(self.spec.min_words, self.spec.max_words + 1))
        w = [int(rng.choice(len(self.words), p=self.start))]
        while len(w) < n:
            w.append(int(rng.choice(len(self.words), p=self.bigram[w[-1]])))
        return " ".join(self.words[i] for i in w)

    def phone_sequence(self, sentence):
        sil = len(self.phones) - 1
        out = []
        for k, word in enumerate(sentence.split()):
            if k:
                out.append(sil)
            out.extend(self._pron(word))
        return out

    def render(self, sentence, rng):
        """Frames for ``sentence``: each phoneme's vector repeated for its
        sampled duration, plus isotropic Gaussian noise."""
        ph = np.asarray(self.phone_sequence(sentence))
        d = rng.normal(self.spec.dur_mean, self.spec.dur_std, size=len(ph))
        reps = np.maximum(1, round_half_up(d)).astype(np.int64)
        X = np.repeat(self.emissions[ph], reps, axis=0)
        noise = rng.normal(size=X.shape) * self.spec.noise_std
        return (X + noise).astype(np.float32)

    def oracle_transcribe(self, feats):
        """Nearest-emission label per frame, collapse runs, split on silence,
        and look words up by pronunciation."""
        d = ((feats[:, None, :] - self.emissions[None]) ** 2).sum(-1)
        lab = np.argmin(d, axis=1)
        runs = [int(lab[0])] + [int(b) for a, b in zip(lab, lab[1:]) if a != b]
        sil = len(self.phones) - 1
        words, cur = [], []
        for p in runs + [sil]:
            if p == sil:
                if cur:
                    words.append(self.by_pron.get(tuple(cur), "?"))
                cur = []
            else:
                cur.append(p)
        return " ".join(words)


def gen_toy_corpus(spec, out_dir, n_train, n_dev, n_aug, force=False):
    """Write a complete toy corpus; returns a dict of the written paths.

    Layout: ``train.jsonl``, ``dev.jsonl``, ``feats/*.feat``, ``aug.txt``
    (augmenting sentences, disjoint from train/dev), ``lexicon.tsv`` and
    ``toy.json`` (the spec). Output depends only on the spec and counts.
    """
    if min(n_train, n_dev, n_aug) < 1:
        raise ConfigError("n_train, n_dev and n_aug must all be >= 1")
    if os.path.exists(out_dir):
        if not force:
            raise ConfigError(f"output directory {out_dir} exists (use --force to overwrite)")
        shutil.rmtree(out_dir)
    os.makedirs(os.path.join(out_dir, "feats"))
    task = ToyTask(spec)
    rng = np.random.default_rng([spec.seed, 1])
    paths = {}
    speech_texts = set()
    for split, n in (("train", n_train), ("dev", n_dev)):
        utts = []
        for k in range(n):
            text = task.sample_sentence(rng)
            speech_texts.add(text)
            feat = os.path.join(out_dir, "feats", f"{split}{k:05d}.feat")
            write_feature_file(feat, task.render(text, rng))
            utts.append(Utterance(f"{split}{k:05d}", feat, text, "toy"))
        paths[split] = os.path.join(out_dir, f"{split}.jsonl")
        write_manifest(paths[split], utts)
    aug = []
    tries = 0
    while len(aug) < n_aug:
        tries += 1
        if tries > 100 * n_aug:
            raise ConfigError("could not draw enough augmenting sentences disjoint from speech data")
        s = task.sample_sentence(rng)
        if s not in speech_texts:
            aug.append(s)
    paths["aug"] = os.path.join(out_dir, "aug.txt")
    with open(paths["aug"], "w", encoding="utf-8") as fh:
        fh.write("\n".join(aug) + "\n")
    paths["lexicon"] = os.path.join(out_dir, "lexicon.tsv")
    task.lexicon().save(paths["lexicon"])
    paths["spec"] = os.path.join(out_dir, "toy.json")
    with open(paths["spec"], "w", encoding="utf-8") as fh:
        json.dump(asdict(spec), fh, sort_keys=True, indent=1)
        fh.write("\n")
    return paths


def read_lines(path):
    with open(path, encoding="utf-8") as fh:
        return [line.rstrip("\n") for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# result curves
# ---------------------------------------------------------------------------

CURVE_HEADER = ("hours", "system", "dev_cer", "eval_cer")


def read_result(path):
    """The last ``result`` record of a training log or a score JSON file."""
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    try:
        obj = json.loads(text)
        if isinstance(obj, dict) and "hours" in obj:
            return obj
    except json.JSONDecodeError:
        pass
    result = None
    for line in text.splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        if rec.get("event") == "result":
            result = rec
    if result is None:
        raise FormatError(f"{path}: no result record found")
    return result


def export_curve(results, out_path):
    """Write ``hours,system,dev_cer,eval_cer`` rows sorted by hours (then system)."""
    rows = []
    for r in results:
        missing = {"hours", "system", "dev_cer"} - set(r)
        if missing:
            raise FormatError(f"result record lacks {sorted(missing)}")
        ev = r.get("eval_cer")
        rows.append((float(r["hours"]), str(r["system"]), float(r["dev_cer"]),
                     "" if ev is None else float(ev)))
    rows.sort(key=lambda t: (t[0], t[1]))
    with open(out_path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_HEADER)
        for h, s, d, e in rows:
            w.writerow([f"{h:.6f}", s, f"{d:.6f}", e if e == "" else f"{e:.6f}"])
    return rows

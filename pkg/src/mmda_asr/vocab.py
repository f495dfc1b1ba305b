"""Character output vocabulary with fixed reserved ids."""

import hashlib
import json

PAD, SOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<sos>", "<eos>", "<unk>")


class Vocab:
    """Reserved symbols first, then the remaining symbols sorted by code point."""

    def __init__(self, symbols):
        symbols = sorted(set(symbols) - set(RESERVED))
        self.symbols = list(RESERVED) + symbols
        self.index = {s: i for i, s in enumerate(self.symbols)}

    @classmethod
    def from_texts(cls, texts):
        chars = set()
        for t in texts:
            chars.update(t)
        return cls(chars)

    @classmethod
    def from_symbols(cls, symbols):
        """Rebuild from a stored full symbol list (reserved entries included)."""
        symbols = list(symbols)
        if tuple(symbols[:len(RESERVED)]) != RESERVED:
            raise ValueError("stored vocabulary does not start with the reserved symbols")
        v = cls(symbols[len(RESERVED):])
        if v.symbols != symbols:
            raise ValueError("stored vocabulary is not in canonical order")
        return v

    def __len__(self):
        return len(self.symbols)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.symbols == other.symbols

    def __contains__(self, sym):
        return sym in self.index

    @property
    def charset(self):
        return set(self.symbols[len(RESERVED):])

    def encode(self, text, sentinels=True):
        ids = [self.index.get(ch, UNK) for ch in text]
        return [SOS] + ids + [EOS] if sentinels else ids

    def decode(self, ids):
        out = []
        for i in ids:
            i = int(i)
            if i == EOS:
                break
            if i in (PAD, SOS):
                continue
            out.append(self.symbols[i] if i != UNK else "�")
        return "".join(out)

    def digest(self):
        blob = json.dumps(self.symbols, ensure_ascii=False).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]


def merge_vocabularies(vocabs):
    """Union of all symbols; ids do not depend on the input order."""
    vocabs = list(vocabs)
    if not vocabs:
        raise ValueError("merge_vocabularies needs at least one vocabulary")
    symbols = set()
    for v in vocabs:
        symbols.update(v.charset if isinstance(v, Vocab) else v)
    return Vocab(symbols)

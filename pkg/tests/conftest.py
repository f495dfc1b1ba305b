"""Shared fixtures: tiny 64-bit models, a small toy corpus, table-driven scorers."""

import numpy as np
import pytest

from mmda_asr.data import ToyTaskSpec, gen_toy_corpus, read_manifest
from mmda_asr.models import ModelDims, Seq2Seq


TINY_DIMS = ModelDims(feat_dim=3, enc_hidden=2, proj_dim=3, att_dim=2, conv_channels=2,
                      conv_width=3, dec_emb=2, dec_hidden=3, aug_emb=2, aug_hidden=2)


def tiny_model(mode="mmda", seed=0, dims=TINY_DIMS, vocab_size=6, aug_size=5, scale=0.5):
    """A 64-bit model small enough for full finite-difference sweeps."""
    d = ModelDims(**{**dims.__dict__, "init_scale": scale})
    return Seq2Seq(vocab_size, aug_size, d, mode=mode, seed=seed, dtype=np.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def mmda_model():
    return tiny_model("mmda")


@pytest.fixture
def psda_model():
    return tiny_model("psda")


class TableScorer:
    """Scorer whose next-token distribution depends only on the step index
    (and optionally the previous token) via a fixed table of log-probs."""

    def __init__(self, table):
        # table: (steps, V, V) log-probs indexed [t, prev, next]
        self.table = np.asarray(table, dtype=np.float64)

    def init_state(self):
        return 0

    def step(self, states, tokens):
        rows = [self.table[min(s, len(self.table) - 1), tok] for s, tok in zip(states, tokens)]
        return np.stack(rows), [s + 1 for s in states]


def random_table(rng, steps, V, sharp=2.0):
    logits = rng.normal(0.0, sharp, size=(steps, V, V))
    return logits - np.log(np.exp(logits).sum(-1, keepdims=True))


@pytest.fixture(scope="session")
def toy_corpus(tmp_path_factory):
    """A small toy corpus shared by the data/CLI tests."""
    out = tmp_path_factory.mktemp("toy") / "corpus"
    spec = ToyTaskSpec(n_words=40, seed=3)
    paths = gen_toy_corpus(spec, str(out), n_train=12, n_dev=6, n_aug=30)
    return {"spec": spec, "paths": paths, "dir": str(out),
            "train": read_manifest(paths["train"]), "dev": read_manifest(paths["dev"])}


# ---------------------------------------------------------------------------
# acceptance report: one line per criterion at the end of the run
# ---------------------------------------------------------------------------

ACCEPTANCE = {}


def record_criterion(number, title, passed, detail=""):
    ACCEPTANCE[number] = (title, passed, detail)
    line = f"CRITERION {number:2d} {'PASS' if passed else 'FAIL'}: {title}"
    print(line + (f" -- {detail}" if detail else ""))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, passed, detail = ACCEPTANCE[number]
        line = f"CRITERION {number:2d} {'PASS' if passed else 'FAIL'}: {title}"
        terminalreporter.write_line(line + (f" -- {detail}" if detail else ""))

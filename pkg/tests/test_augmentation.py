"""Filtering, phonemization, the duration model and augmenting-corpus files."""

import itertools
import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mmda_asr.augmentation import (
    DurationModel, Lexicon, PhonemeInventory, build_augmenting_example, collapse_expansion,
    estimate_duration_mean, filter_corpus, phonemize_sentence, prepare_augmenting,
    read_augmenting_corpus, round_half_up, sample_durations, write_augmenting_corpus,
)
from mmda_asr.errors import ContractError, FormatError, OOVError
from mmda_asr.vocab import EOS, SOS, Vocab, merge_vocabularies

WB = PhonemeInventory.WB


@pytest.fixture
def lex():
    return Lexicon({"ab": ["p1", "p2"], "ba": ["p2", "p1"], "c": ["p3"]}, graphemes="abcd")


@pytest.fixture
def vocab():
    return Vocab("abcd ")


class TestFilterCorpus:
    def test_unseen_character_drops_sentence(self):
        assert filter_corpus(["abcd", "abxd"], set("abcd")) == ["abcd"]

    def test_empty_sentence_dropped(self):
        assert filter_corpus(["", "abcd"], set("abcd")) == ["abcd"]

    @pytest.mark.parametrize("min_len,max_len", [(0, 3), (2, 2), (1, 10)])
    def test_exhaustive_against_predicate(self, min_len, max_len):
        charset = set("ab")
        corpus = ["".join(p) for n in range(5) for p in itertools.product("abc", repeat=n)]
        expected = [s for s in corpus
                    if min_len <= len(s) <= max_len and set(s) <= charset]
        assert filter_corpus(corpus, charset, min_len, max_len) == expected

    def test_idempotent(self):
        corpus = ["ab ab", "a", "abc", "ba ba ba", "zz"]
        once = filter_corpus(corpus, set("ab "), 2, 6)
        assert filter_corpus(once, set("ab "), 2, 6) == once

    def test_default_length_bounds(self):
        assert filter_corpus(["abc", "abca", "a" * 300, "a" * 301], set("abc")) == ["abca", "a" * 300]

    def test_empty_result_warns(self, caplog):
        with caplog.at_level(logging.WARNING):
            assert filter_corpus(["xyz"], set("ab")) == []
        assert "kept no sentences" in caplog.text

    def test_empty_charset(self):
        with pytest.raises(ContractError):
            filter_corpus(["ab"], set())


class TestPhonemize:
    def test_inventory_layout(self, lex):
        inv = lex.inventory
        assert inv.symbols == ["<pad>", "<wb>", "p1", "p2", "p3", "g:a", "g:b", "g:c", "g:d"]
        assert inv.id("<wb>") == WB

    def test_word_boundary_between_words(self, lex):
        p1, p2 = lex.inventory.id("p1"), lex.inventory.id("p2")
        assert phonemize_sentence("ab ab", lex) == [p1, p2, WB, p1, p2]

    def test_oov_grapheme_fallback(self, lex):
        inv = lex.inventory
        assert phonemize_sentence("cd", lex) == [inv.id("g:c"), inv.id("g:d")]

    def test_mixed_sentence(self, lex):
        i = lex.inventory.id
        assert phonemize_sentence("c dab ba", lex) == [
            i("p3"), WB, i("g:d"), i("g:a"), i("g:b"), WB, i("p2"), i("p1")]

    def test_unknown_symbol(self, lex):
        with pytest.raises(OOVError):
            lex.inventory.id("p9")

    def test_fallback_requires_grapheme(self, lex):
        with pytest.raises(OOVError):
            lex.pronounce("xy")

    def test_empty_pronunciation_rejected(self):
        with pytest.raises(ContractError):
            Lexicon({"a": []})

    def test_lexicon_file_roundtrip(self, lex, tmp_path):
        path = tmp_path / "lex.tsv"
        lex.save(path)
        assert path.read_text(encoding="utf-8") == "ab\tp1 p2\nba\tp2 p1\nc\tp3\n"
        again = Lexicon.load(path, graphemes="abcd")
        assert again.entries == lex.entries and again.inventory == lex.inventory

    def test_lexicon_file_format_error(self, tmp_path):
        path = tmp_path / "bad.tsv"
        path.write_text("ab p1 p2\n", encoding="utf-8")
        with pytest.raises(FormatError, match="bad.tsv:1"):
            Lexicon.load(path)

    def test_inventory_from_symbols(self, lex):
        assert PhonemeInventory.from_symbols(lex.inventory.symbols) == lex.inventory
        with pytest.raises(FormatError):
            PhonemeInventory.from_symbols(["<pad>", "<wb>", "p2", "p1"])


class TestDurationModel:
    def test_single_ratio(self):
        dm = estimate_duration_mean([(100, 20)])
        assert dm.mean == 5.0 and dm.std == 1.25

    def test_pooled_not_mean_of_ratios(self):
        assert estimate_duration_mean([(100, 20), (50, 30)]).mean == 3.0

    def test_manifest_dicts(self):
        assert estimate_duration_mean([{"frames": 12, "text": "abc"}]).mean == 4.0

    def test_matches_summation_oracle(self, rng):
        pairs = [(int(L), int(n)) for L, n in zip(rng.integers(1, 500, 50), rng.integers(1, 80, 50))]
        total_L = 0
        total_n = 0
        for L, n in pairs:
            total_L += L
            total_n += n
        assert estimate_duration_mean(pairs).mean == total_L / total_n

    def test_empty_manifest(self):
        with pytest.raises(ContractError):
            estimate_duration_mean([])

    @pytest.mark.parametrize("pair", [(0, 3), (4, 0)])
    def test_nonpositive_entries(self, pair):
        with pytest.raises(ContractError):
            estimate_duration_mean([pair])

    def test_invalid_model(self):
        with pytest.raises(ContractError):
            DurationModel(0.0, 1.0)


class TestSampleDurations:
    def test_degenerate_gaussian_repeats_exactly(self, rng):
        assert sample_durations([4, 5, 6], DurationModel(3.0, 0.0), rng) == [4, 4, 4, 5, 5, 5, 6, 6, 6]

    def test_unit_mean_keeps_length(self, rng):
        assert sample_durations([4, 5, 6, 4], DurationModel(1.0, 0.0), rng) == [4, 5, 6, 4]

    def test_monte_carlo_mean(self):
        rng = np.random.default_rng(0)
        x_hat = sample_durations(np.zeros(100_000, dtype=int), DurationModel(5.0, 1.25), rng)
        assert abs(len(x_hat) / 100_000 - 5.0) <= 0.05

    def test_clamped_to_one(self):
        rng = np.random.default_rng(0)
        x_hat = sample_durations(list(range(1, 2001)), DurationModel(0.2, 1.0), rng)
        assert collapse_expansion(x_hat) == list(range(1, 2001))

    def test_round_half_up(self):
        np.testing.assert_array_equal(round_half_up([0.5, 1.5, 2.5, 2.49]), [1, 2, 3, 2])

    def test_deterministic_given_seed(self):
        dm = DurationModel(4.0, 1.0)
        a = sample_durations([1, 2, 3], dm, np.random.default_rng(7))
        b = sample_durations([1, 2, 3], dm, np.random.default_rng(7))
        assert a == b

    def test_empty(self, rng):
        with pytest.raises(ContractError):
            sample_durations([], DurationModel(4.0, 1.0), rng)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(2, 9), min_size=1, max_size=20), st.floats(0.3, 8.0),
           st.floats(0.0, 3.0), st.integers(0, 2**31 - 1))
    def test_length_bound(self, phones, mean, std, seed):
        x_hat = sample_durations(phones, DurationModel(mean, std), np.random.default_rng(seed))
        assert len(x_hat) >= len(phones)
        runs = [len(list(g)) for _, g in itertools.groupby(x_hat)]
        # equality holds exactly when every duration is one
        if len(x_hat) == len(phones):
            assert x_hat == phones
        assert set(x_hat) <= set(phones)
        assert sum(runs) == len(x_hat)


class TestBuildExample:
    def test_duplicates_give_unique_inputs(self, lex, vocab, rng):
        dm = DurationModel(4.0, 1.0)
        a = build_augmenting_example("ab ba c", lex, dm, rng, vocab)
        b = build_augmenting_example("ab ba c", lex, dm, rng, vocab)
        assert a.x_hat != b.x_hat
        assert a.y == b.y == vocab.encode("ab ba c")
        assert a.y[0] == SOS and a.y[-1] == EOS

    def test_single_word_has_no_boundary(self, lex, vocab, rng):
        ex = build_augmenting_example("ab", lex, DurationModel(4.0, 1.0), rng, vocab)
        assert WB not in ex.x_hat

    def test_round_trip(self, lex, vocab, rng):
        ex = build_augmenting_example("ab c ba", lex, DurationModel(4.0, 1.0), rng, vocab)
        assert collapse_expansion(ex.x_hat) == ex.phonemes == phonemize_sentence("ab c ba", lex)
        no_wb = [i for i in collapse_expansion(ex.x_hat) if i != WB]
        assert no_wb == [i for i in phonemize_sentence("ab c ba", lex) if i != WB]

    def test_ids_in_inventories(self, lex, vocab, rng):
        ex = build_augmenting_example("ab dd c", lex, DurationModel(3.0, 1.0), rng, vocab)
        assert all(0 < i < len(lex.inventory) for i in ex.x_hat)
        assert all(0 <= i < len(vocab) for i in ex.y)


class TestMergeVocabularies:
    def test_identity(self):
        v = Vocab("abc")
        assert merge_vocabularies([v, v]).symbols == v.symbols

    def test_union(self):
        assert merge_vocabularies([Vocab("ab"), Vocab("bc")]).symbols == \
            ["<pad>", "<sos>", "<eos>", "<unk>", "a", "b", "c"]

    def test_order_independent(self, rng):
        vocabs = [Vocab(s) for s in ("xyz", "ab", "é a", "q")]
        ref = merge_vocabularies(vocabs).symbols
        for _ in range(5):
            assert merge_vocabularies([vocabs[i] for i in rng.permutation(4)]).symbols == ref

    def test_empty_input(self):
        with pytest.raises(ValueError):
            merge_vocabularies([])


class TestCorpusFiles:
    def test_prepare_records(self, lex):
        recs = prepare_augmenting(["ab ba", "zz top", "c ab"], lex, set("abc "))
        assert [r["id"] for r in recs] == ["aug000000", "aug000001"]
        assert [r["text"] for r in recs] == ["ab ba", "c ab"]

    def test_write_read_roundtrip(self, lex, tmp_path):
        recs = prepare_augmenting(["ab ba", "c ab"], lex, set("abc "))
        path = tmp_path / "aug.jsonl"
        write_augmenting_corpus(path, recs, meta={"seed": 3})
        back, meta = read_augmenting_corpus(path)
        assert back == recs and meta == {"seed": 3}

    def test_same_seed_identical_bytes(self, lex, tmp_path):
        dm = DurationModel(4.0, 1.0)
        paths = []
        for k in range(2):
            recs = prepare_augmenting(["ab ba", "c ab ab"], lex, set("abc "), dm=dm, seed=5, expand=True)
            paths.append(tmp_path / f"aug{k}.jsonl")
            write_augmenting_corpus(paths[-1], recs)
        assert paths[0].read_bytes() == paths[1].read_bytes()

    def test_expand_needs_model(self, lex):
        with pytest.raises(ContractError):
            prepare_augmenting(["ab ba"], lex, set("ab "), expand=True)

    def test_malformed_line(self, tmp_path):
        path = tmp_path / "aug.jsonl"
        path.write_text('{"id": "a", "phoneme_ids": [], "text": "x"}\n', encoding="utf-8")
        with pytest.raises(FormatError):
            read_augmenting_corpus(path)

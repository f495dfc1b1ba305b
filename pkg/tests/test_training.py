"""Task scheduling, optimizer rules, the training loop and checkpoints."""

import math

import numpy as np
import pytest

from mmda_asr.augmentation import DurationModel
from mmda_asr.data import Utterance
from mmda_asr.models import Seq2Seq
from mmda_asr.errors import CheckpointError, ConfigError, ContractError, TrainingError
from mmda_asr.training import (
    AUGMENTING, SPEECH, Adam, Batch, IndexStream, TrainConfig, Trainer, attention_duration_model,
    clip_grad_norm,
    draw_task, evaluate_dev, load_checkpoint, mix_corpora, save_checkpoint, train_step,
)
from mmda_asr.vocab import Vocab

from conftest import tiny_model

VOCAB = Vocab("ab ")


def mem_utts(rng, n, lang="", D=3, texts=("ab", "ba", "a b", "bb")):
    return [Utterance(f"{lang}u{k}", "", texts[k % len(texts)], lang,
                      _cache=rng.normal(size=(int(rng.integers(4, 9)), D)))
            for k in range(n)]


def aug_records(n, texts=("ab a", "b ab", "ba")):
    return [{"id": f"aug{k}", "phoneme_ids": [2 + k % 3, 1, 3 + (k + 1) % 2], "text": texts[k % len(texts)]}
            for k in range(n)]


def make_trainer(mode="mmda", seed=0, rng_seed=0, dtype=np.float64, **cfg_kwargs):
    rng = np.random.default_rng(rng_seed)
    model = tiny_model(mode, seed=seed, vocab_size=len(VOCAB))
    if dtype != np.float64:
        model = Seq2Seq(model.out_vocab_size, model.aug_vocab_size, model.dims, mode=mode,
                        seed=seed, dtype=dtype)
    model.vocab = VOCAB
    defaults = dict(mode=mode, pretrain_batches=4, batch_size=2, speech_batches=6,
                    learning_rate=1e-2, seed=seed)
    defaults.update(cfg_kwargs)
    cfg = TrainConfig(**defaults)
    aug = aug_records(7) if mode != "none" else None
    return Trainer(model, cfg, mem_utts(rng, 6), VOCAB, aug=aug, dm=DurationModel(2.0, 0.5))


def snapshot(model, group):
    return {n: p.data.copy() for n, p in model.partition[group].items()}


def same(a, b):
    return all(np.array_equal(a[n], b[n]) for n in a)


class TestDrawTask:
    @pytest.mark.parametrize("rho", [0.1, 0.2, 0.5])
    def test_fraction_within_three_sigma(self, rho):
        rng = np.random.default_rng(42)
        n = 10_000
        k = sum(draw_task(rng, rho) == AUGMENTING for _ in range(n))
        assert abs(k - rho * n) <= 3 * math.sqrt(n * rho * (1 - rho))

    def test_deterministic(self):
        r1, r2 = np.random.default_rng(3), np.random.default_rng(3)
        assert [draw_task(r1, 0.3) for _ in range(100)] == [draw_task(r2, 0.3) for _ in range(100)]

    @pytest.mark.parametrize("rho", [0.0, 1.0, -0.1, 1.5])
    def test_rho_bounds(self, rho):
        with pytest.raises(ConfigError, match=r"\(0, 1\)"):
            draw_task(np.random.default_rng(0), rho)
        with pytest.raises(ConfigError):
            TrainConfig(rho=rho)


class TestTrainConfig:
    def test_from_strings(self):
        cfg = TrainConfig.from_mapping({"rho": "0.2", "batch-size": "4", "speech_only": "true",
                                        "languages": '["it", "en"]'})
        assert (cfg.rho, cfg.batch_size, cfg.speech_only, cfg.languages) == (0.2, 4, True, ["it", "en"])

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown"):
            TrainConfig.from_mapping({"nope": "1"})

    @pytest.mark.parametrize("kwargs", [{"mode": "xx"}, {"batch_size": 0}, {"learning_rate": 0.0},
                                        {"pretrain_batches": -1}, {"patience": 0}])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            TrainConfig(**kwargs)


class TestAdam:
    def test_first_step_is_lr_sign(self):
        from mmda_asr.autodiff import Tensor
        p = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
        opt = Adam([("w", p)], lr=0.1)
        p.grad[...] = [0.5, -4.0, 0.0]
        opt.update(["w"])
        # bias-corrected first step moves each coordinate by ~lr * sign(g)
        np.testing.assert_allclose(p.data, [0.9, -1.9, 3.0], atol=1e-7)

    def test_zero_gradient_skipped_entirely(self):
        from mmda_asr.autodiff import Tensor
        p = Tensor(np.ones(3), requires_grad=True)
        opt = Adam([("w", p)], lr=0.1)
        opt.update(["w"])
        assert opt.t["w"] == 0 and not opt.m["w"].any() and np.array_equal(p.data, np.ones(3))

    def test_clip_grad_norm(self):
        from mmda_asr.autodiff import Tensor
        a, b = Tensor(np.zeros(2), requires_grad=True), Tensor(np.zeros(1), requires_grad=True)
        a.grad[...] = [3.0, 0.0]
        b.grad[...] = [4.0]
        assert clip_grad_norm([a, b], 1.0) == 5.0
        np.testing.assert_allclose(np.concatenate([a.grad, b.grad]), [0.6, 0.0, 0.8])
        assert clip_grad_norm([a, b], 10.0) == pytest.approx(1.0)


class TestIndexStream:
    def test_epoch_covers_corpus(self):
        s = IndexStream(7, 3, seed=0)
        seen = [s.next()[0] for _ in range(3)]
        assert [len(b) for b in seen] == [3, 3, 1]
        assert sorted(sum(seen, [])) == list(range(7))
        assert s.next()[1] == (1, 0)

    def test_state_roundtrip(self):
        s = IndexStream(10, 4, seed=5)
        s.next()
        t = IndexStream.from_state(s.state())
        assert [s.next() for _ in range(6)] == [t.next() for _ in range(6)]


class TestPhases:
    def test_zero_pretraining_leaves_params_identical(self):
        tr = make_trainer(pretrain_batches=0)
        before = {n: p.data.copy() for n, p in tr.model.named_parameters()}
        tr.pretrain()
        assert tr.state.phase == "main" and tr.state.step == 0
        assert same(before, {n: p.data for n, p in tr.model.named_parameters()})

    def test_mmda_pretraining_freezes_acoustic_encoder(self):
        tr = make_trainer("mmda", pretrain_batches=5)
        enc = snapshot(tr.model, "enc")
        da = snapshot(tr.model, "da")
        tr.pretrain()
        assert tr.state.aug_steps == 5 and tr.state.speech_steps == 0
        assert same(enc, snapshot(tr.model, "enc"))
        assert not same(da, snapshot(tr.model, "da"))

    def test_psda_pretraining_updates_encoder(self):
        tr = make_trainer("psda", pretrain_batches=3)
        enc = snapshot(tr.model, "enc")
        tr.pretrain()
        assert not same(enc, snapshot(tr.model, "enc"))

    def test_speech_step_leaves_augmenting_encoder(self):
        tr = make_trainer("mmda", pretrain_batches=0)
        tr.pretrain()
        da = snapshot(tr.model, "da")
        for _ in range(3):
            tr._step(SPEECH)
        assert same(da, snapshot(tr.model, "da"))

    def test_main_phase_counts(self):
        tr = make_trainer("mmda", rho=0.5, speech_batches=6)
        tr.run()
        st = tr.state
        assert st.phase == "done" and st.speech_steps == 6
        # aug_steps counts the 4 pretraining batches too
        assert st.step == st.speech_steps + st.aug_steps and st.aug_steps >= 4
        assert [r["phase"] for r in tr.history[:4]] == ["pretrain"] * 4

    def test_speech_only_has_no_augmenting_batches(self):
        tr = make_trainer("mmda", speech_only=True, pretrain_batches=2)
        tr.run()
        tasks = [r["task"] for r in tr.history if r["phase"] == "main"]
        assert tasks and set(tasks) == {SPEECH}

    def test_baseline_needs_no_augmenting_data(self):
        tr = make_trainer("none")
        tr.run()
        assert tr.state.aug_steps == 0 and tr.state.speech_steps == 6

    def test_augmenting_mode_without_data(self):
        model = tiny_model(vocab_size=len(VOCAB))
        with pytest.raises(ConfigError):
            Trainer(model, TrainConfig(mode="mmda"), mem_utts(np.random.default_rng(0), 2), VOCAB)

    def test_mode_mismatch(self):
        with pytest.raises(ConfigError):
            Trainer(tiny_model("psda", vocab_size=len(VOCAB)), TrainConfig(mode="mmda"),
                    mem_utts(np.random.default_rng(0), 2), VOCAB, aug=aug_records(2))


class TestDurationResolution:
    def test_mmda_scaled_by_encoder_reduction(self):
        model = tiny_model("mmda")
        assert model.time_reduction == 4
        assert attention_duration_model(DurationModel(4.0, 1.0), model) == DurationModel(1.0, 0.25)

    def test_psda_unchanged(self):
        dm = DurationModel(4.0, 1.0)
        assert attention_duration_model(dm, tiny_model("psda")) is dm

    def test_none_passthrough(self):
        assert attention_duration_model(None, tiny_model("mmda")) is None

    def test_trainer_keeps_frame_model(self):
        tr = make_trainer("mmda")
        assert tr.dm == DurationModel(2.0, 0.5) and tr.batch_dm == DurationModel(0.5, 0.125)
        # mean 0.5 frames: every phoneme is clamped to a single step
        batch = tr.next_batch(AUGMENTING)
        assert all(len(x) == 3 for x in batch.inputs)


class TestTrainStep:
    def batch(self, rng, n=2):
        utts = mem_utts(rng, n)
        return Batch(SPEECH, "b0", [u.id for u in utts], [u.features() for u in utts],
                     [VOCAB.encode(u.text) for u in utts])

    def test_overfits_single_batch(self, rng):
        tr = make_trainer("none")
        b = self.batch(rng)
        losses = [train_step(tr.model, b, SPEECH, tr.cfg, tr.state)[1] for _ in range(60)]
        assert losses[-1] < 0.5 * losses[0]

    def test_grad_norm_reported_before_clipping(self, rng):
        tr = make_trainer("none", grad_clip=0.01)
        _, _, norm = train_step(tr.model, self.batch(rng), SPEECH, tr.cfg, tr.state)
        assert norm > 0.01
        total = math.sqrt(sum(float(np.sum(p.grad ** 2)) for _, p in tr.model.named_parameters()))
        assert total == pytest.approx(0.01, rel=1e-9)

    def test_task_mismatch(self, rng):
        tr = make_trainer("none")
        with pytest.raises(ContractError):
            train_step(tr.model, self.batch(rng), AUGMENTING, tr.cfg, tr.state)

    def test_non_finite_loss_names_batch(self, rng):
        tr = make_trainer("none")
        b = self.batch(rng)
        b.inputs[0] = np.full_like(b.inputs[0], np.nan)
        with pytest.raises(TrainingError, match="b0"):
            with np.errstate(invalid="ignore"):
                train_step(tr.model, b, SPEECH, tr.cfg, tr.state)


class _Stub:
    def __init__(self, out):
        self.out = out

    def transcribe(self, feats, cfg=None):
        return [self.out(k) for k in range(len(feats))]


class TestEvaluateDev:
    def test_perfect(self, rng):
        dev = mem_utts(rng, 4)
        stub = _Stub(None)
        stub.transcribe = lambda feats, cfg=None: [u.text for u in dev[:len(feats)]]
        assert evaluate_dev(stub, dev) == 0.0

    def test_empty_hypotheses(self, rng):
        assert evaluate_dev(_Stub(lambda k: ""), mem_utts(rng, 4)) == 1.0

    def test_empty_dev(self):
        with pytest.raises(ContractError):
            evaluate_dev(_Stub(lambda k: ""), [])

    def test_early_stopping_restores_best(self, rng):
        tr = make_trainer("none", eval_every=1, patience=2, speech_batches=50)
        tr.dev = mem_utts(rng, 3)
        tr.run()
        cers = [r["dev_cer"] for r in tr.history if r.get("event") == "dev"]
        assert tr.state.best_dev == min(cers)
        assert tr.state.speech_steps < 50 or tr.state.bad_evals < 2
        assert evaluate_dev(tr.model, tr.dev) == tr.state.best_dev


class TestMixCorpora:
    def test_proportional_sampling(self):
        big = [Utterance(f"a{k}", "", "ab", "a", _cache=np.zeros((2, 3))) for k in range(900)]
        small = [Utterance(f"b{k}", "", "cd", "b", _cache=np.zeros((2, 3))) for k in range(100)]
        utts, vocab = mix_corpora([("a", big), ("b", small)])
        assert len(utts) == 1000 and set("abcd") <= set(vocab.symbols)
        stream = IndexStream(len(utts), 10, seed=1)
        picks = sum((stream.next()[0] for _ in range(100)), [])
        # 100 batches of 10 are exactly one pass over the concatenation
        frac = np.mean([utts[i].lang == "b" for i in picks])
        assert frac == pytest.approx(0.1, abs=1e-12)

    def test_feature_dim_mismatch(self, rng):
        with pytest.raises(ConfigError, match="feature dimensions"):
            mix_corpora([("a", mem_utts(rng, 2, "a", D=3)), ("b", mem_utts(rng, 2, "b", D=4))])

    def test_empty(self):
        with pytest.raises(ConfigError):
            mix_corpora([])


class TestCheckpoint:
    # tensors are stored at 32-bit precision, so resumable runs are float32
    def test_save_load_save_identical(self, tmp_path):
        tr = make_trainer("mmda", dtype=np.float32)
        tr.run(max_steps=7)
        save_checkpoint(tr.model, tr.state, tmp_path / "a.ckpt")
        model, state, _ = load_checkpoint(tmp_path / "a.ckpt")
        save_checkpoint(model, state, tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    @pytest.mark.parametrize("cut", [3, 7, 12])
    def test_resume_matches_uninterrupted(self, tmp_path, cut):
        straight = make_trainer("mmda", eval_every=2, dtype=np.float32)
        straight.dev = mem_utts(np.random.default_rng(9), 2)
        straight.run()

        first = make_trainer("mmda", eval_every=2, dtype=np.float32)
        first.dev = straight.dev
        first.run(max_steps=cut)
        save_checkpoint(first.model, first.state, tmp_path / "c.ckpt")
        model, state, _ = load_checkpoint(tmp_path / "c.ckpt")
        rest = Trainer(model, first.cfg, first.speech, VOCAB, aug=first.aug, dm=first.dm,
                       dev=first.dev, state=state)
        rest.run()
        assert first.loss_trace() + rest.loss_trace() == straight.loss_trace()
        for (n, p), (_, q) in zip(straight.model.named_parameters(), rest.model.named_parameters()):
            assert np.array_equal(p.data, q.data), n

    def test_same_seed_same_trace(self):
        a, b = make_trainer("psda", seed=3), make_trainer("psda", seed=3)
        a.run()
        b.run()
        assert a.loss_trace() == b.loss_trace()
        assert [r.get("task") for r in a.history] == [r.get("task") for r in b.history]

    def test_truncated_file(self, tmp_path):
        tr = make_trainer("mmda")
        save_checkpoint(tr.model, tr.state, tmp_path / "t.ckpt")
        blob = (tmp_path / "t.ckpt").read_bytes()
        (tmp_path / "t.ckpt").write_bytes(blob[:len(blob) // 2])
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "t.ckpt")

    def test_kind_and_vocab_checked(self, tmp_path):
        tr = make_trainer("psda")
        tr.model.vocab = VOCAB
        save_checkpoint(tr.model, None, tmp_path / "k.ckpt")
        with pytest.raises(CheckpointError, match="kind"):
            load_checkpoint(tmp_path / "k.ckpt", kind="MMDA")
        with pytest.raises(CheckpointError, match="out_vocab_hash"):
            load_checkpoint(tmp_path / "k.ckpt", vocab=Vocab("xyz"))
        model, state, _ = load_checkpoint(tmp_path / "k.ckpt", vocab=VOCAB, kind="PSDA")
        assert state is None and model.vocab == VOCAB

    def test_corpus_size_change_rejected(self, tmp_path):
        tr = make_trainer("mmda")
        tr.run(max_steps=3)
        save_checkpoint(tr.model, tr.state, tmp_path / "s.ckpt")
        model, state, _ = load_checkpoint(tmp_path / "s.ckpt")
        with pytest.raises(CheckpointError, match="speech_stream"):
            Trainer(model, tr.cfg, tr.speech[:3], VOCAB, aug=tr.aug, dm=tr.dm, state=state)

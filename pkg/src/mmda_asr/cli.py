"""Command-line entry point: ``mmda-asr <subcommand> ...``.

Exit codes: 0 success, 2 usage or configuration error, 1 runtime error.
"""

import argparse
import json
import logging
import os
import sys
import time

import numpy as np

from . import data
from .augmentation import (
    DEFAULT_MAX_LEN, DEFAULT_MIN_LEN, DurationModel, Lexicon, PhonemeInventory, estimate_duration_mean,
    prepare_augmenting, read_augmenting_corpus, write_augmenting_corpus,
)
from .decoding import DecodeConfig, beam_search_fusion, corpus_cer_wer
from .errors import ConfigError
from .models import LmDims, ModelDims, RnnLm, Seq2Seq
from .training import (
    TrainConfig, Trainer, evaluate_dev, load_checkpoint, mix_corpora, save_checkpoint, train_lm,
)
from .vocab import Vocab

log = logging.getLogger("mmda_asr")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def read_config_file(path):
    """JSON object, or flat ``key = value`` lines (``#`` starts a comment)."""
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    stripped = text.lstrip()
    if stripped.startswith("{"):
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON config ({e})") from None
        return obj
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _parse_corpus_arg(arg):
    """``lang=path`` or just ``path``."""
    if "=" in arg and not os.path.exists(arg):
        lang, path = arg.split("=", 1)
        return lang, path
    return None, arg


def _load_corpora(specs):
    corpora = []
    for spec in specs:
        if isinstance(spec, dict):
            lang, path = spec.get("lang"), spec["manifest"]
        else:
            lang, path = _parse_corpus_arg(spec)
        utts = data.read_manifest(path)
        corpora.append((lang or (utts[0].lang if utts else "") or path, utts))
    return corpora


def _json_log(path):
    if path is None:
        return None, None
    fh = open(path, "w", encoding="utf-8")

    def write(rec):
        fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return write, fh


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_toy(args):
    spec = data.ToyTaskSpec(seed=args.seed, noise_std=args.noise_std, feat_dim=args.feat_dim,
                            min_words=args.min_words, max_words=args.max_words)
    paths = data.gen_toy_corpus(spec, args.out, args.n_train, args.n_dev, args.n_aug,
                                force=args.force)
    print(json.dumps(paths, sort_keys=True))
    return 0


def cmd_prepare(args):
    train = data.read_manifest(args.train)
    vocab = Vocab.from_texts(u.text for u in train)
    lex = Lexicon.load(args.lexicon, graphemes=sorted(vocab.charset))
    dm = estimate_duration_mean([(u.frames, len(u.text)) for u in train])
    if args.time_reduction < 1:
        raise ConfigError("--time-reduction must be >= 1")
    dm_expand = DurationModel(dm.mean / args.time_reduction, dm.std / args.time_reduction)
    sentences = data.read_lines(args.text)
    recs = prepare_augmenting(sentences, lex, vocab.charset, args.min_len, args.max_len,
                              dm=dm_expand, seed=args.seed, expand=args.expand)
    meta = {"inventory": lex.inventory.symbols, "duration_mean": dm.mean,
            "duration_std": dm.std, "expanded": bool(args.expand), "time_reduction": args.time_reduction,
            "seed": args.seed,
            "kept": len(recs), "input": len(sentences)}
    write_augmenting_corpus(args.out, recs, meta)
    print(f"kept {len(recs)} of {len(sentences)} sentences; "
          f"duration mean {dm.mean:.4f} std {dm.std:.4f}")
    return 0


def _train_config(args):
    values = read_config_file(args.config) if args.config else {}
    for key in ("rho", "pretrain_batches", "batch_size", "learning_rate", "grad_clip",
                "max_epochs", "seed", "mode", "speech_batches", "eval_every", "patience"):
        v = getattr(args, key)
        if v is not None:
            values[key] = v
    if args.speech_only:
        values["speech_only"] = True
    extra_keys = ("dims", "train", "dev", "eval", "aug", "system")
    extra = {k: values.pop(k) for k in extra_keys if k in values}
    if args.train:
        values["languages"] = list(args.train)
    cfg = TrainConfig.from_mapping(values)
    return cfg, extra


def cmd_train(args):
    cfg, extra = _train_config(args)
    specs = cfg.languages or ([extra["train"]] if "train" in extra else [])
    if not specs:
        raise ConfigError("no training manifest given (--train or 'languages' in the config)")
    train, vocab = mix_corpora(_load_corpora(specs))
    dev_path = args.dev or extra.get("dev")
    dev = data.read_manifest(dev_path) if dev_path else []
    dims = ModelDims()
    dims_src = args.dims or extra.get("dims")
    if dims_src:
        dims = ModelDims.from_dict(json.loads(dims_src) if isinstance(dims_src, str) else dims_src)
    aug_path = args.aug or extra.get("aug")
    aug, inventory, dm = [], None, None
    if cfg.mode != "none":
        if not aug_path:
            raise ConfigError(f"mode {cfg.mode!r} needs --aug (output of 'prepare')")
        aug, meta = read_augmenting_corpus(aug_path)
        inventory = PhonemeInventory.from_symbols(meta["inventory"])
        if not meta.get("expanded"):
            dm = estimate_duration_mean([(u.frames, len(u.text)) for u in train])
    if args.resume:
        model, state, _ = load_checkpoint(args.resume, vocab=vocab,
                                          inventory=inventory)
    else:
        aug_size = len(inventory) if inventory is not None else 2
        model = Seq2Seq(len(vocab), aug_size, dims, mode=cfg.mode, seed=cfg.seed)
        model.vocab, model.inventory = vocab, inventory
        state = None
    write, fh = _json_log(args.log)
    t0 = time.time()
    try:
        trainer = Trainer(model, cfg, train, vocab, aug=aug, dm=dm, dev=dev, log=write,
                          state=state)
        trainer.run(max_steps=args.stop_after)
        result = None
        if trainer.state.phase == "done":
            dev_cer = trainer.state.best_dev if dev else None
            if dev and dev_cer == float("inf"):
                dev_cer = evaluate_dev(model, dev)
            eval_path = args.eval or extra.get("eval")
            eval_cer = evaluate_dev(model, data.read_manifest(eval_path)) if eval_path else None
            result = {"event": "result", "system": args.system or extra.get("system") or cfg.mode,
                      "hours": data.hours_of(train), "dev_cer": dev_cer, "eval_cer": eval_cer,
                      "steps": trainer.state.step, "seconds": round(time.time() - t0, 3)}
            if write:
                write(result)
    finally:
        if fh:
            fh.close()
    if args.out:
        save_checkpoint(model, trainer.state, args.out, extra={"config": cfg.to_dict()})
    if result:
        print(json.dumps(result, sort_keys=True))
    else:
        print(f"stopped at step {trainer.state.step}")
    return 0


def cmd_lm_train(args):
    texts = []
    for p in args.text:
        if p.endswith(".jsonl"):
            try:
                texts.extend(u.text for u in data.read_manifest(p, check_files=False))
            except Exception:
                texts.extend(r["text"] for r in read_augmenting_corpus(p)[0])
        else:
            texts.extend(data.read_lines(p))
    vocab = Vocab.from_texts(u.text for _, us in _load_corpora(args.vocab_from) for u in us)
    lm = RnnLm(len(vocab), LmDims(args.emb, args.hidden), seed=args.seed)
    lm.vocab = vocab
    write, fh = _json_log(args.log)
    try:
        losses = train_lm(lm, texts, vocab, args.steps, args.batch_size, args.learning_rate,
                          seed=args.seed, log=write)
    finally:
        if fh:
            fh.close()
    save_checkpoint(lm, None, args.out)
    if losses:
        print(f"final loss {losses[-1]:.4f}")
    return 0


def cmd_decode(args):
    model, _, _ = load_checkpoint(args.model)
    lm = None
    if args.lm:
        lm, _, _ = load_checkpoint(args.lm, vocab=model.vocab, kind="RNNLM")
    cfg = DecodeConfig(beam_size=args.beam, lam=args.lam, max_len=args.max_len)
    utts = data.read_manifest(args.manifest)
    out = open(args.out, "w", encoding="utf-8") if args.out else sys.stdout
    try:
        for u in utts:
            best, _ = beam_search_fusion(u.features(), model, lm, cfg)
            rec = {"id": u.id, "hyp": model.vocab.decode(best.output()),
                   "asr_logp": best.asr_logp, "lm_logp": best.lm_logp, "score": best.score}
            if not best.finished:
                rec["unfinished"] = True
            out.write(json.dumps(rec, ensure_ascii=False) + "\n")
    finally:
        if out is not sys.stdout:
            out.close()
    return 0


def _read_hyps(path):
    hyps = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                r = json.loads(line)
                hyps[r["id"]] = r["hyp"]
    return hyps


def cmd_score(args):
    if args.manifest:
        if not args.hyps:
            raise ConfigError("--manifest needs --hyps (decode output)")
        refs = data.read_manifest(args.manifest, check_files=False)
        hyps = _read_hyps(args.hyps)
        missing = [u.id for u in refs if u.id not in hyps]
        if missing:
            raise ConfigError(f"no hypothesis for {len(missing)} utterance(s), e.g. {missing[0]}")
        pairs = [(u.text, hyps[u.id]) for u in refs]
    else:
        if not (args.ref and args.hyp):
            raise ConfigError("score needs --ref and --hyp text files, or --manifest and --hyps")
        with open(args.ref, encoding="utf-8") as fh:
            refs = [line.rstrip("\n") for line in fh]
        with open(args.hyp, encoding="utf-8") as fh:
            hyps = [line.rstrip("\n") for line in fh]
        if len(refs) != len(hyps):
            raise ConfigError(f"reference has {len(refs)} lines, hypothesis {len(hyps)}")
        pairs = list(zip(refs, hyps))
    cer, wer = corpus_cer_wer(pairs)
    print(f"CER {cer:.4f} WER {wer:.4f}")
    return 0


def cmd_export_curve(args):
    results = [data.read_result(p) for p in args.inputs]
    rows = data.export_curve(results, args.out)
    print(f"wrote {len(rows)} rows to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="mmda-asr", description="Seq2seq ASR with text-based data augmentation.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("gen-toy", help="write a synthetic toy corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--n-train", type=int, default=200)
    g.add_argument("--n-dev", type=int, default=100)
    g.add_argument("--n-aug", type=int, default=5000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--noise-std", type=float, default=0.1)
    g.add_argument("--feat-dim", type=int, default=40)
    g.add_argument("--min-words", type=int, default=3)
    g.add_argument("--max-words", type=int, default=12)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen_toy)

    pr = sub.add_parser("prepare", help="build an augmenting corpus from raw text")
    pr.add_argument("--text", required=True, help="one sentence per line")
    pr.add_argument("--lexicon", required=True, help="word<TAB>phones file")
    pr.add_argument("--train", required=True, help="speech training manifest")
    pr.add_argument("--out", required=True)
    pr.add_argument("--min-len", type=int, default=DEFAULT_MIN_LEN)
    pr.add_argument("--max-len", type=int, default=DEFAULT_MAX_LEN)
    pr.add_argument("--seed", type=int, default=0)
    pr.add_argument("--expand", action="store_true", help="apply durations now")
    pr.add_argument("--time-reduction", type=int, default=1,
                    help="with --expand: divide durations by this factor (the acoustic "
                         "encoder's subsampling, 4 by default, for MMDA training)")
    pr.set_defaults(func=cmd_prepare)

    lm = sub.add_parser("lm-train", help="train the character RNNLM")
    lm.add_argument("--text", nargs="+", required=True)
    lm.add_argument("--vocab-from", nargs="+", required=True,
                    help="speech training manifest(s) defining the output vocabulary")
    lm.add_argument("--out", required=True)
    lm.add_argument("--steps", type=int, default=1000)
    lm.add_argument("--batch-size", type=int, default=16)
    lm.add_argument("--learning-rate", type=float, default=1e-3)
    lm.add_argument("--emb", type=int, default=64)
    lm.add_argument("--hidden", type=int, default=128)
    lm.add_argument("--seed", type=int, default=0)
    lm.add_argument("--log")
    lm.set_defaults(func=cmd_lm_train)

    t = sub.add_parser("train", help="pretrain + main training loop")
    t.add_argument("--config", help="JSON or key=value file; flags override it")
    t.add_argument("--train", action="append", help="[lang=]manifest (repeatable)")
    t.add_argument("--dev")
    t.add_argument("--eval")
    t.add_argument("--aug", help="augmenting corpus from 'prepare'")
    t.add_argument("--dims", help="JSON object of model dims")
    t.add_argument("--rho", type=float)
    t.add_argument("--pretrain-batches", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--learning-rate", type=float)
    t.add_argument("--grad-clip", type=float)
    t.add_argument("--max-epochs", type=int)
    t.add_argument("--speech-batches", type=int)
    t.add_argument("--eval-every", type=int)
    t.add_argument("--patience", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--mode", choices=("none", "mmda", "psda"))
    t.add_argument("--speech-only", action="store_true")
    t.add_argument("--system", help="system label for the result record")
    t.add_argument("--log", help="JSON-lines training log")
    t.add_argument("--out", help="checkpoint path")
    t.add_argument("--resume", help="checkpoint to resume from")
    t.add_argument("--stop-after", type=int, help="stop at this global step (for resuming)")
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("decode", help="beam search with optional shallow fusion")
    d.add_argument("--model", required=True)
    d.add_argument("--manifest", required=True)
    d.add_argument("--lm")
    d.add_argument("--beam", type=int, default=5)
    d.add_argument("--lam", type=float, default=0.3)
    d.add_argument("--max-len", type=int, default=0)
    d.add_argument("--out")
    d.set_defaults(func=cmd_decode)

    s = sub.add_parser("score", help="corpus CER/WER")
    s.add_argument("--ref")
    s.add_argument("--hyp")
    s.add_argument("--manifest")
    s.add_argument("--hyps")
    s.set_defaults(func=cmd_score)

    e = sub.add_parser("export-curve", help="CSV of CER vs training hours")
    e.add_argument("inputs", nargs="+", help="training logs or result JSON files")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_export_curve)
    return p


def main(argv=None):
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 2
    except SystemExit as e:  # --help
        return int(e.code or 0)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"mmda-asr {args.command}: configuration error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - top-level runtime boundary
        print(f"mmda-asr {args.command}: error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

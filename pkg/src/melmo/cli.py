"""Command-line entry point: ``melmo <subcommand> [flags]``.

Exit codes: 0 success, 1 validation or contract error, 2 numeric abort,
64 usage error. Every subcommand writes under ``--out-dir`` and records a
``run-manifest.json`` with its configuration and output hashes.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from typing import Optional, Sequence

from . import __version__
from .autodiff import save_arrays
from .downstream import (
    ClassifierConfig,
    embedding_set,
    evaluate_protocol,
    format_table,
    train_classifier,
)
from .embeddings import build_cache, read_cache, write_cache
from .errors import MelmoError, NumericAbort
from .model import BiLMParameters, ModelConfig, read_key_values
from .segments import load_segments, segments_corpus
from .synth import SynthConfig, gen_synth
from .text import TextCorpus, Vocabulary
from .training import TrainConfig, train_stage1, train_stage2

logger = logging.getLogger("melmo")

EXIT_OK, EXIT_CONTRACT, EXIT_NUMERIC, EXIT_USAGE = 0, 1, 2, 64
MANIFEST_NAME = "run-manifest.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_run_manifest(out_dir: str, command: str, args: argparse.Namespace) -> str:
    artifacts = {}
    for root, _, files in os.walk(out_dir):
        for name in sorted(files):
            path = os.path.join(root, name)
            rel = os.path.relpath(path, out_dir)
            if rel != MANIFEST_NAME:
                artifacts[rel] = _sha256(path)
    config = {k: v for k, v in vars(args).items() if k not in ("func", "config")}
    inputs = {v: _sha256(v) for k, v in sorted(config.items())
              if k != "out_dir" and isinstance(v, str) and os.path.isfile(v)}
    record = {"command": command, "version": __version__, "seed": getattr(args, "seed", None),
              "config": config, "inputs": inputs, "artifacts": dict(sorted(artifacts.items()))}
    path = os.path.join(out_dir, MANIFEST_NAME)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(record, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")
    return path


# -- shared model plumbing -------------------------------------------------

def _model_paths(args) -> tuple[str, str]:
    base = os.path.dirname(os.path.abspath(args.checkpoint))
    model_config = args.model_config or os.path.join(base, "model.cfg")
    vocab = args.vocab or os.path.join(base, "vocab.txt")
    return model_config, vocab


def _load_model(args) -> tuple[BiLMParameters, Vocabulary]:
    cfg_path, vocab_path = _model_paths(args)
    config = ModelConfig.load(cfg_path)
    return BiLMParameters.load(args.checkpoint, config), Vocabulary.load(vocab_path)


def _train_config(args, stage: str) -> TrainConfig:
    return TrainConfig(stage=args.stage or stage, epochs=args.epochs, base_lr=args.base_lr, lr=args.lr,
                       batch_size=args.batch_size, unroll=args.unroll, clip=args.clip, seed=args.seed)


def _classifier_configs(args) -> list[ClassifierConfig]:
    hidden = tuple(int(x) for x in args.hidden.split(","))
    return [ClassifierConfig(hidden=hidden, epochs=args.clf_epochs, lr=float(lr), seed=args.seed,
                             tune_thresholds=args.tune_thresholds)
            for lr in args.clf_lr.split(",")]


# -- subcommands -----------------------------------------------------------

def cmd_gen_synth(args) -> int:
    cfg = SynthConfig(vocab_size=args.vocab_size, sentences=args.sentences, min_len=args.min_len,
                      max_len=args.max_len, acoustic_dim=args.acoustic_dim, alpha=args.alpha, seed=args.seed,
                      text_sentences=args.text_sentences, noise=args.noise)
    gen_synth(cfg, args.out_dir)
    logger.info("wrote synthetic corpus to %s", args.out_dir)
    return EXIT_OK


def cmd_pretrain_text(args) -> int:
    vocab = Vocabulary.load(args.vocab) if args.vocab else \
        Vocabulary.build(_read_lines(args.train), min_count=args.min_count)
    train = TextCorpus.read(args.train, vocab, "train")
    valid = TextCorpus.read(args.valid, vocab, "valid")
    if args.init_checkpoint:
        cfg_path = args.model_config or os.path.join(os.path.dirname(os.path.abspath(args.init_checkpoint)),
                                                     "model.cfg")
        config = ModelConfig.load(cfg_path)
        params = BiLMParameters.load(args.init_checkpoint, config)
    else:
        values = read_key_values(args.model_config) if args.model_config else {}
        values["vocab_size"] = str(len(vocab))
        config = ModelConfig.from_mapping(values)
        params = BiLMParameters.init(config, args.seed)
    os.makedirs(args.out_dir, exist_ok=True)
    vocab.save(os.path.join(args.out_dir, "vocab.txt"))
    config.save(os.path.join(args.out_dir, "model.cfg"))
    _, log = train_stage1(params, train, valid, _train_config(args, "text-only"), args.out_dir)
    print(f"best validation perplexity {log.best_valid_ppl:.4f}")
    return EXIT_OK


def _read_lines(path: str) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return fh.read().splitlines()


def cmd_pretrain_mm(args) -> int:
    args.checkpoint = args.init_checkpoint
    params, vocab = _load_model(args)
    segments, _ = load_segments(args.manifest, params.config.max_frames)
    train = segments_corpus(segments, vocab, "train")
    valid = segments_corpus(segments, vocab, "valid")
    os.makedirs(args.out_dir, exist_ok=True)
    vocab.save(os.path.join(args.out_dir, "vocab.txt"))
    params.config.save(os.path.join(args.out_dir, "model.cfg"))
    _, log = train_stage2(params, train, valid, _train_config(args, "multimodal"), args.out_dir)
    print(f"best validation perplexity {log.best_valid_ppl:.4f}")
    return EXIT_OK


def cmd_extract(args) -> int:
    params, vocab = _load_model(args)
    segments, _ = load_segments(args.manifest, params.config.max_frames)
    cache = build_cache(params, segments, vocab, use_acoustics=not args.no_acoustics)
    os.makedirs(args.out_dir, exist_ok=True)
    write_cache(os.path.join(args.out_dir, "embeddings.bin"), cache)
    print(f"cached {len(cache)} segment embeddings")
    return EXIT_OK


def _splits(args, cache) -> tuple:
    segments, _ = load_segments(args.manifest)
    return tuple(embedding_set(cache, segments, s) for s in ("train", "valid", "test"))


def cmd_train_clf(args) -> int:
    train, valid, _ = _splits(args, read_cache(args.embeddings))
    config = _classifier_configs(args)[0]
    result = train_classifier(train, valid, config)
    os.makedirs(args.out_dir, exist_ok=True)
    for tag, clf in (("wa", result.by_wa), ("f1", result.by_f1)):
        save_arrays(os.path.join(args.out_dir, f"classifier.{tag}.ckpt"), clf.state())
    with open(os.path.join(args.out_dir, "classifier_log.jsonl"), "w", encoding="utf-8") as fh:
        for record in result.history:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    print(f"validation WA {result.valid_wa:.4f}  F1 {result.valid_f1:.4f}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    params, vocab = _load_model(args)
    segments, _ = load_segments(args.manifest, params.config.max_frames)
    cache = build_cache(params, segments, vocab, use_acoustics=not args.no_acoustics)
    sets = tuple(embedding_set(cache, segments, s) for s in ("train", "valid", "test"))
    report = evaluate_protocol(*sets, _classifier_configs(args), n_runs=args.n_runs, base_seed=args.seed,
                               name=args.name)
    os.makedirs(args.out_dir, exist_ok=True)
    report.save(os.path.join(args.out_dir, "report.json"))
    table = format_table([report])
    with open(os.path.join(args.out_dir, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write(table + "\n")
    print(table)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .toy import toy_gradcheck

    errors = toy_gradcheck(seed=args.seed, max_coords=args.max_coords)
    worst = max(errors.values())
    if args.out_dir:
        os.makedirs(args.out_dir, exist_ok=True)
        with open(os.path.join(args.out_dir, "gradcheck.json"), "w", encoding="utf-8") as fh:
            json.dump(errors, fh, indent=2, sort_keys=True)
    print(f"max relative error {worst:.3e}")
    return EXIT_OK if worst < 1e-4 else EXIT_CONTRACT


# -- parser ----------------------------------------------------------------

def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--stage", choices=("text-only", "multimodal"), default=None,
                   help="defaults to the subcommand's stage; a mismatch is a contract error")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--base-lr", type=float, default=0.03, help="text-only rate; multimodal uses a tenth")
    p.add_argument("--lr", type=float, default=None, help="override the stage's learning rate")
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--unroll", type=int, default=32)
    p.add_argument("--clip", type=float, default=5.0)


def _add_model_flags(p: argparse.ArgumentParser, required: bool) -> None:
    p.add_argument("--checkpoint", required=required)
    p.add_argument("--model-config", default=None, help="defaults to model.cfg beside the checkpoint")
    p.add_argument("--vocab", default=None, help="defaults to vocab.txt beside the checkpoint")


def _add_clf_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--hidden", default="256,128")
    p.add_argument("--clf-epochs", type=int, default=30)
    p.add_argument("--clf-lr", default="0.01,0.03", help="comma list; selected on validation")
    p.add_argument("--tune-thresholds", action="store_true")


def build_parser() -> _Parser:
    parser = _Parser(prog="melmo", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None, help="key = value file; flags win")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out-dir", required=name != "gradcheck", default=None)
        p.set_defaults(func=func)
        return p

    p = command("gen-synth", cmd_gen_synth, "write a synthetic multimodal corpus")
    defaults = SynthConfig()
    p.add_argument("--alpha", type=float, default=defaults.alpha)
    p.add_argument("--vocab-size", type=int, default=defaults.vocab_size)
    p.add_argument("--sentences", type=int, default=defaults.sentences)
    p.add_argument("--text-sentences", type=int, default=defaults.text_sentences)
    p.add_argument("--min-len", type=int, default=defaults.min_len)
    p.add_argument("--max-len", type=int, default=defaults.max_len)
    p.add_argument("--acoustic-dim", type=int, default=defaults.acoustic_dim)
    p.add_argument("--noise", type=float, default=defaults.noise)

    p = command("pretrain-text", cmd_pretrain_text, "stage 1: text-only pretraining")
    p.add_argument("--train", required=True)
    p.add_argument("--valid", required=True)
    p.add_argument("--vocab", default=None, help="vocabulary file; built from --train when absent")
    p.add_argument("--min-count", type=int, default=1)
    p.add_argument("--model-config", default=None)
    p.add_argument("--init-checkpoint", default=None)
    _add_train_flags(p)

    p = command("pretrain-mm", cmd_pretrain_mm, "stage 2: multimodal pretraining")
    p.add_argument("--manifest", required=True)
    p.add_argument("--init-checkpoint", required=True)
    p.add_argument("--model-config", default=None)
    p.add_argument("--vocab", default=None)
    _add_train_flags(p)

    p = command("extract", cmd_extract, "cache per-layer sentence embeddings")
    p.add_argument("--manifest", required=True)
    p.add_argument("--no-acoustics", action="store_true", help="zero every acoustic matrix")
    _add_model_flags(p, required=True)

    p = command("train-clf", cmd_train_clf, "train one emotion classifier on cached embeddings")
    p.add_argument("--manifest", required=True)
    p.add_argument("--embeddings", required=True)
    _add_clf_flags(p)

    p = command("evaluate", cmd_evaluate, "multi-seed evaluation protocol")
    p.add_argument("--manifest", required=True)
    p.add_argument("--n-runs", type=int, default=10)
    p.add_argument("--name", default="M-ELMo")
    p.add_argument("--no-acoustics", action="store_true")
    _add_model_flags(p, required=True)
    _add_clf_flags(p)

    p = command("gradcheck", cmd_gradcheck, "finite-difference check of the toy model")
    p.add_argument("--max-coords", type=int, default=None, help="sample this many coordinates per tensor")
    return parser


def _apply_config_file(parser: _Parser, argv: Sequence[str]) -> argparse.Namespace:
    """Parse once, load ``--config`` as defaults, then parse again so flags win."""
    args = parser.parse_args(argv)
    if not args.config:
        return args
    sub = parser._subparsers._group_actions[0].choices[args.command]  # type: ignore[union-attr]
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, raw in read_key_values(args.config).items():
        dest = key.replace("-", "_")
        if dest not in actions or dest in ("config", "help"):
            parser.error(f"unknown config key {key!r} for {args.command}")
        if isinstance(actions[dest], argparse._StoreTrueAction):
            defaults[dest] = raw.lower() in ("1", "true", "yes", "on")
        else:
            defaults[dest] = raw
        actions[dest].required = False
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _apply_config_file(parser, argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help and --version
        return int(exc.code or 0)
    except MelmoError as exc:
        print(f"melmo: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        code = args.func(args)
    except NumericAbort as exc:
        print(f"melmo: numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (MelmoError, ValueError, OSError) as exc:
        print(f"melmo: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    if args.out_dir:
        write_run_manifest(args.out_dir, args.command, args)
    return code


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()

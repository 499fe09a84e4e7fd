"""Command-line entry point covering the full experiment lifecycle.

Subcommands: mask, gen-features, train, translate, evaluate, probe,
congruence, gradcheck, dump-attn, avg-ckpt. Exit code 0 on success, 1 on
domain errors, 2 on usage errors. All randomness is governed by explicit
seeds; the MMT_PROBE_LOG environment variable (quiet, info, debug)
controls verbosity, with debug also enabling finite-value assertions.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import autodiff
from .corpus import Vocab, default_image_ids, load_parallel, read_image_ids, read_token_lines, write_token_lines
from .errors import ConfigError, MmtError
from .evaluation import build_report, congruence_report, dump_attention
from .decoding import translate_corpus
from .features import FeatureRegime, PAPER_REGIMES, SyntheticSpec, generate_synthetic, read_features, write_features
from .masking import MaskLexicon, NOUN_TASKS, apply_task, build_probing_corpus, read_sidecar, sidecar_records, write_sidecar
from .model import ModelConfig, TranslationModel, load_checkpoint, save_checkpoint
from .training import TrainConfig, average_checkpoints, train

log = logging.getLogger("mmtprobe.cli")

TASK_CHOICES = ("color", "character") + tuple(NOUN_TASKS)


# ---------------------------------------------------------------------------
# experiment config file: [section] blocks of key = value lines
# ---------------------------------------------------------------------------

CONFIG_SCHEMA = {
    "paths": {"train_src", "train_tgt", "train_ids", "train_features",
              "val_src", "val_tgt", "val_ids", "val_features", "lexicon", "out"},
    "model": {"enc_layers", "dec_layers", "d_model", "d_ffn", "heads", "dropout",
              "label_smoothing", "fusion_mode", "d_img", "max_len", "scalar_gate",
              "raw_qkv"},
    "optimizer": {"peak_lr", "floor_lr", "warmup"},
    "train": {"batch_tokens", "max_steps", "validate_every", "patience", "seed",
              "log_every", "keep_checkpoints"},
    "decode": {"beam", "max_out_len"},
    "probing": {"task"},
}

_PATH_KEYS_MUST_EXIST = {"train_src", "train_tgt", "train_ids", "train_features",
                         "val_src", "val_tgt", "val_ids", "val_features", "lexicon"}


def parse_experiment_config(path) -> dict[str, dict[str, str]]:
    """Parse and validate the flat key=value section file."""
    sections: dict[str, dict[str, str]] = {}
    current = None
    text = Path(path).read_text(encoding="utf-8")
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if current not in CONFIG_SCHEMA:
                raise ConfigError(f"{path}: line {lineno}: unknown section [{current}]")
            sections.setdefault(current, {})
            continue
        if "=" not in line or current is None:
            raise ConfigError(f"{path}: line {lineno}: expected 'key = value' inside a section")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in CONFIG_SCHEMA[current]:
            raise ConfigError(f"{path}: line {lineno}: unknown key {key!r} in [{current}]")
        if key in sections[current]:
            raise ConfigError(f"{path}: line {lineno}: duplicate key {key!r}")
        sections[current][key] = value
    for key, value in sections.get("paths", {}).items():
        if key in _PATH_KEYS_MUST_EXIST and not Path(value).exists():
            raise ConfigError(f"{path}: [paths] {key} = {value}: file does not exist")
    return sections


def _coerce(value: str, as_type):
    if as_type is bool:
        if value.lower() in ("true", "1", "yes"):
            return True
        if value.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"expected a boolean, got {value!r}")
    return as_type(value)


def _typed_block(block: dict[str, str], types: dict[str, type]) -> dict:
    out = {}
    for key, value in block.items():
        out[key] = _coerce(value, types[key])
    return out


MODEL_TYPES = {"enc_layers": int, "dec_layers": int, "d_model": int, "d_ffn": int,
               "heads": int, "dropout": float, "label_smoothing": float,
               "fusion_mode": str, "d_img": int, "max_len": int,
               "scalar_gate": bool, "raw_qkv": bool}
TRAIN_TYPES = {"batch_tokens": int, "max_steps": int, "validate_every": int,
               "patience": int, "seed": int, "log_every": int, "keep_checkpoints": int}
OPT_TYPES = {"peak_lr": float, "floor_lr": float, "warmup": int}
DECODE_TYPES = {"beam": int, "max_out_len": int}


# ---------------------------------------------------------------------------
# helpers shared by subcommands
# ---------------------------------------------------------------------------

def _load_lexicon(path) -> MaskLexicon:
    return MaskLexicon.from_tsv(path)


def _load_model(ckpt_path, vocab_src=None, vocab_tgt=None):
    cfg, params = load_checkpoint(ckpt_path)
    model = TranslationModel(cfg, params)
    base = Path(ckpt_path).parent
    src = Vocab.load(vocab_src if vocab_src else base / "vocab.src.txt")
    tgt = Vocab.load(vocab_tgt if vocab_tgt else base / "vocab.tgt.txt")
    if len(src) != cfg.src_vocab or len(tgt) != cfg.tgt_vocab:
        raise ConfigError(
            f"vocabulary sizes ({len(src)}, {len(tgt)}) do not match the "
            f"checkpoint config ({cfg.src_vocab}, {cfg.tgt_vocab})"
        )
    return model, src, tgt


def _examples_from_files(src_path, tgt_path=None, ids_path=None):
    from .corpus import ParallelExample

    src = read_token_lines(src_path)
    tgt = read_token_lines(tgt_path) if tgt_path else [[] for _ in src]
    ids = read_image_ids(ids_path) if ids_path else default_image_ids(len(src))
    if len(tgt) != len(src) or len(ids) != len(src):
        raise ConfigError("source, target, and id files disagree in length")
    return [ParallelExample(s, t, i) for s, t, i in zip(src, tgt, ids)]


def _write_report(report, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(report.to_text(), encoding="utf-8")
    (out / "report.kv").write_text(report.to_kv(), encoding="utf-8")


# ---------------------------------------------------------------------------
# subcommand implementations
# ---------------------------------------------------------------------------

def cmd_mask(args) -> int:
    lexicon = _load_lexicon(args.lexicon)
    task = args.task if args.task != "noun" else f"noun{args.k}"
    sentences = read_token_lines(args.src)
    masked = build_probing_corpus(sentences, lexicon, task)
    lines = [ex.masked for ex in masked]
    if args.out_src:
        write_token_lines(args.out_src, lines)
    else:
        for line in lines:
            print(" ".join(line))
    if args.sidecar:
        write_sidecar(sidecar_records(masked, lexicon), args.sidecar)
    log.info("masked %d sentences (%d masks)", len(lines),
             sum(len(ex.records) for ex in masked))
    return 0


def cmd_gen_features(args) -> int:
    lexicon = _load_lexicon(args.lexicon)
    examples = _examples_from_files(args.src, ids_path=args.ids)
    task = args.task if args.task != "noun" else f"noun{args.k}"
    masks = build_probing_corpus([e.src for e in examples], lexicon, task)
    if args.regime:
        regime = PAPER_REGIMES[args.regime]
        if args.d_img:
            regime = FeatureRegime(regime.name, regime.p, args.d_img, regime.has_cls)
    else:
        if args.p is None or args.d_img is None:
            raise ConfigError("custom regimes need both --p and --d-img (or use --regime)")
        regime = FeatureRegime("custom", args.p, args.d_img, not args.no_cls)
    vocab = sorted(set(lexicon.colors) | set(lexicon.characters) | set(lexicon.nouns))
    spec = SyntheticSpec(vocab=vocab, regime=regime, sigma=args.sigma,
                         patches_per_signal=args.patches_per_signal, seed=args.seed)
    records = generate_synthetic(examples, masks, spec)
    write_features(records, args.out)
    log.info("wrote %d feature records to %s", len(records), args.out)
    return 0


def cmd_train(args) -> int:
    sections = parse_experiment_config(args.config)
    paths = sections.get("paths", {})
    for required in ("train_src", "train_tgt", "out"):
        if required not in paths:
            raise ConfigError(f"config is missing [paths] {required}")
    out_dir = Path(args.out or paths["out"])
    out_dir.mkdir(parents=True, exist_ok=True)

    train_examples = load_parallel(paths["train_src"], paths["train_tgt"],
                                   paths.get("train_ids"))
    val_examples = None
    if "val_src" in paths:
        val_examples = load_parallel(paths["val_src"], paths["val_tgt"],
                                     paths.get("val_ids"))

    src_vocab = Vocab.build([e.src for e in train_examples])
    tgt_vocab = Vocab.build([e.tgt for e in train_examples])
    src_vocab.save(out_dir / "vocab.src.txt")
    tgt_vocab.save(out_dir / "vocab.tgt.txt")

    model_kwargs = _typed_block(sections.get("model", {}), MODEL_TYPES)
    cfg = ModelConfig(src_vocab=len(src_vocab), tgt_vocab=len(tgt_vocab), **model_kwargs)

    tc_kwargs = _typed_block(sections.get("train", {}), TRAIN_TYPES)
    tc_kwargs.update(_typed_block(sections.get("optimizer", {}), OPT_TYPES))
    if args.seed is not None:
        tc_kwargs["seed"] = args.seed
    tc = TrainConfig(**tc_kwargs)

    features = read_features(paths["train_features"]) if "train_features" in paths else None
    val_features = read_features(paths["val_features"]) if "val_features" in paths else None
    if cfg.fusion_mode != "text_only" and features is None:
        raise ConfigError(f"fusion mode {cfg.fusion_mode!r} requires [paths] train_features")

    model = TranslationModel.create(cfg, seed=tc.seed)
    result = train(model, train_examples, src_vocab, tgt_vocab, tc, out_dir,
                   features=features, val_examples=val_examples,
                   val_features=val_features)
    print(f"trained {result.steps} steps; checkpoints: {len(result.checkpoint_paths)}"
          + (f"; best val BLEU {result.best_val_bleu:.2f}" if result.best_val_bleu is not None else ""))
    return 0


def cmd_translate(args) -> int:
    model, src_vocab, tgt_vocab = _load_model(args.ckpt, args.vocab_src, args.vocab_tgt)
    examples = _examples_from_files(args.src, ids_path=args.ids)
    records = read_features(args.features) if args.features else None
    hyps = translate_corpus(model, examples, src_vocab, tgt_vocab, records=records,
                            beam=args.beam, max_out_len=args.max_out_len)
    if args.out:
        write_token_lines(args.out, hyps)
    else:
        for line in hyps:
            print(" ".join(line))
    return 0


def cmd_evaluate(args) -> int:
    hyps = read_token_lines(args.hyp)
    refs = read_token_lines(args.ref)
    sidecar = read_sidecar(args.sidecar) if args.sidecar else None
    report = build_report(hyps, refs, sidecar)
    if args.criterion == "restrict" and report.relaxed_accuracy is not None:
        print(f"restrict_accuracy={report.restrict_accuracy:.6f}")
    elif args.criterion == "relaxed" and report.relaxed_accuracy is not None:
        print(f"relaxed_accuracy={report.relaxed_accuracy:.6f}")
    else:
        print(report.to_text(), end="")
    if args.out:
        _write_report(report, args.out)
    return 0


def cmd_probe(args) -> int:
    model, src_vocab, tgt_vocab = _load_model(args.ckpt, args.vocab_src, args.vocab_tgt)
    examples = _examples_from_files(args.src, ids_path=args.ids)
    refs = read_token_lines(args.ref)
    records = read_features(args.features) if args.features else None
    hyps = translate_corpus(model, examples, src_vocab, tgt_vocab, records=records,
                            beam=args.beam, max_out_len=args.max_out_len)
    sidecar = read_sidecar(args.sidecar)
    report = build_report(hyps, refs, sidecar)
    print(report.to_text(), end="")
    if args.out:
        _write_report(report, args.out)
        write_token_lines(Path(args.out) / "hypotheses.txt", hyps)
    return 0


def cmd_congruence(args) -> int:
    model, src_vocab, tgt_vocab = _load_model(args.ckpt, args.vocab_src, args.vocab_tgt)
    examples = _examples_from_files(args.src, ids_path=args.ids)
    refs = read_token_lines(args.ref)
    records = read_features(args.features)
    sidecar = read_sidecar(args.sidecar) if args.sidecar else None
    report = congruence_report(model, examples, refs, records, args.seed,
                               src_vocab, tgt_vocab, beam=args.beam,
                               max_out_len=args.max_out_len, sidecar=sidecar)
    print(report.to_text(), end="")
    if args.out:
        _write_report(report, args.out)
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    results = run_suite(op_seeds=range(args.seeds), model_seeds=range(args.seeds))
    failed = [r for r in results if not r.passed]
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name} "
              f"(max relative error {r.max_rel_error:.3e}, tolerance {r.tolerance:g})")
    if failed:
        print(f"{len(failed)} checks failed")
        return 1
    print(f"all {len(results)} gradient checks passed")
    return 0


def cmd_dump_attn(args) -> int:
    model, src_vocab, _ = _load_model(args.ckpt, args.vocab_src, args.vocab_tgt)
    sentences = read_token_lines(args.src)
    if not 0 <= args.line < len(sentences):
        raise ConfigError(f"--line {args.line} out of range for {len(sentences)} sentences")
    records = read_features(args.features)
    ids = read_image_ids(args.ids) if args.ids else default_image_ids(len(sentences))
    by_id = {r.image_id: r for r in records}
    rec = by_id.get(ids[args.line])
    if rec is None:
        raise ConfigError(f"no feature record for image id {ids[args.line]!r}")
    weights = dump_attention(model, sentences[args.line], src_vocab, rec.patches, args.out)
    log.info("wrote %dx%d attention map to %s", weights.shape[0], weights.shape[1], args.out)
    return 0


def cmd_avg_ckpt(args) -> int:
    cfg, params = average_checkpoints(args.checkpoints)
    save_checkpoint(args.out, cfg, params)
    print(f"averaged {len(args.checkpoints)} checkpoints into {args.out}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mmtprobe",
        description="Multimodal translation probing workbench",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def vocab_flags(p):
        p.add_argument("--vocab-src", help="source vocabulary file (default: next to --ckpt)")
        p.add_argument("--vocab-tgt", help="target vocabulary file (default: next to --ckpt)")

    def decode_flags(p):
        p.add_argument("--beam", type=int, default=5)
        p.add_argument("--max-out-len", type=int, default=None)

    p = sub.add_parser("mask", help="build an insufficient-text corpus")
    p.add_argument("--lexicon", required=True)
    p.add_argument("--task", required=True, choices=TASK_CHOICES + ("noun",))
    p.add_argument("--k", type=int, default=1, choices=(1, 2, 3, 4),
                   help="noun masking level when --task noun")
    p.add_argument("--src", required=True)
    p.add_argument("--out-src", help="masked corpus output (default: stdout)")
    p.add_argument("--sidecar", help="write the mask sidecar TSV here")
    p.set_defaults(fn=cmd_mask)

    p = sub.add_parser("gen-features", help="generate planted-signal synthetic features")
    p.add_argument("--src", required=True, help="original (unmasked) source corpus")
    p.add_argument("--ids", help="image id file, one per line")
    p.add_argument("--lexicon", required=True)
    p.add_argument("--task", required=True, choices=TASK_CHOICES + ("noun",))
    p.add_argument("--k", type=int, default=1, choices=(1, 2, 3, 4))
    p.add_argument("--regime", choices=sorted(PAPER_REGIMES),
                   help="named patch regime; overrides --p/--no-cls")
    p.add_argument("--p", type=int, help="patch count for a custom regime")
    p.add_argument("--d-img", type=int, help="feature dimension")
    p.add_argument("--no-cls", action="store_true")
    p.add_argument("--sigma", type=float, default=0.5)
    p.add_argument("--patches-per-signal", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_features)

    p = sub.add_parser("train", help="train a model from an experiment config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None, help="override [train] seed")
    p.add_argument("--out", default=None, help="override [paths] out")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("translate", help="decode a corpus with a trained checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--src", required=True)
    p.add_argument("--ids")
    p.add_argument("--features")
    p.add_argument("--out")
    vocab_flags(p)
    decode_flags(p)
    p.set_defaults(fn=cmd_translate)

    p = sub.add_parser("evaluate", help="score existing hypotheses")
    p.add_argument("--hyp", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--sidecar")
    p.add_argument("--criterion", choices=("both", "restrict", "relaxed"), default="both")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("probe", help="decode and score a probing task")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--src", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--ids")
    p.add_argument("--features")
    p.add_argument("--sidecar", required=True)
    p.add_argument("--out")
    vocab_flags(p)
    decode_flags(p)
    p.set_defaults(fn=cmd_probe)

    p = sub.add_parser("congruence", help="congruent vs incongruent decoding report")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--src", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--ids")
    p.add_argument("--features", required=True)
    p.add_argument("--sidecar")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    vocab_flags(p)
    decode_flags(p)
    p.set_defaults(fn=cmd_congruence)

    p = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    p.add_argument("--seeds", type=int, default=10)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("dump-attn", help="write a selective-attention map as CSV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--src", required=True)
    p.add_argument("--ids")
    p.add_argument("--features", required=True)
    p.add_argument("--line", type=int, default=0)
    p.add_argument("--out", required=True)
    vocab_flags(p)
    p.set_defaults(fn=cmd_dump_attn)

    p = sub.add_parser("avg-ckpt", help="average checkpoints parameter-wise")
    p.add_argument("--out", required=True)
    p.add_argument("checkpoints", nargs="+")
    p.set_defaults(fn=cmd_avg_ckpt)

    return parser


def _setup_logging():
    level_name = os.environ.get("MMT_PROBE_LOG", "quiet").lower()
    levels = {"quiet": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}
    if level_name not in levels:
        print(f"warning: unknown MMT_PROBE_LOG value {level_name!r}; using quiet",
              file=sys.stderr)
        level_name = "quiet"
    logging.basicConfig(level=levels[level_name],
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    if level_name == "debug":
        autodiff.FINITE_CHECKS = True


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except MmtError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

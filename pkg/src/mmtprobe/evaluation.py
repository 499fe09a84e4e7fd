"""Evaluation: corpus BLEU, restrict/relaxed probing accuracy, congruent vs.
incongruent decoding reports, and attention-map dumps."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import Vocab
from .decoding import translate_corpus
from .errors import AlignmentError, ConfigError, ContractError
from .features import shuffle_incongruent
from .masking import SidecarRecord
from .model import TranslationModel


def _ngrams(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i: i + n]) for i in range(len(tokens) - n + 1))


def bleu(hypotheses, references) -> float:
    """Corpus BLEU-4 without smoothing, in [0, 100].

    Geometric mean of modified n-gram precisions (n = 1..4) times the
    brevity penalty. Zero matches at any populated order give a score of
    0; orders where the hypotheses have no n-grams at all (corpus shorter
    than n everywhere) are excluded from the mean so that identical
    corpora always score 100.
    """
    if len(hypotheses) != len(references):
        raise AlignmentError(
            f"{len(hypotheses)} hypotheses vs {len(references)} references"
        )
    if not hypotheses:
        raise ContractError("BLEU of an empty corpus")
    matches = np.zeros(4)
    totals = np.zeros(4)
    hyp_tokens = 0
    ref_tokens = 0
    for hyp, ref in zip(hypotheses, references):
        hyp_tokens += len(hyp)
        ref_tokens += len(ref)
        for n in range(1, 5):
            hg = _ngrams(hyp, n)
            rg = _ngrams(ref, n)
            totals[n - 1] += sum(hg.values())
            matches[n - 1] += sum(min(count, rg[gram]) for gram, count in hg.items())
    populated = totals > 0
    if not populated.any():
        return 0.0
    if np.any(matches[populated] == 0):
        return 0.0
    precision = np.exp(np.mean(np.log(matches[populated] / totals[populated])))
    brevity = 1.0 if hyp_tokens > ref_tokens else float(np.exp(1.0 - ref_tokens / hyp_tokens))
    return float(100.0 * brevity * precision)


def _find_reference_form(record: SidecarRecord, reference) -> str | None:
    """The first reference token (in reference order) among the record's forms."""
    forms = set(record.all_forms())
    for tok in reference:
        if tok in forms:
            return tok
    return None


def probing_accuracy(hypotheses, references, sidecar: list[SidecarRecord],
                     criterion: str) -> tuple[float, int]:
    """Micro-averaged masked-word accuracy over all sidecar records.

    restrict: the hypothesis must contain the exact target form found in
    the reference for that record (a record whose reference shows no known
    form counts as a miss). relaxed: any target form of the masked word
    counts. Matching scans the whole hypothesis token list. Returns
    (accuracy, scored record count).
    """
    if criterion not in ("restrict", "relaxed"):
        raise ContractError(f"criterion must be restrict or relaxed, got {criterion!r}")
    if len(hypotheses) != len(references):
        raise AlignmentError(
            f"{len(hypotheses)} hypotheses vs {len(references)} references"
        )
    for rec in sidecar:
        if rec.line_no >= len(hypotheses):
            raise AlignmentError(
                f"sidecar record points at line {rec.line_no} "
                f"but only {len(hypotheses)} hypotheses were given"
            )
    if not sidecar:
        raise ContractError("probing accuracy with an empty sidecar")
    hits = 0
    for rec in sidecar:
        hyp = set(hypotheses[rec.line_no])
        if criterion == "restrict":
            form = _find_reference_form(rec, references[rec.line_no])
            hits += int(form is not None and form in hyp)
        else:
            hits += int(any(f in hyp for f in rec.all_forms()))
    return hits / len(sidecar), len(sidecar)


@dataclass
class EvalReport:
    """Scores of one evaluation run; None marks sections that did not run."""

    bleu: float | None = None
    restrict_accuracy: float | None = None
    relaxed_accuracy: float | None = None
    scored_masks: int = 0
    congruent_bleu: float | None = None
    incongruent_bleu: float | None = None
    bleu_delta: float | None = None

    def __post_init__(self):
        for name in ("bleu", "congruent_bleu", "incongruent_bleu"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 100.0:
                raise ContractError(f"{name} out of range: {v}")
        for name in ("restrict_accuracy", "relaxed_accuracy"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ContractError(f"{name} out of range: {v}")
        if self.restrict_accuracy is not None and self.relaxed_accuracy is not None:
            if self.restrict_accuracy > self.relaxed_accuracy + 1e-12:
                raise ContractError(
                    f"restrict accuracy {self.restrict_accuracy} exceeds "
                    f"relaxed accuracy {self.relaxed_accuracy}"
                )

    def to_text(self) -> str:
        lines = ["evaluation report", "-----------------"]
        if self.bleu is not None:
            lines.append(f"BLEU: {self.bleu:.4f}")
        if self.restrict_accuracy is not None:
            lines.append(f"restrict accuracy: {self.restrict_accuracy:.4f}")
        if self.relaxed_accuracy is not None:
            lines.append(f"relaxed accuracy: {self.relaxed_accuracy:.4f}")
        if self.scored_masks:
            lines.append(f"scored masks: {self.scored_masks}")
        if self.congruent_bleu is not None:
            lines.append(f"congruent BLEU: {self.congruent_bleu:.4f}")
            lines.append(f"incongruent BLEU: {self.incongruent_bleu:.4f}")
            lines.append(f"BLEU delta: {self.bleu_delta:.4f}")
        return "\n".join(lines) + "\n"

    def to_kv(self) -> str:
        pairs = []
        for key in ("bleu", "restrict_accuracy", "relaxed_accuracy", "scored_masks",
                    "congruent_bleu", "incongruent_bleu", "bleu_delta"):
            value = getattr(self, key)
            if value is None:
                continue
            if isinstance(value, float):
                pairs.append(f"{key}={value:.6f}")
            else:
                pairs.append(f"{key}={value}")
        return "\n".join(pairs) + "\n"


def build_report(hypotheses, references, sidecar=None) -> EvalReport:
    """BLEU plus, when a sidecar is given, both probing accuracies."""
    report = EvalReport(bleu=bleu(hypotheses, references))
    if sidecar:
        restrict, count = probing_accuracy(hypotheses, references, sidecar, "restrict")
        relaxed, _ = probing_accuracy(hypotheses, references, sidecar, "relaxed")
        report = EvalReport(
            bleu=report.bleu,
            restrict_accuracy=restrict,
            relaxed_accuracy=relaxed,
            scored_masks=count,
        )
    return report


def congruence_report(model: TranslationModel, examples, references, records,
                      seed: int, src_vocab: Vocab, tgt_vocab: Vocab,
                      beam: int = 5, max_out_len: int | None = None,
                      sidecar=None, _allow_text_only: bool = False) -> EvalReport:
    """Decode with true features and with deranged features; report both.

    The two decodes share every setting and differ only in the feature
    payloads (reassigned by a seeded derangement for the second pass).
    """
    if model.cfg.fusion_mode == "text_only" and not _allow_text_only:
        raise ConfigError("congruent/incongruent comparison is meaningless for text_only")
    shuffled = shuffle_incongruent(records, seed) if records is not None else None

    def decode(feature_records):
        if model.cfg.fusion_mode == "text_only":
            return translate_corpus(model, examples, src_vocab, tgt_vocab,
                                    records=None, beam=beam, max_out_len=max_out_len)
        return translate_corpus(model, examples, src_vocab, tgt_vocab,
                                records=feature_records, beam=beam, max_out_len=max_out_len)

    congruent_hyps = decode(records)
    incongruent_hyps = decode(shuffled)
    congruent = bleu(congruent_hyps, references)
    incongruent = bleu(incongruent_hyps, references)
    restrict = relax = None
    count = 0
    if sidecar:
        restrict, count = probing_accuracy(congruent_hyps, references, sidecar, "restrict")
        relax, _ = probing_accuracy(congruent_hyps, references, sidecar, "relaxed")
    return EvalReport(
        bleu=congruent,
        restrict_accuracy=restrict,
        relaxed_accuracy=relax,
        scored_masks=count,
        congruent_bleu=congruent,
        incongruent_bleu=incongruent,
        bleu_delta=congruent - incongruent,
    )


def attention_map(model: TranslationModel, tokens, src_vocab: Vocab,
                  patches: np.ndarray) -> np.ndarray:
    """Selective-attention weights [L, p] for one sentence in float64."""
    if model.cfg.fusion_mode != "selective_attention":
        raise ConfigError("attention dumps require the selective_attention fusion mode")
    from .autodiff import Tensor

    # Run this single example in double precision so dumped rows sum to 1
    # well inside the reporting tolerance.
    cfg = model.cfg
    params64 = {n: Tensor(t.data.astype(np.float64), requires_grad=False)
                for n, t in model.params.items()}
    model64 = TranslationModel(cfg, params64)
    src_ids = np.array([src_vocab.encode(tokens)], dtype=np.int64)
    h_text = model64.encode_text(src_ids)
    h_img = model64.project_image(np.asarray(patches, dtype=np.float64)[None])
    _, weights = model64.selective_attention(h_text, h_img, return_weights=True)
    return weights.data[0]


def dump_attention(model: TranslationModel, tokens, src_vocab: Vocab,
                   patches: np.ndarray, path) -> np.ndarray:
    """Write the [L, p] attention matrix as CSV; row i belongs to token i."""
    weights = attention_map(model, tokens, src_vocab, patches)
    lines = [",".join(f"{w:.9e}" for w in row) for row in weights]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return weights

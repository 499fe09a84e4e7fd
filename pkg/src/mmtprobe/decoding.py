"""Beam search decoding (no length normalization) and corpus translation."""

from __future__ import annotations

import numpy as np

from .corpus import BOS_ID, EOS_ID, PAD_ID, Vocab
from .errors import ContractError
from .model import TranslationModel


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def beam_decode(step_fn, beam: int, max_out_len: int,
                bos: int = BOS_ID, eos: int = EOS_ID) -> tuple[list[int], float]:
    """Beam search over log-probabilities, terminated by eos.

    step_fn(prefixes [N, t]) returns next-token log-probs [N, vocab] for
    each prefix (every prefix starts with bos). Scores are plain summed
    log-probs with no length normalization; the best finished hypothesis
    wins, or the best unfinished one when nothing finishes within
    max_out_len. beam=1 is exactly greedy decoding (ties break toward the
    lowest token id). Returns the token sequence without bos/eos and its
    log-prob.
    """
    if beam < 1:
        raise ContractError(f"beam width must be >= 1, got {beam}")
    if max_out_len < 1:
        raise ContractError(f"max_out_len must be >= 1, got {max_out_len}")
    live: list[tuple[tuple, float]] = [((), 0.0)]
    best_finished: tuple[float, tuple] | None = None
    for _ in range(max_out_len):
        prefixes = np.array([(bos,) + toks for toks, _ in live], dtype=np.int64)
        logp = step_fn(prefixes)
        candidates = []
        for (toks, acc), row in zip(live, logp):
            scores = acc + row
            # Per hypothesis only the top beam+1 continuations can matter
            # (at most one of them is eos).
            top = np.argsort(-scores, kind="stable")[: beam + 1]
            for tok in top:
                candidates.append((float(scores[int(tok)]), (toks, int(tok))))
        candidates.sort(key=lambda c: (-c[0], c[1][1], c[1][0]))
        # eos finalizes a hypothesis only from the step's top `beam`
        # candidates (this is what makes beam=1 exactly greedy); the live
        # set then fills with the best non-eos candidates.
        next_live = []
        for rank, (score, (toks, tok)) in enumerate(candidates):
            if tok == eos:
                if rank < beam and (best_finished is None or score > best_finished[0]):
                    best_finished = (score, toks)
            elif len(next_live) < beam:
                next_live.append((toks + (tok,), score))
        # Log-probs only decrease, so hypotheses at or below the best
        # finished score can never overtake it.
        if best_finished is not None:
            next_live = [h for h in next_live if h[1] > best_finished[0]]
        live = next_live
        if not live:
            break
    # Best scoring hypothesis overall: finished ones compete with whatever
    # is still unfinished at max_out_len.
    outcomes = []
    if best_finished is not None:
        outcomes.append(best_finished)
    outcomes.extend((score, toks) for toks, score in live)
    if not outcomes:
        return [], -np.inf
    score, toks = max(outcomes, key=lambda o: o[0])
    return list(toks), score


def greedy_decode(step_fn, max_out_len: int,
                  bos: int = BOS_ID, eos: int = EOS_ID) -> tuple[list[int], float]:
    """Argmax decoding; extensionally equal to beam_decode with beam=1."""
    return beam_decode(step_fn, 1, max_out_len, bos, eos)


def model_step_fn(model: TranslationModel, fused, src_pad: np.ndarray):
    """Adapt a fused source encoding to the step_fn interface."""
    def step(prefixes: np.ndarray) -> np.ndarray:
        n = prefixes.shape[0]
        fused_n = _expand_batch(fused, n)
        pad_n = np.broadcast_to(src_pad, (n, src_pad.shape[1]))
        logits = model.decode_step(prefixes, fused_n, pad_n)
        return _log_softmax(logits)

    return step


def _expand_batch(fused, n: int):
    from .autodiff import Tensor

    data = fused.data if isinstance(fused, Tensor) else np.asarray(fused)
    if data.shape[0] == n:
        return Tensor(data)
    if data.shape[0] != 1:
        raise ContractError(f"cannot expand encoder batch {data.shape[0]} to {n} hypotheses")
    return Tensor(np.repeat(data, n, axis=0))


def translate_sentence(model: TranslationModel, tokens: list[str], src_vocab: Vocab,
                       tgt_vocab: Vocab, patches=None, has_cls: bool = False,
                       beam: int = 5, max_out_len: int | None = None) -> list[str]:
    """Translate one tokenized sentence; returns target tokens."""
    src_ids = np.array([src_vocab.encode(tokens)], dtype=np.int64)
    h_text = model.encode_text(src_ids)
    feats = None
    if model.cfg.fusion_mode != "text_only":
        feats = patches[None] if patches is not None and patches.ndim == 2 else patches
    fused = model.fuse(h_text, feats, has_cls)
    src_pad = src_ids == PAD_ID
    if max_out_len is None:
        max_out_len = min(model.cfg.max_len - 1, 2 * len(tokens) + 8)
    ids, _ = beam_decode(model_step_fn(model, fused, src_pad), beam, max_out_len)
    return tgt_vocab.decode(ids)


def translate_corpus(model: TranslationModel, examples, src_vocab: Vocab, tgt_vocab: Vocab,
                     records=None, beam: int = 5, max_out_len: int | None = None) -> list[list[str]]:
    """Translate every example, using its own patch record when fusing."""
    need_feats = model.cfg.fusion_mode != "text_only"
    if need_feats and records is None:
        raise ContractError(f"fusion mode {model.cfg.fusion_mode!r} requires feature records")
    by_id = {r.image_id: r for r in records} if records is not None else {}
    out = []
    for e in examples:
        patches = has_cls = None
        if need_feats:
            rec = by_id.get(e.image_id)
            if rec is None:
                raise ContractError(f"no features for image id {e.image_id!r}")
            patches, has_cls = rec.patches, rec.has_cls
        out.append(
            translate_sentence(model, e.src, src_vocab, tgt_vocab, patches=patches,
                               has_cls=bool(has_cls), beam=beam, max_out_len=max_out_len)
        )
    return out

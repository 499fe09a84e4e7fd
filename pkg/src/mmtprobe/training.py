"""Training loop: Adam with warmup/inverse-sqrt schedule, token batching,
periodic validation with early stopping, and checkpoint averaging."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import DropoutRng, Tape, Tensor
from .corpus import PAD_ID, Vocab
from .errors import CheckpointError, ContractError, DivergenceError
from .model import ModelConfig, TranslationModel, load_checkpoint, save_checkpoint, stack_features

log = logging.getLogger("mmtprobe.training")


def lr_schedule(step: int, peak_lr: float = 5e-3, floor_lr: float = 1e-7,
                warmup: int = 2000) -> float:
    """Linear warmup from floor_lr to peak_lr, then inverse-sqrt decay."""
    if step < 0:
        raise ContractError(f"schedule step must be >= 0, got {step}")
    if step <= warmup:
        return floor_lr + (peak_lr - floor_lr) * step / warmup
    return peak_lr * np.sqrt(warmup / step)


class Adam:
    """Adam with bias correction over a named parameter dict."""

    def __init__(self, params: dict[str, Tensor], beta1: float = 0.9,
                 beta2: float = 0.98, eps: float = 1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = {n: np.zeros_like(t.data) for n, t in params.items()}
        self.v = {n: np.zeros_like(t.data) for n, t in params.items()}

    def zero_grad(self):
        for t in self.params.values():
            t.zero_grad()

    def step(self, lr: float):
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for name, t in self.params.items():
            g = t.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            t.data -= update.astype(t.data.dtype)


@dataclass
class TrainConfig:
    batch_tokens: int = 4096
    max_steps: int = 2000
    validate_every: int = 200
    patience: int = 10
    seed: int = 0
    peak_lr: float = 5e-3
    floor_lr: float = 1e-7
    warmup: int = 2000
    log_every: int = 50
    keep_checkpoints: int = 10


@dataclass
class TrainResult:
    checkpoint_paths: list[str]
    log_rows: list[tuple]
    steps: int
    best_val_bleu: float | None
    stopped_early: bool = False
    final_train_accuracy: float | None = None


def make_batches(examples, batch_tokens: int, seed: int, epoch: int):
    """Deterministic token-count batches for one epoch.

    Sentences are ordered by (length, seeded jitter) so batches are nearly
    homogeneous in length, then batch order is shuffled; the same seed and
    epoch always yield the same batches.
    """
    rng = np.random.default_rng([seed, epoch])
    jitter = rng.permutation(len(examples))
    order = sorted(range(len(examples)),
                   key=lambda i: (len(examples[i].src) + len(examples[i].tgt), jitter[i]))
    batches = []
    cur: list = []
    cur_tokens = 0
    for i in order:
        n = len(examples[i].src) + len(examples[i].tgt)
        if cur and cur_tokens + n > batch_tokens:
            batches.append(cur)
            cur, cur_tokens = [], 0
        cur.append(examples[i])
        cur_tokens += n
    if cur:
        batches.append(cur)
    rng.shuffle(batches)
    return batches


def train(
    model: TranslationModel,
    train_examples,
    src_vocab: Vocab,
    tgt_vocab: Vocab,
    cfg: TrainConfig,
    out_dir,
    features=None,
    val_examples=None,
    val_features=None,
    val_references=None,
) -> TrainResult:
    """Run the optimization loop and write one checkpoint per validation.

    Validation decodes the provided val split greedily, scores corpus BLEU
    against val_references (or the examples' own targets), and stops after
    `patience` validations without improvement. Without a validation set
    the loop simply runs max_steps and checkpoints at each validate_every
    boundary.
    """
    from .decoding import translate_corpus  # local import to avoid a cycle
    from .evaluation import bleu

    if not train_examples:
        raise ContractError("training corpus is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    optimizer = Adam(model.params)
    fusion = model.cfg.fusion_mode != "text_only"

    feats_array = has_cls = None
    log_rows: list[tuple] = []
    ckpt_paths: list[str] = []
    best_bleu = None
    stalls = 0
    step = 0
    stopped_early = False
    last_accuracy = None

    def validate() -> float | None:
        if val_examples is None:
            return None
        hyps = translate_corpus(model, val_examples, src_vocab, tgt_vocab,
                                records=val_features, beam=1)
        refs = val_references if val_references is not None else [e.tgt for e in val_examples]
        return bleu(hyps, refs)

    epoch = 0
    done = False
    while not done:
        for batch in make_batches(train_examples, cfg.batch_tokens, cfg.seed, epoch):
            step += 1
            rng = DropoutRng(seed=cfg.seed, stream=step)
            if fusion:
                feats_array, has_cls = stack_features(features, batch)
            optimizer.zero_grad()
            with Tape() as tape:
                loss, logits, tgt_out = model.forward_loss(
                    batch, src_vocab, tgt_vocab, features=feats_array,
                    has_cls=bool(has_cls), rng=rng, return_logits=True,
                )
            loss_value = float(loss.data)
            if not np.isfinite(loss_value):
                raise DivergenceError(step)
            tape.backward(loss)
            lr = lr_schedule(step, cfg.peak_lr, cfg.floor_lr, cfg.warmup)
            optimizer.step(lr)

            pred = np.argmax(logits.data, axis=-1)
            mask = tgt_out != PAD_ID
            last_accuracy = float((pred[mask] == tgt_out[mask]).mean())

            if step % cfg.log_every == 0 or step == 1:
                log_rows.append((step, lr, loss_value, ""))
                log.info("step %d lr %.3e loss %.4f acc %.3f",
                         step, lr, loss_value, last_accuracy)

            if step % cfg.validate_every == 0:
                val_bleu = validate()
                path = out_dir / f"ckpt_{step:06d}.mmtc"
                save_checkpoint(path, model.cfg, model.params)
                ckpt_paths.append(str(path))
                if len(ckpt_paths) > cfg.keep_checkpoints:
                    Path(ckpt_paths.pop(0)).unlink(missing_ok=True)
                if val_bleu is not None:
                    log_rows.append((step, lr, loss_value, f"{val_bleu:.4f}"))
                    log.info("step %d validation BLEU %.2f", step, val_bleu)
                    if best_bleu is None or val_bleu > best_bleu:
                        best_bleu = val_bleu
                        stalls = 0
                    else:
                        stalls += 1
                        if stalls >= cfg.patience:
                            log.info("early stop after %d stalled validations", stalls)
                            stopped_early = True
                            done = True
                            break
            if step >= cfg.max_steps:
                done = True
                break
        epoch += 1

    if not ckpt_paths:
        path = out_dir / f"ckpt_{step:06d}.mmtc"
        save_checkpoint(path, model.cfg, model.params)
        ckpt_paths.append(str(path))

    write_train_log(out_dir / "train_log.tsv", log_rows)
    return TrainResult(ckpt_paths, log_rows, step, best_bleu, stopped_early, last_accuracy)


def write_train_log(path, rows) -> None:
    lines = ["step\tlr\tloss\tval_bleu"]
    for step, lr, loss, val in rows:
        lines.append(f"{step}\t{lr:.8e}\t{loss:.8f}\t{val}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def average_checkpoints(paths) -> tuple[ModelConfig, dict[str, Tensor]]:
    """Arithmetic per-parameter mean of checkpoints sharing one config.

    Values are sorted before summation so the result is bit-identical
    under any ordering of the path list.
    """
    if not paths:
        raise ContractError("average_checkpoints needs at least one path")
    cfg0 = None
    stacks: dict[str, list[np.ndarray]] = {}
    for p in paths:
        cfg, params = load_checkpoint(p)
        if cfg0 is None:
            cfg0 = cfg
        elif cfg != cfg0:
            raise CheckpointError(f"checkpoint {p} config differs from {paths[0]}")
        for name, t in params.items():
            stacks.setdefault(name, []).append(t.data.astype(np.float64))
    averaged = {}
    for name, arrays in stacks.items():
        stack = np.sort(np.stack(arrays), axis=0)
        mean = stack.sum(axis=0) / len(arrays)
        averaged[name] = Tensor(mean.astype(np.float32), requires_grad=True)
    return cfg0, averaged

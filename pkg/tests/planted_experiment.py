"""Planted-signal probing experiment shared by the acceptance suite.

Builds one synthetic corpus (noun Mask2 task, two-form target inflections),
hides the masked words' signal embeddings in random patches at a chosen
noise level, trains one model per fusion mode and seed, and scores relaxed
probing accuracy plus congruent/incongruent BLEU on a held-out test split.
"""

from __future__ import annotations

from dataclasses import dataclass

from mmtprobe.corpus import Vocab, make_synthetic_corpus
from mmtprobe.evaluation import congruence_report
from mmtprobe.features import FeatureRegime, SyntheticSpec, generate_synthetic
from mmtprobe.masking import MaskLexicon, build_probing_corpus, sidecar_records
from mmtprobe.model import ModelConfig, TranslationModel
from mmtprobe.training import TrainConfig, train


@dataclass
class ExperimentData:
    train_examples: list
    test_examples: list
    test_references: list
    src_vocab: Vocab
    tgt_vocab: Vocab
    train_features: list
    test_features: list
    sidecar: list
    lexicon: MaskLexicon
    plan: dict  # image_id -> [(word, planted patch row)]


def build_experiment_data(
    n_train: int = 3000,
    n_test: int = 200,
    sigma: float = 0.5,
    seed: int = 0,
    patch_count: int = 50,
    d_img: int = 64,
    task: str = "noun2",
) -> ExperimentData:
    import tempfile

    from mmtprobe.corpus import synthetic_lexicon_tsv

    examples = make_synthetic_corpus(n_train + n_test, seed=seed)
    with tempfile.NamedTemporaryFile("w", suffix=".tsv", delete=False,
                                     encoding="utf-8") as fh:
        fh.write(synthetic_lexicon_tsv())
        lexicon_file = fh.name
    lexicon = MaskLexicon.from_tsv(lexicon_file)

    masked = build_probing_corpus([e.src for e in examples], lexicon, task)
    regime = FeatureRegime("fixture", patch_count, d_img, has_cls=True)
    plant_vocab = sorted(set(lexicon.colors) | set(lexicon.characters) | set(lexicon.nouns))
    spec = SyntheticSpec(vocab=plant_vocab, regime=regime, sigma=sigma, seed=seed)
    features, plan = generate_synthetic(examples, masked, spec, return_plan=True)

    # Swap the masked source in; keep original targets as references.
    masked_examples = []
    for e, m in zip(examples, masked):
        masked_examples.append(type(e)(m.masked, e.tgt, e.image_id))

    train_examples = masked_examples[:n_train]
    test_examples = masked_examples[n_train:]
    src_vocab = Vocab.build([e.src for e in train_examples])
    tgt_vocab = Vocab.build([e.tgt for e in train_examples])

    test_masked = masked[n_train:]
    sidecar = []
    for line_no, m in enumerate(test_masked):
        for rec in sidecar_records([m], lexicon):
            rec.line_no = line_no
            sidecar.append(rec)

    return ExperimentData(
        train_examples=train_examples,
        test_examples=test_examples,
        test_references=[e.tgt for e in test_examples],
        src_vocab=src_vocab,
        tgt_vocab=tgt_vocab,
        train_features=features[:n_train],
        test_features=features[n_train:],
        sidecar=sidecar,
        lexicon=lexicon,
        plan=plan,
    )


def model_config(data: ExperimentData, fusion_mode: str, d_img: int = 64) -> ModelConfig:
    return ModelConfig(
        src_vocab=len(data.src_vocab),
        tgt_vocab=len(data.tgt_vocab),
        enc_layers=2,
        dec_layers=2,
        d_model=64,
        d_ffn=128,
        heads=4,
        dropout=0.1,
        label_smoothing=0.1,
        fusion_mode=fusion_mode,
        d_img=d_img if fusion_mode != "text_only" else 0,
        max_len=24,
    )


def train_and_report(data: ExperimentData, fusion_mode: str, seed: int, out_dir,
                     max_steps: int = 700, beam: int = 5, shuffle_seed: int = 1234):
    """Train one model and return its congruent/incongruent eval report."""
    cfg = model_config(data, fusion_mode)
    model = TranslationModel.create(cfg, seed=seed)
    tc = TrainConfig(batch_tokens=1024, max_steps=max_steps,
                     validate_every=max_steps, patience=10, seed=seed,
                     warmup=2000, log_every=100)
    features = data.train_features if fusion_mode != "text_only" else None
    train(model, data.train_examples, data.src_vocab, data.tgt_vocab, tc,
          out_dir, features=features)
    report = congruence_report(
        model, data.test_examples, data.test_references, data.test_features,
        shuffle_seed, data.src_vocab, data.tgt_vocab, beam=beam, max_out_len=16,
        sidecar=data.sidecar, _allow_text_only=fusion_mode == "text_only",
    )
    return model, report

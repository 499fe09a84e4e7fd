import numpy as np
import pytest

from mmtprobe.autodiff import Tensor
from mmtprobe.corpus import Vocab, make_synthetic_corpus
from mmtprobe.errors import CheckpointError, ContractError, DivergenceError
from mmtprobe.model import ModelConfig, TranslationModel, init_params, load_checkpoint, save_checkpoint
from mmtprobe.training import Adam, TrainConfig, average_checkpoints, lr_schedule, make_batches, train


# ---------------------------------------------------------------------------
# learning-rate schedule
# ---------------------------------------------------------------------------

def test_schedule_goldens():
    assert abs(lr_schedule(0) - 1e-7) <= 1e-12 * 1e-7
    assert abs(lr_schedule(2000) - 5e-3) <= 1e-12 * 5e-3
    assert abs(lr_schedule(8000) - 2.5e-3) <= 1e-12 * 2.5e-3


def test_schedule_continuous_at_warmup():
    peak, floor, warmup = 5e-3, 1e-7, 2000
    from_warmup_branch = floor + (peak - floor) * warmup / warmup
    from_decay_branch = peak * np.sqrt(warmup / warmup)
    assert from_warmup_branch == from_decay_branch == lr_schedule(warmup)


def test_schedule_monotone_decay_after_warmup():
    values = [lr_schedule(s) for s in range(2000, 20000, 500)]
    assert all(a > b for a, b in zip(values, values[1:]))


def test_schedule_rejects_negative_step():
    with pytest.raises(ContractError):
        lr_schedule(-1)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

def test_adam_matches_reference_updates():
    w = Tensor(np.array([1.0, -2.0], dtype=np.float32), requires_grad=True)
    opt = Adam({"w": w})
    m = np.zeros(2)
    v = np.zeros(2)
    ref = np.array([1.0, -2.0])
    for t in range(1, 4):
        g = 2.0 * ref  # pretend loss = sum(w^2) at the reference point
        w.grad = (2.0 * w.data).astype(np.float32)
        opt.step(lr=0.1)
        m = 0.9 * m + 0.1 * g
        v = 0.98 * v + 0.02 * g * g
        mhat = m / (1 - 0.9**t)
        vhat = v / (1 - 0.98**t)
        ref = ref - 0.1 * mhat / (np.sqrt(vhat) + 1e-8)
        assert np.allclose(w.data, ref, atol=1e-5), t


def test_adam_skips_parameters_without_grad():
    w = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
    opt = Adam({"w": w})
    opt.step(lr=0.5)
    assert np.array_equal(w.data, np.ones(3, dtype=np.float32))


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

def test_batches_cover_corpus_once():
    examples = make_synthetic_corpus(37, seed=0)
    batches = make_batches(examples, batch_tokens=64, seed=1, epoch=0)
    flat = [e.image_id for b in batches for e in b]
    assert sorted(flat) == sorted(e.image_id for e in examples)


def test_batches_respect_token_budget():
    examples = make_synthetic_corpus(40, seed=0)
    for batch in make_batches(examples, batch_tokens=48, seed=0, epoch=0):
        tokens = sum(len(e.src) + len(e.tgt) for e in batch)
        assert tokens <= 48 or len(batch) == 1


def test_batches_deterministic_per_seed_and_epoch():
    examples = make_synthetic_corpus(25, seed=0)
    a = make_batches(examples, 64, seed=5, epoch=2)
    b = make_batches(examples, 64, seed=5, epoch=2)
    c = make_batches(examples, 64, seed=5, epoch=3)
    assert [[e.image_id for e in x] for x in a] == [[e.image_id for e in x] for x in b]
    assert [[e.image_id for e in x] for x in a] != [[e.image_id for e in x] for x in c]


# ---------------------------------------------------------------------------
# checkpoint averaging
# ---------------------------------------------------------------------------

def small_cfg():
    return ModelConfig(src_vocab=12, tgt_vocab=12, enc_layers=1, dec_layers=1,
                       d_model=8, d_ffn=12, heads=2, dropout=0.0, max_len=8)


def test_average_of_identical_checkpoints_is_identity(tmp_path):
    cfg = small_cfg()
    params = init_params(cfg, seed=0)
    paths = []
    for i in range(10):
        p = tmp_path / f"c{i}.mmtc"
        save_checkpoint(p, cfg, params)
        paths.append(p)
    _, avg = average_checkpoints(paths)
    for name in params:
        assert np.allclose(avg[name].data, params[name].data, atol=1e-7)


def test_average_zero_and_x_gives_half(tmp_path):
    cfg = small_cfg()
    params = init_params(cfg, seed=1)
    zeros = {n: Tensor(np.zeros_like(t.data), requires_grad=True) for n, t in params.items()}
    pa, pb = tmp_path / "a.mmtc", tmp_path / "b.mmtc"
    save_checkpoint(pa, cfg, zeros)
    save_checkpoint(pb, cfg, params)
    _, avg = average_checkpoints([pa, pb])
    for name in params:
        assert np.allclose(avg[name].data, params[name].data / 2, atol=1e-7)


def test_average_is_order_invariant_bitwise(tmp_path):
    cfg = small_cfg()
    paths = []
    for i in range(5):
        p = tmp_path / f"c{i}.mmtc"
        save_checkpoint(p, cfg, init_params(cfg, seed=i))
        paths.append(p)
    _, fwd = average_checkpoints(paths)
    _, rev = average_checkpoints(list(reversed(paths)))
    rng = np.random.default_rng(0)
    shuffled = [paths[i] for i in rng.permutation(5)]
    _, mix = average_checkpoints(shuffled)
    for name in fwd:
        assert np.array_equal(fwd[name].data, rev[name].data)
        assert np.array_equal(fwd[name].data, mix[name].data)


def test_average_rejects_config_mismatch(tmp_path):
    cfg_a = small_cfg()
    cfg_b = ModelConfig(src_vocab=12, tgt_vocab=12, enc_layers=2, dec_layers=1,
                        d_model=8, d_ffn=12, heads=2, dropout=0.0, max_len=8)
    pa, pb = tmp_path / "a.mmtc", tmp_path / "b.mmtc"
    save_checkpoint(pa, cfg_a, init_params(cfg_a, seed=0))
    save_checkpoint(pb, cfg_b, init_params(cfg_b, seed=0))
    with pytest.raises(CheckpointError):
        average_checkpoints([pa, pb])


def test_average_needs_at_least_one_path():
    with pytest.raises(ContractError):
        average_checkpoints([])


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def corpus_and_vocab(n=24, copy_task=True, seed=0):
    examples = make_synthetic_corpus(n, seed=seed, copy_task=copy_task)
    vocab = Vocab.build([e.src for e in examples] + [e.tgt for e in examples])
    return examples, vocab


def test_train_writes_checkpoints_and_log(tmp_path):
    examples, vocab = corpus_and_vocab()
    cfg = ModelConfig(src_vocab=len(vocab), tgt_vocab=len(vocab), enc_layers=1,
                      dec_layers=1, d_model=8, d_ffn=12, heads=2, dropout=0.0, max_len=32)
    model = TranslationModel.create(cfg, seed=0)
    tc = TrainConfig(batch_tokens=96, max_steps=12, validate_every=6, seed=0, log_every=4)
    result = train(model, examples, vocab, vocab, tc, tmp_path / "run")
    assert result.steps == 12
    assert len(result.checkpoint_paths) == 2
    assert (tmp_path / "run" / "train_log.tsv").exists()
    cfg_back, _ = load_checkpoint(result.checkpoint_paths[-1])
    assert cfg_back == cfg


def test_train_is_bit_reproducible(tmp_path):
    examples, vocab = corpus_and_vocab()
    cfg = ModelConfig(src_vocab=len(vocab), tgt_vocab=len(vocab), enc_layers=1,
                      dec_layers=1, d_model=8, d_ffn=12, heads=2, dropout=0.2, max_len=32)

    def run(tag):
        model = TranslationModel.create(cfg, seed=7)
        tc = TrainConfig(batch_tokens=96, max_steps=10, validate_every=5, seed=7, log_every=1)
        result = train(model, examples, vocab, vocab, tc, tmp_path / tag)
        from pathlib import Path
        return result.log_rows, [Path(p).read_bytes() for p in result.checkpoint_paths]

    rows_a, ckpts_a = run("a")
    rows_b, ckpts_b = run("b")
    assert rows_a == rows_b
    assert ckpts_a == ckpts_b


def test_train_divergence_aborts_with_step(tmp_path):
    examples, vocab = corpus_and_vocab()
    cfg = ModelConfig(src_vocab=len(vocab), tgt_vocab=len(vocab), enc_layers=1,
                      dec_layers=1, d_model=8, d_ffn=12, heads=2, dropout=0.0, max_len=32)
    model = TranslationModel.create(cfg, seed=0)
    tc = TrainConfig(batch_tokens=96, max_steps=50, validate_every=100, seed=0,
                     peak_lr=1e9, floor_lr=1e8, warmup=2)
    with np.errstate(all="ignore"), pytest.raises(DivergenceError) as err:
        train(model, examples, vocab, vocab, tc, tmp_path / "run")
    assert err.value.step > 0


@pytest.fixture(scope="module")
def noiseless_runs(tmp_path_factory):
    """Selective-attention and text-only models trained on sigma=0 signals."""
    from planted_experiment import build_experiment_data, model_config

    from mmtprobe.model import TranslationModel, stack_features

    data = build_experiment_data(n_train=1200, n_test=60, sigma=0.0, seed=4)
    base = tmp_path_factory.mktemp("noiseless")
    models = {}
    losses = {}
    for mode in ("selective_attention", "text_only"):
        cfg = model_config(data, mode)
        model = TranslationModel.create(cfg, seed=0)
        tc = TrainConfig(batch_tokens=1024, max_steps=500, validate_every=10**6,
                         seed=0, warmup=2000, log_every=10**6)
        feats = data.train_features if mode != "text_only" else None
        train(model, data.train_examples, data.src_vocab, data.tgt_vocab, tc,
              base / mode, features=feats)
        if mode != "text_only":
            arr, has_cls = stack_features(data.test_features, data.test_examples)
        else:
            arr, has_cls = None, False
        loss = model.forward_loss(data.test_examples, data.src_vocab, data.tgt_vocab,
                                  features=arr, has_cls=has_cls)
        models[mode] = model
        losses[mode] = float(loss.data)
    return data, models, losses


def test_selective_attention_beats_text_only_on_noiseless_signals(noiseless_runs):
    # With sigma=0 the masked words' embeddings sit verbatim in the patch
    # features, so the fusion model must reach a strictly lower validation
    # loss than text-only at the same step budget.
    _, _, losses = noiseless_runs
    assert losses["selective_attention"] < losses["text_only"], losses


def test_masked_tokens_attend_to_planted_patches(noiseless_runs, tmp_path):
    from mmtprobe.evaluation import dump_attention

    data, models, _ = noiseless_runs
    model = models["selective_attention"]
    hits = total = 0
    for idx in range(6):
        example = data.test_examples[idx]
        record = data.test_features[idx]
        weights = dump_attention(model, example.src, data.src_vocab,
                                 record.patches, tmp_path / f"a{idx}.csv")
        assert np.all(np.abs(weights.sum(axis=1) - 1.0) < 1e-6)
        planted_rows = {row for _, row in data.plan[example.image_id]}
        for pos, tok in enumerate(example.src):
            if tok.startswith("[MASK"):
                total += 1
                hits += int(np.argmax(weights[pos]) in planted_rows)
    assert hits >= total - 1, f"only {hits}/{total} masked tokens found a planted patch"


def test_train_early_stops_on_stalled_bleu(tmp_path):
    examples, vocab = corpus_and_vocab(n=16)
    val = examples[:4]
    cfg = ModelConfig(src_vocab=len(vocab), tgt_vocab=len(vocab), enc_layers=1,
                      dec_layers=1, d_model=8, d_ffn=12, heads=2, dropout=0.0, max_len=32)
    model = TranslationModel.create(cfg, seed=0)
    # Tiny floor/peak so parameters barely move: BLEU cannot improve.
    tc = TrainConfig(batch_tokens=96, max_steps=400, validate_every=4, patience=3,
                     seed=0, peak_lr=1e-9, floor_lr=1e-10, warmup=1000)
    result = train(model, examples, vocab, vocab, tc, tmp_path / "run",
                   val_examples=val)
    assert result.stopped_early
    assert result.steps < 400

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmtprobe.corpus import ParallelExample
from mmtprobe.errors import ContractError, FormatError, GenerationError
from mmtprobe.features import (
    PAPER_REGIMES,
    FeatureRegime,
    PatchFeatures,
    SyntheticSpec,
    build_signal_table,
    expected_file_size,
    generate_synthetic,
    read_features,
    shuffle_incongruent,
    write_features,
)
from mmtprobe.masking import MaskRecord, MaskedExample

from oracles import nearest_neighbor_decode


def make_records(n, p=4, d=6, seed=0, has_cls=False):
    rng = np.random.default_rng(seed)
    return [
        PatchFeatures(f"img{i}", rng.standard_normal((p, d)).astype(np.float32), has_cls)
        for i in range(n)
    ]


# ---------------------------------------------------------------------------
# file format
# ---------------------------------------------------------------------------

def test_round_trip_field_for_field(tmp_path):
    records = make_records(3, has_cls=True)
    path = tmp_path / "f.mmtf"
    write_features(records, path)
    back = read_features(path)
    assert len(back) == 3
    for a, b in zip(records, back):
        assert a.image_id == b.image_id
        assert a.has_cls == b.has_cls
        assert np.array_equal(a.patches, b.patches)


def test_round_trip_bitwise(tmp_path):
    records = make_records(4)
    p1, p2 = tmp_path / "a.mmtf", tmp_path / "b.mmtf"
    write_features(records, p1)
    write_features(read_features(p1), p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_corrupted_magic_rejected(tmp_path):
    path = tmp_path / "f.mmtf"
    write_features(make_records(2), path)
    blob = bytearray(path.read_bytes())
    blob[0] = ord("X")
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError, match="magic"):
        read_features(path)


def test_truncated_file_rejected_with_offset(tmp_path):
    path = tmp_path / "f.mmtf"
    write_features(make_records(2), path)
    blob = path.read_bytes()
    path.write_bytes(blob[:-10])
    with pytest.raises(FormatError, match="byte offset"):
        read_features(path)


def test_impossible_shape_rejected(tmp_path):
    path = tmp_path / "f.mmtf"
    write_features(make_records(1, p=2, d=2), path)
    blob = bytearray(path.read_bytes())
    # Record header starts after magic+version+count+id_len+id: corrupt p.
    offset = 4 + 4 + 8 + 2 + 4 + 1
    blob[offset: offset + 4] = (2**31).to_bytes(4, "little")
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError):
        read_features(path)


def test_trailing_garbage_rejected(tmp_path):
    path = tmp_path / "f.mmtf"
    write_features(make_records(1), path)
    path.write_bytes(path.read_bytes() + b"zz")
    with pytest.raises(FormatError, match="trailing"):
        read_features(path)


def test_file_size_arithmetic_577x768(tmp_path):
    rng = np.random.default_rng(0)
    rec = PatchFeatures("img0", rng.standard_normal((577, 768)).astype(np.float32), True)
    path = tmp_path / "big.mmtf"
    write_features([rec], path)
    expect = expected_file_size(["img0"], 577, 768)
    assert path.stat().st_size == expect
    assert expect == (4 + 4 + 8) + (2 + 4 + 1 + 4 + 4 + 4 * 577 * 768)


def test_inconsistent_dims_rejected(tmp_path):
    records = make_records(1, d=6) + make_records(1, d=7, seed=1)
    with pytest.raises(ContractError, match="dimension"):
        write_features(records, tmp_path / "f.mmtf")


def test_paper_regimes_cover_declared_lengths():
    lengths = {r.p for r in PAPER_REGIMES.values()}
    assert lengths == {577, 197, 145, 50, 49}
    assert not PAPER_REGIMES["swin_224_4"].has_cls


# ---------------------------------------------------------------------------
# synthetic planted signals
# ---------------------------------------------------------------------------

def synth_spec(sigma=0.5, seed=0, p=10, d=16, has_cls=False, pps=1):
    regime = FeatureRegime("fixture", p, d, has_cls)
    vocab = ["dog", "hat", "ball", "kite", "drum"]
    return SyntheticSpec(vocab=vocab, regime=regime, sigma=sigma,
                         patches_per_signal=pps, seed=seed)


def masked_fixture(words_per_example):
    examples, masks = [], []
    for i, words in enumerate(words_per_example):
        tokens = ["a"] + list(words)
        masked = ["a"] + ["[MASK_N]"] * len(words)
        recs = [MaskRecord(j + 1, "N", w) for j, w in enumerate(words)]
        examples.append(ParallelExample(tokens, tokens, image_id=f"img{i}"))
        masks.append(MaskedExample(tokens, masked, recs))
    return examples, masks


def test_sigma_zero_plants_exact_embeddings():
    spec = synth_spec(sigma=0.0)
    examples, masks = masked_fixture([["dog"], ["hat", "ball"]])
    records, plan = generate_synthetic(examples, masks, spec, return_plan=True)
    table = build_signal_table(spec)
    for rec, (ex, mask) in zip(records, zip(examples, masks)):
        planted_rows = {row: word for word, row in plan[rec.image_id]}
        for row in range(rec.p):
            if row in planted_rows:
                idx = spec.word_index[planted_rows[row]]
                assert np.allclose(rec.patches[row], table[idx], atol=1e-6)
            else:
                assert np.allclose(rec.patches[row], 0.0)


def test_no_masks_means_pure_noise():
    spec = synth_spec(sigma=0.7)
    examples, masks = masked_fixture([[]])
    (rec,) = generate_synthetic(examples, masks, spec)
    assert rec.patches.shape == (10, 16)
    assert np.all(np.abs(rec.patches) < 6 * 0.7)


def test_unplantable_word_raises():
    spec = synth_spec()
    examples, masks = masked_fixture([["zebra"]])
    with pytest.raises(GenerationError, match="zebra"):
        generate_synthetic(examples, masks, spec)


def test_synthetic_determinism():
    spec_a = synth_spec(sigma=0.5, seed=9)
    spec_b = synth_spec(sigma=0.5, seed=9)
    examples, masks = masked_fixture([["dog"], ["ball", "kite"]])
    rec_a = generate_synthetic(examples, masks, spec_a)
    rec_b = generate_synthetic(examples, masks, spec_b)
    for a, b in zip(rec_a, rec_b):
        assert np.array_equal(a.patches, b.patches)


def test_regime_consistency():
    spec = synth_spec(p=7, d=5, has_cls=True)
    examples, masks = masked_fixture([["dog"]])
    (rec,) = generate_synthetic(examples, masks, spec)
    assert rec.p == 7 and rec.d_img == 5 and rec.has_cls


def test_cls_row_is_mean_of_body():
    spec = synth_spec(p=6, has_cls=True, sigma=0.3)
    examples, masks = masked_fixture([["dog", "hat"]])
    (rec,) = generate_synthetic(examples, masks, spec)
    assert np.allclose(rec.patches[0], rec.patches[1:].mean(axis=0), atol=1e-6)


def test_nearest_neighbor_oracle_degrades_with_noise():
    words = [["dog", "hat"], ["ball"], ["kite", "drum"], ["dog", "ball"]] * 6
    examples, masks = masked_fixture(words)
    accuracies = []
    for sigma in (0.0, 0.5, 1.0, 2.0):
        spec = synth_spec(sigma=sigma, seed=3)
        records, plan = generate_synthetic(examples, masks, spec, return_plan=True)
        table = build_signal_table(spec)
        hits = total = 0
        for rec in records:
            decoded = nearest_neighbor_decode(rec.patches, table)
            for word, row in plan[rec.image_id]:
                hits += int(decoded[row] == spec.word_index[word])
                total += 1
        accuracies.append(hits / total)
    assert accuracies[0] == 1.0
    assert all(a >= b - 1e-9 for a, b in zip(accuracies, accuracies[1:])), accuracies
    assert accuracies[-1] < accuracies[0]


def test_patches_per_signal_plants_multiple_rows():
    spec = synth_spec(sigma=0.0, pps=3)
    examples, masks = masked_fixture([["dog"]])
    records, plan = generate_synthetic(examples, masks, spec, return_plan=True)
    assert len(plan["img0"]) == 3
    assert len({row for _, row in plan["img0"]}) == 3


def test_too_many_signals_rejected():
    spec = synth_spec(p=3, pps=2)
    examples, masks = masked_fixture([["dog", "hat"]])
    with pytest.raises(GenerationError, match="fit"):
        generate_synthetic(examples, masks, spec)


# ---------------------------------------------------------------------------
# incongruent shuffling
# ---------------------------------------------------------------------------

def test_two_records_swap():
    records = make_records(2)
    out = shuffle_incongruent(records, seed=0)
    assert np.array_equal(out[0].patches, records[1].patches)
    assert np.array_equal(out[1].patches, records[0].patches)
    assert [r.image_id for r in out] == ["img0", "img1"]


def test_derangement_five_records_deterministic():
    records = make_records(5)
    a = shuffle_incongruent(records, seed=42)
    b = shuffle_incongruent(records, seed=42)
    for x, y in zip(a, b):
        assert np.array_equal(x.patches, y.patches)
    for i, rec in enumerate(a):
        assert not np.array_equal(rec.patches, records[i].patches)


def test_different_seeds_both_derangements():
    records = make_records(6)
    for seed in (1, 2):
        out = shuffle_incongruent(records, seed=seed)
        for i, rec in enumerate(out):
            assert not np.array_equal(rec.patches, records[i].patches)


def test_single_record_rejected():
    with pytest.raises(ContractError):
        shuffle_incongruent(make_records(1), seed=0)


@given(st.integers(2, 12), st.integers(0, 1000))
@settings(max_examples=60, deadline=None)
def test_derangement_property(n, seed):
    records = make_records(n, p=2, d=2)
    out = shuffle_incongruent(records, seed=seed)
    originals = {r.image_id: r.patches for r in records}
    for rec in out:
        assert not np.array_equal(rec.patches, originals[rec.image_id])
    # Payload multiset is preserved.
    before = sorted(r.patches.tobytes() for r in records)
    after = sorted(r.patches.tobytes() for r in out)
    assert before == after

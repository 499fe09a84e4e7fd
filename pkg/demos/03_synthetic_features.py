"""Planted-signal features: generation, nearest-neighbor decoding across
noise levels, the binary file round trip, and incongruent shuffling."""

import tempfile
from pathlib import Path

import numpy as np

from mmtprobe.corpus import ParallelExample
from mmtprobe.features import (
    FeatureRegime,
    SyntheticSpec,
    build_signal_table,
    generate_synthetic,
    read_features,
    shuffle_incongruent,
    write_features,
)
from mmtprobe.masking import MaskRecord, MaskedExample

words = ["dog", "hat", "ball", "kite", "drum", "rope"]
regime = FeatureRegime("demo", p=20, d_img=32, has_cls=True)

examples, masks = [], []
rng = np.random.default_rng(0)
for i in range(8):
    pair = [words[rng.integers(len(words))], words[rng.integers(len(words))]]
    tokens = ["a", pair[0], "and", "a", pair[1]]
    examples.append(ParallelExample(tokens, tokens, image_id=f"img{i}"))
    masks.append(MaskedExample(tokens, ["a", "[MASK_N]", "and", "a", "[MASK_N]"],
                               [MaskRecord(1, "N", pair[0]), MaskRecord(4, "N", pair[1])]))

print("== nearest-neighbor decode vs noise level ==")
for sigma in (0.0, 0.5, 1.0, 2.0):
    spec = SyntheticSpec(vocab=words, regime=regime, sigma=sigma, seed=7)
    records, plan = generate_synthetic(examples, masks, spec, return_plan=True)
    table = build_signal_table(spec)
    hits = total = 0
    for rec in records:
        decoded = np.argmax(rec.patches @ table.T, axis=1)
        for word, row in plan[rec.image_id]:
            hits += int(decoded[row] == spec.word_index[word])
            total += 1
    print(f"  sigma={sigma:3.1f}: planted-word recovery {hits}/{total}")

print("\n== file round trip ==")
spec = SyntheticSpec(vocab=words, regime=regime, sigma=0.5, seed=7)
records = generate_synthetic(examples, masks, spec)
with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "demo.mmtf"
    write_features(records, path)
    back = read_features(path)
    same = all(np.array_equal(a.patches, b.patches) for a, b in zip(records, back))
    print(f"  wrote {path.stat().st_size} bytes; bitwise round trip: {same}")

print("\n== incongruent shuffling (seeded derangement) ==")
shuffled = shuffle_incongruent(records, seed=3)
moved = sum(not np.array_equal(a.patches, b.patches)
            for a, b in zip(records, shuffled))
print(f"  records keeping their own payload: {len(records) - moved} (must be 0)")

"""Insufficient-text construction: color, character, and progressive noun
masking over the bundled lexicon."""

from mmtprobe.masking import (
    MaskLexicon,
    bundled_lexicon_path,
    build_probing_corpus,
    mask_character,
    mask_color,
    mask_nouns,
    sidecar_records,
)

lexicon = MaskLexicon.from_tsv(bundled_lexicon_path())
sentence = "a man in a red suit performing motorcycle stunts".split()

print("SRC :", " ".join(sentence))
print("Color :", " ".join(mask_color(sentence, lexicon).masked))
print("Char. :", " ".join(mask_character(sentence, lexicon).masked))
for k in (1, 2, 3, 4):
    print(f"MASK{k} :", " ".join(mask_nouns(sentence, lexicon, k).masked))

print("\nEach mask records (position, category, original):")
for rec in mask_nouns(sentence, lexicon, 4).records:
    print(f"  pos {rec.position}: {rec.category:2s} <- {rec.original}")

print("\nSidecar rows carry the reference-side target forms for scoring:")
corpus = [sentence, "two people hold flowers near a blue car".split()]
masked = build_probing_corpus(corpus, lexicon, "color")
for row in sidecar_records(masked, lexicon):
    print(f"  line {row.line_no} pos {row.position} {row.category} "
          f"{row.original} -> {row.forms_string()}")

print("\nRound trip: restoring originals reproduces the sentence exactly:")
restored = masked[0].restore()
print(" ", " ".join(restored))
assert restored == sentence

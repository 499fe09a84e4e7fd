"""Tokenized parallel corpora, vocabularies, and synthetic fixture data.

Corpus files are UTF-8, one pre-tokenized sentence per line, tokens
separated by single spaces. Image ids align line-by-line with the corpus;
when no id file is given, line numbers become ids ("line000000", ...).
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, CorpusError

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
SPECIALS = (PAD, BOS, EOS, UNK)
PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3


@dataclass
class ParallelExample:
    """One sentence pair plus its image-feature reference and mask records."""

    src: list[str]
    tgt: list[str]
    image_id: str = ""
    masks: list = field(default_factory=list)


class Vocab:
    """Deterministic token <-> id mapping with reserved specials."""

    def __init__(self, tokens: list[str]):
        self.itos = list(SPECIALS) + [t for t in tokens if t not in SPECIALS]
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    def __len__(self) -> int:
        return len(self.itos)

    @classmethod
    def build(cls, sentences, max_size: int | None = None) -> "Vocab":
        """Frequency-descending vocabulary; ties break lexicographically."""
        counts = Counter()
        for sent in sentences:
            counts.update(sent)
        ordered = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        tokens = [t for t, _ in ordered]
        if max_size is not None:
            tokens = tokens[: max(0, max_size - len(SPECIALS))]
        return cls(tokens)

    def encode(self, tokens: list[str]) -> list[int]:
        unk = self.stoi[UNK]
        return [self.stoi.get(t, unk) for t in tokens]

    def decode(self, ids) -> list[str]:
        return [self.itos[int(i)] for i in ids]

    def save(self, path):
        Path(path).write_text("\n".join(self.itos) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if lines[: len(SPECIALS)] != list(SPECIALS):
            raise CorpusError(f"{path}: not a vocabulary file (bad specials header)")
        v = cls.__new__(cls)
        v.itos = lines
        v.stoi = {t: i for i, t in enumerate(lines)}
        return v


def read_token_lines(path) -> list[list[str]]:
    """Read a tokenized corpus; raises CorpusError naming the bad line."""
    out = []
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CorpusError(f"{path}: {exc}") from exc
    for lineno, line in enumerate(raw.split(b"\n"), start=1):
        if lineno == raw.count(b"\n") + 1 and not line:
            break  # trailing newline
        try:
            text = line.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CorpusError(f"{path}: line {lineno}: invalid UTF-8") from exc
        out.append(text.split())
    return out


def write_token_lines(path, sentences) -> None:
    text = "\n".join(" ".join(s) for s in sentences)
    Path(path).write_text(text + "\n" if text else "", encoding="utf-8")


def default_image_ids(n: int) -> list[str]:
    return [f"line{i:06d}" for i in range(n)]


def read_image_ids(path) -> list[str]:
    ids = [l.strip() for l in Path(path).read_text(encoding="utf-8").splitlines()]
    return [i for i in ids if i]


def load_parallel(src_path, tgt_path, ids_path=None) -> list[ParallelExample]:
    src = read_token_lines(src_path)
    tgt = read_token_lines(tgt_path)
    if len(src) != len(tgt):
        raise CorpusError(
            f"parallel corpus length mismatch: {src_path} has {len(src)} lines, "
            f"{tgt_path} has {len(tgt)}"
        )
    ids = read_image_ids(ids_path) if ids_path else default_image_ids(len(src))
    if len(ids) != len(src):
        raise CorpusError(f"{ids_path}: {len(ids)} ids for {len(src)} sentences")
    return [ParallelExample(s, t, i) for s, t, i in zip(src, tgt, ids)]


# ---------------------------------------------------------------------------
# synthetic fixtures
# ---------------------------------------------------------------------------

_SYN_COLORS = ["red", "green", "blue", "white", "black", "yellow", "orange", "purple"]
_SYN_CHARACTERS = ["man", "woman", "people", "men", "girl", "boy"]
_SYN_VERBS = ["holds", "watches", "paints", "carries", "rides", "follows",
              "pushes", "cleans", "draws", "finds", "lifts", "drops",
              "throws", "catches", "buys"]
_SYN_NOUNS_SG = ["dog", "bike", "hat", "ball", "chair", "guitar", "kite", "cup",
                 "lamp", "book", "drum", "sign", "cart", "rope", "bell", "coat",
                 "fence", "brush", "stone", "wheel", "boat", "cake", "door",
                 "flag", "glove", "horn", "jar", "knife", "ladder", "mask",
                 "nail", "oven", "pipe", "quilt", "rug", "shoe", "tent",
                 "vase", "whistle", "yarn"]
_SYN_NOUNS_PL = ["flowers", "boxes", "ropes", "tools", "drums", "stones",
                 "wheels", "books", "signs", "coats", "cables", "plates",
                 "towels", "bricks", "shells", "spoons", "straps", "tiles",
                 "cones", "hooks"]


def synthetic_word_sets() -> dict:
    """Word pools used by the synthetic corpus; nouns carry a plural flag."""
    return {
        "colors": list(_SYN_COLORS),
        "characters": list(_SYN_CHARACTERS),
        "verbs": list(_SYN_VERBS),
        "nouns_sg": list(_SYN_NOUNS_SG),
        "nouns_pl": list(_SYN_NOUNS_PL),
    }


def target_form(word: str, variant: int = 0) -> str:
    """Deterministic synthetic target-language form of a source word.

    variant > 0 selects an inflected alternative (used to give some words
    several reference-side forms so restrict < relaxed is observable).
    """
    base = f"{word}_t"
    return base if variant == 0 else f"{base}{variant}"


def two_form_nouns() -> set[str]:
    """Nouns whose target side alternates between two inflections."""
    sets = synthetic_word_sets()
    return {w for i, w in enumerate(sorted(sets["nouns_sg"] + sets["nouns_pl"]))
            if i % 3 == 0}


def make_synthetic_corpus(n: int, seed: int, copy_task: bool = False):
    """Build n parallel examples over a small closed vocabulary.

    Sentences follow the fixed template
        a <color> <noun> <verb> a <color> <noun-or-plural>
    so every sentence has the same length and two maskable nouns. The
    target side is the word-by-word mapping under target_form, where the
    two_form_nouns alternate between two inflections (chosen per sentence
    by the seeded rng). copy_task=True instead sets target = source, the
    standard trainability sanity check.
    """
    rng = np.random.default_rng(seed)
    sets = synthetic_word_sets()
    two_form = two_form_nouns()
    examples = []
    for idx in range(n):
        c1, c2 = rng.choice(sets["colors"], size=2)
        n1 = str(rng.choice(sets["nouns_sg"]))
        if rng.random() < 0.5:
            n2 = str(rng.choice(sets["nouns_pl"]))
        else:
            n2 = str(rng.choice(sets["nouns_sg"]))
        verb = str(rng.choice(sets["verbs"]))
        src = ["a", str(c1), n1, verb, "a", str(c2), n2]
        if copy_task:
            tgt = list(src)
        else:
            tgt = []
            for w in src:
                if w in two_form and rng.random() < 0.5:
                    tgt.append(target_form(w, 1))
                else:
                    tgt.append(target_form(w))
        examples.append(ParallelExample(src, tgt, image_id=f"img{idx:06d}"))
    return examples


def synthetic_lexicon_tsv() -> str:
    """Lexicon rows covering the synthetic corpus, in the lexicon TSV format.

    Every noun's frequency rank is its position in a fixed arbitrary order;
    two-form words list both inflections in one lemma group.
    """
    sets = synthetic_word_sets()
    two_form = two_form_nouns()

    def forms(word):
        if word in two_form:
            return f"{target_form(word)},{target_form(word, 1)}"
        return target_form(word)

    rows = []
    for w in sets["colors"]:
        rows.append(f"color\t{w}\t-\t-\t{forms(w)}")
    for w in sets["characters"]:
        rows.append(f"character\t{w}\t-\t-\t{forms(w)}")
    rank = 1
    for w in sets["nouns_sg"]:
        rows.append(f"noun\t{w}\ts\t{rank}\t{forms(w)}")
        rank += 1
    for w in sets["nouns_pl"]:
        rows.append(f"noun\t{w}\tp\t{rank}\t{forms(w)}")
        rank += 1
    return "\n".join(rows) + "\n"


def token_accuracy(logits_argmax: np.ndarray, targets: np.ndarray, pad_id: int) -> float:
    """Teacher-forced next-token accuracy over non-pad positions."""
    mask = targets != pad_id
    total = int(mask.sum())
    if total == 0:
        raise ContractError("token accuracy over an all-pad batch")
    return float((logits_argmax[mask] == targets[mask]).sum() / total)

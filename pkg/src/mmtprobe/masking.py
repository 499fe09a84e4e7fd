"""Insufficient-text construction: color, character, and noun masking.

Masking is deterministic and token-exact: a lexicon lists the source words
of each category together with their reference-side target forms, and the
maskers replace matching tokens with the category's mask symbol. Noun
masking is progressive: level k masks the k most frequent noun candidates
of the sentence (plural-tagged nouns get the plural mask symbol).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .errors import ContractError, CorpusError

MASK_COLOR = "[MASK_C]"
MASK_CHAR = "[MASK_P]"
MASK_NOUN = "[MASK_N]"
MASK_NOUN_PLURAL = "[MASK_NS]"

MASK_TOKENS = {"C": MASK_COLOR, "P": MASK_CHAR, "N": MASK_NOUN, "NS": MASK_NOUN_PLURAL}

DEFAULT_CHARACTER_WORDS = ("man", "woman", "people", "men", "girl", "boy")

NOUN_TASKS = {f"noun{k}": k for k in (1, 2, 3, 4)}


@dataclass(frozen=True)
class LexiconEntry:
    word: str
    category: str  # color | character | noun
    plural: bool
    rank: int | None
    form_groups: tuple  # tuple of tuples of target forms, one tuple per lemma

    def all_forms(self) -> list[str]:
        return [f for group in self.form_groups for f in group]


@dataclass
class MaskRecord:
    position: int
    category: str  # C | P | N | NS
    original: str


@dataclass
class MaskedExample:
    original: list[str]
    masked: list[str]
    records: list[MaskRecord] = field(default_factory=list)

    def restore(self) -> list[str]:
        """Substitute the recorded originals back; must reproduce original."""
        out = list(self.masked)
        for rec in self.records:
            out[rec.position] = rec.original
        return out


class MaskLexicon:
    """Word -> category -> target-form mappings driving masking and scoring.

    Colors and characters must not overlap nouns' color set; a word may be
    both a character and a noun (progressive noun masking can then reach
    it at deep levels).
    """

    def __init__(self, entries: list[LexiconEntry]):
        self.colors: dict[str, LexiconEntry] = {}
        self.characters: dict[str, LexiconEntry] = {}
        self.nouns: dict[str, LexiconEntry] = {}
        by_cat = {"color": self.colors, "character": self.characters, "noun": self.nouns}
        for e in entries:
            if e.category not in by_cat:
                raise ContractError(f"unknown lexicon category {e.category!r} for {e.word!r}")
            if e.word in by_cat[e.category]:
                raise ContractError(f"duplicate lexicon entry for {e.category} {e.word!r}")
            by_cat[e.category][e.word] = e
        self._validate()

    def _validate(self):
        overlap = set(self.colors) & (set(self.characters) | set(self.nouns))
        if overlap:
            raise ContractError(f"color words overlap another category: {sorted(overlap)}")
        for e in self.colors.values():
            if not e.all_forms():
                raise ContractError(f"color {e.word!r} has no target forms")
        for e in self.nouns.values():
            if e.rank is None:
                raise ContractError(f"noun {e.word!r} is missing a frequency rank")

    def entry(self, word: str, category: str) -> LexiconEntry:
        table = {"C": self.colors, "P": self.characters, "N": self.nouns, "NS": self.nouns}
        return table[category][word]

    @classmethod
    def from_tsv(cls, path) -> "MaskLexicon":
        """Parse the lexicon TSV: category, word, number tag, rank, forms.

        The forms column separates lemma groups with ';' and forms within
        a group with ','.
        """
        entries = []
        text = Path(path).read_text(encoding="utf-8")
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip() or line.startswith("#"):
                continue
            cols = line.rstrip("\n").split("\t")
            if len(cols) != 5:
                raise CorpusError(f"{path}: line {lineno}: expected 5 columns, got {len(cols)}")
            category, word, number_tag, rank_s, forms_s = cols
            if number_tag not in ("s", "p", "-"):
                raise CorpusError(f"{path}: line {lineno}: bad number tag {number_tag!r}")
            rank = None
            if rank_s != "-":
                try:
                    rank = int(rank_s)
                except ValueError:
                    raise CorpusError(f"{path}: line {lineno}: bad rank {rank_s!r}") from None
            groups = tuple(
                tuple(f for f in group.split(",") if f)
                for group in forms_s.split(";")
                if group
            )
            entries.append(
                LexiconEntry(word.casefold(), category, number_tag == "p", rank, groups)
            )
        return cls(entries)


def _mask_by_set(tokens, words: dict, category: str) -> MaskedExample:
    masked = list(tokens)
    records = []
    for pos, tok in enumerate(tokens):
        if tok.casefold() in words:
            masked[pos] = MASK_TOKENS[category]
            records.append(MaskRecord(pos, category, tok))
    return MaskedExample(list(tokens), masked, records)


def mask_color(tokens, lexicon: MaskLexicon) -> MaskedExample:
    """Replace every color word with the color mask symbol."""
    return _mask_by_set(tokens, lexicon.colors, "C")


def mask_character(tokens, lexicon: MaskLexicon) -> MaskedExample:
    """Replace every character word (man, woman, ...) with the person mask."""
    return _mask_by_set(tokens, lexicon.characters, "P")


def mask_nouns(tokens, lexicon: MaskLexicon, k: int) -> MaskedExample:
    """Mask the k most frequent noun candidates of the sentence.

    Candidates are ranked by corpus frequency (best rank first), ties
    broken by earlier sentence position, so the masked set at level k is a
    subset of the set at level k+1. Plural-tagged nouns receive the plural
    mask symbol.
    """
    if k not in (1, 2, 3, 4):
        raise ContractError(f"noun masking level must be in 1..4, got {k}")
    candidates = []
    for pos, tok in enumerate(tokens):
        entry = lexicon.nouns.get(tok.casefold())
        if entry is not None:
            candidates.append((entry.rank, pos, tok, entry))
    candidates.sort(key=lambda c: (c[0], c[1]))
    masked = list(tokens)
    records = []
    for rank, pos, tok, entry in candidates[: min(k, len(candidates))]:
        cat = "NS" if entry.plural else "N"
        masked[pos] = MASK_TOKENS[cat]
        records.append(MaskRecord(pos, cat, tok))
    records.sort(key=lambda r: r.position)
    return MaskedExample(list(tokens), masked, records)


def apply_task(tokens, lexicon: MaskLexicon, task: str) -> MaskedExample:
    if task == "color":
        return mask_color(tokens, lexicon)
    if task == "character":
        return mask_character(tokens, lexicon)
    if task in NOUN_TASKS:
        return mask_nouns(tokens, lexicon, NOUN_TASKS[task])
    raise ContractError(
        f"unknown probing task {task!r}; expected color, character, or noun1..noun4"
    )


def build_probing_corpus(sentences, lexicon: MaskLexicon, task: str) -> list[MaskedExample]:
    """Apply one masking task to every sentence; deterministic."""
    return [apply_task(sent, lexicon, task) for sent in sentences]


# ---------------------------------------------------------------------------
# sidecar: mask -> original word -> reference-side target forms
# ---------------------------------------------------------------------------

@dataclass
class SidecarRecord:
    line_no: int
    position: int
    category: str
    original: str
    form_groups: tuple

    def forms_string(self) -> str:
        return ";".join(",".join(group) for group in self.form_groups)

    def all_forms(self) -> list[str]:
        return [f for group in self.form_groups for f in group]


def sidecar_records(masked: list[MaskedExample], lexicon: MaskLexicon) -> list[SidecarRecord]:
    out = []
    for line_no, ex in enumerate(masked):
        for rec in ex.records:
            entry = lexicon.entry(rec.original.casefold(), rec.category)
            out.append(
                SidecarRecord(line_no, rec.position, rec.category, rec.original, entry.form_groups)
            )
    return out


def write_sidecar(records: list[SidecarRecord], path) -> None:
    lines = [
        f"{r.line_no}\t{r.position}\t{r.category}\t{r.original}\t{r.forms_string()}"
        for r in records
    ]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def read_sidecar(path) -> list[SidecarRecord]:
    records = []
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) != 5:
            raise CorpusError(f"{path}: line {lineno}: expected 5 columns, got {len(cols)}")
        line_no_s, pos_s, category, original, forms_s = cols
        if category not in MASK_TOKENS:
            raise CorpusError(f"{path}: line {lineno}: bad category {category!r}")
        groups = tuple(tuple(f for f in g.split(",") if f) for g in forms_s.split(";") if g)
        records.append(SidecarRecord(int(line_no_s), int(pos_s), category, original, groups))
    return records


def bundled_lexicon_path() -> Path:
    """Path of the lexicon fixture shipped with the package."""
    return Path(__file__).parent / "data" / "probing_lexicon.tsv"

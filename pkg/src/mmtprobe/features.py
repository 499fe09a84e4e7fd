"""Patch-feature records: binary file format, synthetic generation, shuffling.

File format (all integers little-endian):
    magic "MMTF", version u32, record count u64; then per record:
    id_len u16 + UTF-8 id, has_cls u8, p u32, d u32,
    p*d float32 values row-major.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError, GenerationError

MAGIC = b"MMTF"
VERSION = 1

# Patch-sequence lengths of the stock vision backbones: (resolution/patch)^2
# segments plus a CLS row where the backbone emits one.
PAPER_REGIMES = {
    "vit_384_16": None,  # filled below
}


@dataclass(frozen=True)
class FeatureRegime:
    """A named (patch count, feature dim) layout for one backbone setting."""

    name: str
    p: int
    d_img: int
    has_cls: bool = True

    def __post_init__(self):
        if self.p < 1:
            raise ContractError(f"regime {self.name}: patch count must be >= 1")


PAPER_REGIMES = {
    "vit_384_16": FeatureRegime("vit_384_16", 577, 768, True),
    "vit_224_16": FeatureRegime("vit_224_16", 197, 768, True),
    "vit_384_32": FeatureRegime("vit_384_32", 145, 768, True),
    "vit_224_32": FeatureRegime("vit_224_32", 50, 768, True),
    "swin_224_4": FeatureRegime("swin_224_4", 49, 768, False),
}


@dataclass
class PatchFeatures:
    """Per-image sequence of patch vectors; row 0 is CLS when has_cls."""

    image_id: str
    patches: np.ndarray  # [p, d_img] float32
    has_cls: bool = False

    def __post_init__(self):
        self.patches = np.ascontiguousarray(self.patches, dtype=np.float32)
        if self.patches.ndim != 2 or self.patches.shape[0] < 1:
            raise ContractError(
                f"{self.image_id}: patches must be a [p>=1, d] matrix, got {self.patches.shape}"
            )

    @property
    def p(self) -> int:
        return self.patches.shape[0]

    @property
    def d_img(self) -> int:
        return self.patches.shape[1]


@dataclass
class SyntheticSpec:
    """Recipe for planted-signal features.

    Every maskable word in `vocab` owns one unit-norm row of a seeded
    signal table; generation hides that row (plus sigma-scaled noise) in
    `patches_per_signal` randomly chosen patch rows per masked word, and
    fills the rest with pure noise at the same scale. sigma is the
    noise-to-signal norm ratio: a noise row has expected norm sigma while
    signal rows have norm 1, so sigma is a direct SNR knob.

    signal_marker sets the weight of a component shared by all signal
    rows (rows stay unit-norm). It is what makes planted patches linearly
    detectable among noise, the way real object patches share structure;
    the orthogonal remainder carries the word identity.
    """

    vocab: list[str]
    regime: FeatureRegime
    sigma: float = 0.5
    patches_per_signal: int = 1
    seed: int = 0
    signal_marker: float = 0.5
    word_index: dict = field(init=False, repr=False)

    def __post_init__(self):
        if self.sigma < 0:
            raise ContractError(f"noise scale must be >= 0, got {self.sigma}")
        if self.patches_per_signal < 1:
            raise ContractError("patches_per_signal must be >= 1")
        if not 0.0 <= self.signal_marker < 1.0:
            raise ContractError(f"signal_marker must be in [0, 1), got {self.signal_marker}")
        self.vocab = sorted(dict.fromkeys(self.vocab))
        self.word_index = {w: i for i, w in enumerate(self.vocab)}


def _stable_id_hash(image_id: str) -> int:
    digest = hashlib.sha256(image_id.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def build_signal_table(spec: SyntheticSpec) -> np.ndarray:
    """Unit-norm signal embedding per plantable word, [len(vocab), d_img].

    Rows combine a shared marker direction (weight spec.signal_marker)
    with a word-specific direction orthogonalized against it.
    """
    d = spec.regime.d_img
    rng = np.random.default_rng([spec.seed, 0xE5])
    marker = rng.standard_normal(d)
    marker /= np.linalg.norm(marker)
    raw = rng.standard_normal((len(spec.vocab), d))
    raw -= np.outer(raw @ marker, marker)
    raw /= np.linalg.norm(raw, axis=1, keepdims=True)
    beta = spec.signal_marker
    table = beta * marker + np.sqrt(1.0 - beta * beta) * raw
    return table.astype(np.float32)


def _noise(rng: np.random.Generator, shape, sigma: float) -> np.ndarray:
    """Isotropic rows with expected norm sigma (relative to unit signals)."""
    d = shape[-1]
    return (sigma / np.sqrt(d)) * rng.standard_normal(shape)


def generate_synthetic(examples, masks, spec: SyntheticSpec, return_plan: bool = False):
    """Planted-signal features for a masked corpus, one record per example.

    masks[i] is the MaskedExample for examples[i]; each of its recorded
    masked words gets signal patches. Deterministic given (spec.seed,
    image_id). With return_plan=True also returns, per image id, the list
    of (word, patch_row) plantings.
    """
    if len(examples) != len(masks):
        raise ContractError(
            f"one mask record per example required: {len(examples)} examples, {len(masks)} masks"
        )
    table = build_signal_table(spec)
    regime = spec.regime
    body_rows = regime.p - 1 if regime.has_cls else regime.p
    records = []
    plan: dict[str, list[tuple[str, int]]] = {}
    for example, masked in zip(examples, masks):
        words = [rec.original for rec in masked.records]
        for w in words:
            if w not in spec.word_index:
                raise GenerationError(f"masked word {w!r} is not in the plantable vocabulary")
        n_signal = len(words) * spec.patches_per_signal
        if n_signal > body_rows:
            raise GenerationError(
                f"{example.image_id}: {n_signal} signal patches do not fit in {body_rows} rows"
            )
        rng = np.random.default_rng([spec.seed, _stable_id_hash(example.image_id)])
        patches = _noise(rng, (regime.p, regime.d_img), spec.sigma).astype(np.float32)
        rows = rng.choice(body_rows, size=n_signal, replace=False) if n_signal else np.array([], int)
        offset = 1 if regime.has_cls else 0
        plantings = []
        for k, w in enumerate(words):
            for j in range(spec.patches_per_signal):
                row = int(rows[k * spec.patches_per_signal + j]) + offset
                patches[row] += table[spec.word_index[w]]
                plantings.append((w, row))
        if regime.has_cls:
            patches[0] = patches[1:].mean(axis=0)
        records.append(PatchFeatures(example.image_id, patches, has_cls=regime.has_cls))
        plan[example.image_id] = plantings
    if return_plan:
        return records, plan
    return records


def shuffle_incongruent(records: list[PatchFeatures], seed: int) -> list[PatchFeatures]:
    """Reassign payloads across image ids by a seeded derangement.

    No record keeps its own payload; with two records the payloads swap.
    """
    n = len(records)
    if n < 2:
        raise ContractError("incongruent shuffling needs at least 2 records (no derangement of 1)")
    rng = np.random.default_rng(seed)
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == np.arange(n)):
            break
    return [
        PatchFeatures(records[i].image_id, records[perm[i]].patches, records[perm[i]].has_cls)
        for i in range(n)
    ]


# ---------------------------------------------------------------------------
# file format
# ---------------------------------------------------------------------------

def write_features(records: list[PatchFeatures], path) -> None:
    if records:
        d = records[0].d_img
        for r in records:
            if r.d_img != d:
                raise ContractError(
                    f"inconsistent feature dimension: {r.image_id} has d={r.d_img}, expected {d}"
                )
    chunks = [MAGIC, struct.pack("<I", VERSION), struct.pack("<Q", len(records))]
    for r in records:
        ident = r.image_id.encode("utf-8")
        if len(ident) > 0xFFFF:
            raise ContractError(f"image id too long: {len(ident)} bytes")
        chunks.append(struct.pack("<H", len(ident)))
        chunks.append(ident)
        chunks.append(struct.pack("<BII", 1 if r.has_cls else 0, r.p, r.d_img))
        chunks.append(np.ascontiguousarray(r.patches, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf = buf
        self.pos = 0
        self.path = str(path)

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"{self.path}: truncated while reading {what}", offset=self.pos)
        out = self.buf[self.pos: self.pos + n]
        self.pos += n
        return out


def read_features(path) -> list[PatchFeatures]:
    """Read and validate a feature file; rejects bad files with no partial result."""
    r = _Reader(Path(path).read_bytes(), path)
    if r.take(4, "magic") != MAGIC:
        raise FormatError(f"{r.path}: bad magic (expected {MAGIC!r})", offset=0)
    (version,) = struct.unpack("<I", r.take(4, "version"))
    if version != VERSION:
        raise FormatError(f"{r.path}: unsupported version {version}", offset=4)
    (count,) = struct.unpack("<Q", r.take(8, "record count"))
    records = []
    for i in range(count):
        (id_len,) = struct.unpack("<H", r.take(2, f"record {i} id length"))
        ident = r.take(id_len, f"record {i} id").decode("utf-8")
        has_cls, p, d = struct.unpack("<BII", r.take(9, f"record {i} header"))
        if p < 1 or d < 1 or p * d * 4 > len(r.buf):
            raise FormatError(
                f"{r.path}: record {i} declares impossible shape {p}x{d}", offset=r.pos - 8
            )
        payload = r.take(p * d * 4, f"record {i} payload")
        patches = np.frombuffer(payload, dtype="<f4").reshape(p, d)
        records.append(PatchFeatures(ident, patches.copy(), bool(has_cls)))
    if r.pos != len(r.buf):
        raise FormatError(f"{r.path}: {len(r.buf) - r.pos} trailing bytes", offset=r.pos)
    return records


def expected_file_size(ids: list[str], p: int, d: int) -> int:
    """Exact byte size of a feature file with the given records."""
    size = 4 + 4 + 8
    for ident in ids:
        size += 2 + len(ident.encode("utf-8")) + 1 + 4 + 4 + 4 * p * d
    return size

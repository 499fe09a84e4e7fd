"""Writer for the MMTF patch-feature wire format.

Layout (all integers little-endian): magic "MMTF", version u32, record
count u64; per record: id_len u16 + UTF-8 id, has_cls u8, p u32, d u32,
then p*d float32 values row-major. This mirrors the format the consumer
package reads; the exporter keeps its own implementation of the format so
the two sides only meet at the bytes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"MMTF"
VERSION = 1


@dataclass
class FeatureRecord:
    image_id: str
    patches: np.ndarray  # [p, d] float32
    has_cls: bool

    def __post_init__(self):
        self.patches = np.ascontiguousarray(self.patches, dtype=np.float32)
        if self.patches.ndim != 2 or self.patches.shape[0] < 1:
            raise ValueError(f"{self.image_id}: patches must be [p>=1, d]")


def write_mmtf(records: list[FeatureRecord], path) -> None:
    if records:
        d = records[0].patches.shape[1]
        mismatched = [r.image_id for r in records if r.patches.shape[1] != d]
        if mismatched:
            raise ValueError(f"inconsistent feature dimensions for: {mismatched}")
    chunks = [MAGIC, struct.pack("<I", VERSION), struct.pack("<Q", len(records))]
    for rec in records:
        ident = rec.image_id.encode("utf-8")
        chunks.append(struct.pack("<H", len(ident)))
        chunks.append(ident)
        p, d = rec.patches.shape
        chunks.append(struct.pack("<BII", 1 if rec.has_cls else 0, p, d))
        chunks.append(np.ascontiguousarray(rec.patches, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))

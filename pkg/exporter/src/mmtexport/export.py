"""Export job: run one backbone over an image directory and write MMTF."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

from PIL import Image, UnidentifiedImageError

from .backbones import Backbone, BackboneError, build_backbone, expected_patch_rows
from .mmtf import FeatureRecord, write_mmtf

log = logging.getLogger("mmtexport")

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".webp"}


@dataclass
class ExportJob:
    images: Path
    backbone: str
    resolution: int
    patch: int
    out: Path
    weights: str = "pretrained"
    seed: int = 0

    def __post_init__(self):
        self.images = Path(self.images)
        self.out = Path(self.out)
        if self.resolution not in (224, 384):
            raise BackboneError(f"resolution must be 224 or 384, got {self.resolution}")
        if self.patch not in (4, 16, 32):
            raise BackboneError(f"patch size must be 4, 16, or 32, got {self.patch}")


@dataclass
class ExportSummary:
    written: int = 0
    skipped: list[str] = field(default_factory=list)
    rows_per_record: int = 0
    d_img: int = 0


def list_images(directory: Path) -> list[Path]:
    """Image files sorted by filename stem so output order is stable."""
    if not directory.is_dir():
        raise BackboneError(f"{directory} is not a directory")
    paths = [p for p in directory.iterdir()
             if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES]
    return sorted(paths, key=lambda p: (p.stem, p.name))


def export(job: ExportJob) -> ExportSummary:
    """Write one feature record per readable image; skip unreadable ones."""
    backbone: Backbone = build_backbone(job.backbone, job.resolution, job.patch,
                                        weights=job.weights, seed=job.seed)
    expected_rows, _ = expected_patch_rows(job.backbone, job.resolution, job.patch)
    summary = ExportSummary(rows_per_record=expected_rows, d_img=backbone.d_img)
    records: list[FeatureRecord] = []
    for path in list_images(job.images):
        try:
            with Image.open(path) as img:
                batch = backbone.preprocess(img)
        except (OSError, UnidentifiedImageError) as exc:
            log.warning("skipping unreadable image %s: %s", path.name, exc)
            summary.skipped.append(path.name)
            continue
        feats = backbone.extract(batch)[0]
        records.append(FeatureRecord(path.stem, feats, backbone.has_cls))
    if not records:
        raise BackboneError(f"no readable images under {job.images}")
    write_mmtf(records, job.out)
    summary.written = len(records)
    return summary

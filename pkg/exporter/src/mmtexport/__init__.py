"""mmtexport: patch-feature exporter for vision backbones.

Runs ViT/Swin/DETR/captioning encoders over image folders and writes the
MMTF feature files consumed by the mmtprobe workbench.
"""

from .backbones import BACKBONE_NAMES, Backbone, BackboneError, build_backbone, expected_patch_rows
from .export import ExportJob, ExportSummary, export, list_images
from .mmtf import FeatureRecord, write_mmtf

__version__ = "0.1.0"

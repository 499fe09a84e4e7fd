"""Vision backbone registry: general backbones (ViT, Swin), object
detection (DETR), and image captioning (CATR-style ViT encoder).

Each entry knows how to build its torch module at a given resolution and
patch size, how to preprocess an image, and how many feature rows one
image yields. Weights come from the hub when --weights pretrained is
requested and reachable; --weights random builds the same architecture
with a seeded initialization (enough for format/regime validation and
offline runs).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from PIL import Image


class BackboneError(RuntimeError):
    """Backbone unknown, misconfigured, or weights unobtainable."""


VIT_SIZES = {
    # hidden, layers, heads, mlp
    "vit_tiny": (192, 12, 3, 768),
    "vit_small": (384, 12, 6, 1536),
    "vit_base": (768, 12, 12, 3072),
    "vit_large": (1024, 24, 16, 4096),
}

SWIN_SIZES = {
    # embed_dim, depths, heads
    "swin_tiny": (96, [2, 2, 6, 2], [3, 6, 12, 24]),
    "swin_small": (96, [2, 2, 18, 2], [3, 6, 12, 24]),
    "swin_base": (128, [2, 2, 18, 2], [4, 8, 16, 32]),
    "swin_large": (192, [2, 2, 18, 2], [6, 12, 24, 48]),
}

VIT_PRETRAINED = {
    ("vit_base", 384, 16): "google/vit-base-patch16-384",
    ("vit_base", 224, 16): "google/vit-base-patch16-224-in21k",
    ("vit_base", 384, 32): "google/vit-base-patch32-384",
    ("vit_base", 224, 32): "google/vit-base-patch32-224-in21k",
    ("vit_large", 384, 16): "google/vit-large-patch16-384",
}

BACKBONE_NAMES = tuple(VIT_SIZES) + tuple(SWIN_SIZES) + ("detr", "queryinst", "catr")


@dataclass
class Backbone:
    name: str
    model: torch.nn.Module
    expected_rows: int
    d_img: int
    has_cls: bool
    resolution: int
    mean: float = 0.5
    std: float = 0.5

    def preprocess(self, image: Image.Image) -> torch.Tensor:
        img = image.convert("RGB").resize((self.resolution, self.resolution),
                                          Image.BICUBIC)
        arr = np.asarray(img, dtype=np.float32) / 255.0
        arr = (arr - self.mean) / self.std
        return torch.from_numpy(arr.transpose(2, 0, 1))[None]

    @torch.no_grad()
    def extract(self, batch: torch.Tensor) -> np.ndarray:
        out = self._forward(batch)
        feats = out.float().cpu().numpy()
        if feats.shape[1] != self.expected_rows:
            raise BackboneError(
                f"{self.name}: produced {feats.shape[1]} rows, expected {self.expected_rows}"
            )
        return feats

    def _forward(self, batch: torch.Tensor) -> torch.Tensor:
        return self.model(pixel_values=batch).last_hidden_state


class _DetrBackbone(Backbone):
    def _forward(self, batch: torch.Tensor) -> torch.Tensor:
        masks = torch.ones(batch.shape[0], batch.shape[2], batch.shape[3],
                           dtype=torch.long, device=batch.device)
        out = self.model(pixel_values=batch, pixel_mask=masks)
        return out.encoder_last_hidden_state


def expected_patch_rows(name: str, resolution: int, patch: int) -> tuple[int, bool]:
    """Row count and CLS presence for a backbone at a given geometry."""
    if name in VIT_SIZES or name == "catr":
        return (resolution // patch) ** 2 + 1, True
    if name in SWIN_SIZES:
        return (resolution // 32) ** 2, False
    if name == "detr":
        return (resolution // 32) ** 2, False
    raise BackboneError(f"unknown backbone {name!r}; expected one of {BACKBONE_NAMES}")


def build_backbone(name: str, resolution: int, patch: int,
                   weights: str = "pretrained", seed: int = 0) -> Backbone:
    """Construct a backbone in eval mode.

    weights: "pretrained" loads hub weights (raises BackboneError when they
    cannot be obtained); "random" builds the architecture with a seeded
    initialization.
    """
    if weights not in ("pretrained", "random"):
        raise BackboneError(f"weights must be pretrained or random, got {weights!r}")
    if name not in BACKBONE_NAMES:
        raise BackboneError(f"unknown backbone {name!r}; expected one of {BACKBONE_NAMES}")
    if name == "queryinst":
        raise BackboneError(
            "queryinst weights are not obtainable in this environment "
            "(no instance-segmentation implementation is installed)"
        )
    rows, has_cls = expected_patch_rows(name, resolution, patch)
    torch.manual_seed(seed)

    if name in VIT_SIZES or name == "catr":
        from transformers import ViTConfig, ViTModel

        hidden, layers, heads, mlp = VIT_SIZES["vit_base" if name == "catr" else name]
        if weights == "pretrained":
            repo = VIT_PRETRAINED.get(("vit_base" if name == "catr" else name,
                                       resolution, patch))
            if name == "catr":
                return _load_catr(resolution, patch, rows, seed)
            if repo is None:
                raise BackboneError(
                    f"no pretrained weights registered for {name} at "
                    f"{resolution}/{patch}; use --weights random"
                )
            try:
                model = ViTModel.from_pretrained(repo)
            except Exception as exc:  # hub unreachable, bad cache, ...
                raise BackboneError(f"could not obtain {repo}: {exc}") from exc
        else:
            cfg = ViTConfig(hidden_size=hidden, num_hidden_layers=layers,
                            num_attention_heads=heads, intermediate_size=mlp,
                            image_size=resolution, patch_size=patch)
            model = ViTModel(cfg)
        model.eval()
        return Backbone(name, model, rows, model.config.hidden_size, has_cls, resolution)

    if name in SWIN_SIZES:
        from transformers import SwinConfig, SwinModel

        embed, depths, heads = SWIN_SIZES[name]
        if patch != 4:
            raise BackboneError(f"{name} uses 4x4 patches; got {patch}")
        if weights == "pretrained":
            repo = f"microsoft/{name.replace('_', '-')}-patch4-window7-{resolution}"
            try:
                model = SwinModel.from_pretrained(repo)
            except Exception as exc:
                raise BackboneError(f"could not obtain {repo}: {exc}") from exc
        else:
            cfg = SwinConfig(image_size=resolution, patch_size=4, embed_dim=embed,
                             depths=depths, num_heads=heads)
            model = SwinModel(cfg)
        model.eval()
        d = model.config.embed_dim * 2 ** (len(model.config.depths) - 1)
        return Backbone(name, model, rows, d, has_cls, resolution)

    # detr: encoder over a (non-timm) ResNet backbone
    from transformers import DetrConfig, DetrModel, ResNetConfig

    if weights == "pretrained":
        try:
            model = DetrModel.from_pretrained("facebook/detr-resnet-50")
        except Exception as exc:
            raise BackboneError(f"could not obtain facebook/detr-resnet-50: {exc}") from exc
    else:
        backbone_cfg = ResNetConfig(out_features=["stage4"])
        cfg = DetrConfig(use_timm_backbone=False, backbone_config=backbone_cfg,
                         num_queries=25, encoder_layers=2, decoder_layers=2)
        model = DetrModel(cfg)
    model.eval()
    d = model.config.d_model
    bb = _DetrBackbone("detr", model, rows, d, has_cls, resolution)
    # DETR's CNN normalization expects ImageNet statistics.
    bb.mean, bb.std = 0.45, 0.225
    return bb


def _load_catr(resolution: int, patch: int, rows: int, seed: int) -> Backbone:
    """Captioning features: the ViT encoder of a captioning checkpoint."""
    from transformers import VisionEncoderDecoderModel

    try:
        full = VisionEncoderDecoderModel.from_pretrained(
            "nlpconnect/vit-gpt2-image-captioning")
    except Exception as exc:
        raise BackboneError(f"could not obtain captioning encoder: {exc}") from exc
    model = full.encoder
    model.eval()
    if model.config.image_size != resolution:
        raise BackboneError(
            f"captioning encoder is pretrained at {model.config.image_size}px; "
            f"requested {resolution}px (use --weights random for other sizes)"
        )
    return Backbone("catr", model, rows, model.config.hidden_size, True, resolution)

"""Image encoder registry.

Two families are available:

* ``clip-vit-b16``: the pretrained CLIP ViT-B/16 image tower (512-d
  embeddings) through ``transformers``; needs the optional ``clip`` extra
  and downloadable/cached weights.
* ``projection-<dim>``: a deterministic offline encoder: images are
  resized to a fixed grid and pushed through a frozen random projection
  seeded from the backbone name. No downloads, bit-stable across runs;
  intended for tests and air-gapped pipelines.
"""

from __future__ import annotations

import hashlib

import numpy as np
from PIL import Image

__all__ = ["BackboneError", "get_backbone", "ImageBackbone"]

DEFAULT_BACKBONE = "clip-vit-b16"


class BackboneError(RuntimeError):
    """Unknown backbone name or unavailable weights."""


class ImageBackbone:
    """Callable feature extractor over batches of PIL images."""

    name: str
    embed_dim: int

    def encode(self, images: list[Image.Image]) -> np.ndarray:
        raise NotImplementedError


class ProjectionBackbone(ImageBackbone):
    """Fixed random projection of downsampled pixels; deterministic."""

    GRID = 16  # images are resized to GRID x GRID RGB

    def __init__(self, embed_dim: int):
        self.name = f"projection-{embed_dim}"
        self.embed_dim = embed_dim
        # weights derive from the backbone name only, so re-export of the
        # same tree always yields identical bytes
        digest = hashlib.sha256(self.name.encode("utf-8")).digest()
        rng = np.random.default_rng(np.frombuffer(digest, dtype=np.uint64))
        in_dim = 3 * self.GRID * self.GRID
        self._weight = rng.standard_normal((in_dim, embed_dim)).astype(np.float32)
        self._weight /= np.sqrt(in_dim, dtype=np.float32)

    def encode(self, images: list[Image.Image]) -> np.ndarray:
        pixels = np.stack([
            np.asarray(
                img.convert("RGB").resize((self.GRID, self.GRID), Image.BILINEAR),
                dtype=np.float32,
            ).reshape(-1)
            / 255.0
            for img in images
        ])
        return pixels @ self._weight


class ClipBackbone(ImageBackbone):
    """CLIP image tower with projection head (512-d for ViT-B/16)."""

    MODEL_ID = "openai/clip-vit-base-patch16"

    def __init__(self):
        self.name = "clip-vit-b16"
        self.embed_dim = 512
        try:
            import torch
            from transformers import CLIPImageProcessor, CLIPVisionModelWithProjection
        except ImportError as exc:
            raise BackboneError(
                "clip-vit-b16 needs the optional 'clip' extra (torch + transformers)"
            ) from exc
        try:
            self._model = CLIPVisionModelWithProjection.from_pretrained(self.MODEL_ID)
        except OSError as exc:
            raise BackboneError(
                f"cannot load {self.MODEL_ID} weights (offline and not cached); "
                f"use a projection-<dim> backbone for air-gapped runs"
            ) from exc
        self._model.eval()
        self._processor = CLIPImageProcessor.from_pretrained(self.MODEL_ID)
        self._torch = torch

    def encode(self, images: list[Image.Image]) -> np.ndarray:
        inputs = self._processor(images=[img.convert("RGB") for img in images], return_tensors="pt")
        with self._torch.no_grad():
            out = self._model(**inputs)
        return out.image_embeds.numpy().astype(np.float32)


def get_backbone(name: str = DEFAULT_BACKBONE) -> ImageBackbone:
    if name == "clip-vit-b16":
        return ClipBackbone()
    if name.startswith("projection-"):
        try:
            dim = int(name.split("-", 1)[1])
        except ValueError as exc:
            raise BackboneError(f"bad projection width in {name!r}") from exc
        if dim < 1:
            raise BackboneError(f"bad projection width in {name!r}")
        return ProjectionBackbone(dim)
    raise BackboneError(f"unknown backbone {name!r}")

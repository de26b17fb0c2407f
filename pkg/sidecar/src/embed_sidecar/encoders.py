"""Image encoders producing unit-norm 512-dimensional embeddings.

Two encoders share one interface: the CLIP ViT-B/32 projection head (needs
pretrained weights on disk or a reachable hub) and a fully offline
deterministic tile-projection encoder used for fixtures and tests. The
emitted manifests record which encoder produced the vectors, so downstream
indices are self-describing.
"""

from __future__ import annotations

import math

import numpy as np
from PIL import Image, UnidentifiedImageError

EMBED_DIM = 512


class DecodeError(ValueError):
    """The image file could not be decoded."""


class EncoderUnavailable(RuntimeError):
    """The requested encoder cannot run in this environment."""


def load_rgb(path: str) -> Image.Image:
    try:
        image = Image.open(path)
        image.load()
        return image.convert("RGB")
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        raise DecodeError(f"{path}: {exc}") from exc


class TileProjectionEncoder:
    """Deterministic pixel-statistics encoder: tile means/stds and channel
    histograms pushed through a fixed seeded random projection.

    The projection seed is a constant because emitted vectors are a wire
    artifact; two installs must embed the same file identically.
    """

    model_id = "tile-projection-v1"
    dim = EMBED_DIM

    _SIZE = 64
    _GRID = 8
    _BINS = 32
    _SEED = 0x51DECA

    def __init__(self):
        feature_dim = self._GRID * self._GRID * 3 * 2 + self._BINS * 3
        rng = np.random.default_rng(self._SEED)
        self._projection = rng.standard_normal((feature_dim, self.dim)) / math.sqrt(feature_dim)

    def _features(self, image: Image.Image) -> np.ndarray:
        small = image.resize((self._SIZE, self._SIZE), Image.BILINEAR)
        pixels = np.asarray(small, dtype=np.float64) / 255.0  # (S, S, 3)
        tile = self._SIZE // self._GRID
        tiled = pixels.reshape(self._GRID, tile, self._GRID, tile, 3)
        means = tiled.mean(axis=(1, 3))
        stds = tiled.std(axis=(1, 3))
        hists = [
            np.histogram(pixels[:, :, ch], bins=self._BINS, range=(0.0, 1.0))[0]
            / pixels[:, :, ch].size
            for ch in range(3)
        ]
        return np.concatenate([means.ravel(), stds.ravel(), np.concatenate(hists)])

    def encode_path(self, path: str) -> np.ndarray:
        vector = self._features(load_rgb(path)) @ self._projection
        norm = float(np.linalg.norm(vector))
        if norm == 0.0:
            raise DecodeError(f"{path}: degenerate image produced a zero feature vector")
        return (vector / norm).astype(np.float32)


class ClipVitB32Encoder:
    """CLIP ViT-B/32 vision tower with projection head (512-d embeddings)."""

    model_id = "clip-vit-b32"
    dim = EMBED_DIM

    def __init__(self, checkpoint: str = "openai/clip-vit-base-patch32", device: str = "cpu"):
        try:
            import torch
            from transformers import CLIPImageProcessor, CLIPVisionModelWithProjection
        except ImportError as exc:
            raise EncoderUnavailable(
                "clip-vit-b32 needs the torch and transformers packages "
                "(install the sidecar's 'clip' extra)"
            ) from exc
        try:
            self._model = CLIPVisionModelWithProjection.from_pretrained(checkpoint).to(device).eval()
            self._processor = CLIPImageProcessor.from_pretrained(checkpoint)
        except Exception as exc:
            raise EncoderUnavailable(
                f"cannot load CLIP weights from {checkpoint!r}; pass a local checkpoint "
                f"directory if the model hub is unreachable ({exc})"
            ) from exc
        self._torch = torch
        self._device = device
        self.model_id = f"clip-vit-b32:{checkpoint}"

    def encode_path(self, path: str) -> np.ndarray:
        image = load_rgb(path)
        inputs = self._processor(images=image, return_tensors="pt").to(self._device)
        with self._torch.no_grad():
            embeds = self._model(**inputs).image_embeds[0]
        vector = embeds.cpu().numpy().astype(np.float64)
        return (vector / np.linalg.norm(vector)).astype(np.float32)


_ENCODERS = {
    TileProjectionEncoder.model_id: TileProjectionEncoder,
    "clip-vit-b32": ClipVitB32Encoder,
}

DEFAULT_MODEL = TileProjectionEncoder.model_id


def get_encoder(model: str = DEFAULT_MODEL, **kwargs):
    if model not in _ENCODERS:
        raise EncoderUnavailable(f"unknown encoder {model!r}; choices: {sorted(_ENCODERS)}")
    return _ENCODERS[model](**kwargs)

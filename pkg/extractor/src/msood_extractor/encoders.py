"""Frozen image and text encoders behind one small interface.

Encoders are looked up by identifier:

``toy-<d>``
    A deterministic pixel-projection encoder of width ``d`` for tests and
    plumbing checks. It needs no weights, runs anywhere, and produces
    bitwise-identical outputs on every run, so bundles built with it can
    be hashed for rerun comparisons.

``clip-vit-b16`` / ``clip-vit-b32``
    Pretrained contrastive vision-language models loaded through the
    ``transformers`` package (install the ``clip`` extra). Their weights
    must be available locally or downloadable through that ecosystem's
    standard cache path.

All encoders return raw, unnormalized feature vectors; any normalization
is left to the consumer.
"""

from __future__ import annotations

import hashlib
import re

import numpy as np

from .errors import EncoderError

__all__ = ["ClipEncoder", "Encoder", "ToyEncoder", "get_encoder"]

_TOY_PATTERN = re.compile(r"^toy-(\d+)$")
_CLIP_VARIANTS = {
    "clip-vit-b16": "openai/clip-vit-base-patch16",
    "clip-vit-b32": "openai/clip-vit-base-patch32",
}


class Encoder:
    """Interface shared by all encoders.

    ``encode_images`` takes a (B, S, S, 3) float32 stack with values in
    [0, 1], where S is ``input_size``, and returns (B, d) features.
    ``encode_texts`` takes prompt strings and returns (len(prompts), d).
    """

    name: str
    d: int
    input_size: int

    def encode_images(self, views: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def encode_texts(self, prompts: list[str]) -> np.ndarray:
        raise NotImplementedError

    def _check_views(self, views: np.ndarray) -> np.ndarray:
        views = np.asarray(views, dtype=np.float64)
        expected = (self.input_size, self.input_size, 3)
        if views.ndim != 4 or views.shape[1:] != expected:
            raise EncoderError(
                f"{self.name} expects a (B, {expected[0]}, {expected[1]}, 3) "
                f"stack, got {views.shape}"
            )
        return views


def _seed_from(text: str) -> int:
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "big")


class ToyEncoder(Encoder):
    """Deterministic linear projection of raw pixels, for plumbing tests.

    The projection matrix is derived from the encoder name alone, so two
    instances of the same identifier are interchangeable. Images are
    encoded row by row to keep results independent of batching.
    """

    input_size = 16

    def __init__(self, d: int) -> None:
        if d < 1:
            raise EncoderError(f"toy encoder width must be >= 1, got {d}")
        self.d = d
        self.name = f"toy-{d}"
        k = self.input_size * self.input_size * 3
        rng = np.random.default_rng(_seed_from(f"{self.name}:image"))
        self._projection = rng.standard_normal((d, k)) / np.sqrt(k)

    def encode_images(self, views: np.ndarray) -> np.ndarray:
        views = self._check_views(views)
        flat = views.reshape(views.shape[0], -1)
        return np.stack([self._projection @ row for row in flat])

    def encode_texts(self, prompts: list[str]) -> np.ndarray:
        rows = []
        for prompt in prompts:
            rng = np.random.default_rng(_seed_from(f"{self.name}:text:{prompt}"))
            rows.append(rng.standard_normal(self.d))
        return np.stack(rows)


class ClipEncoder(Encoder):
    """Frozen pretrained contrastive encoder from the transformers package."""

    input_size = 224
    _MEAN = np.array([0.48145466, 0.4578275, 0.40821073])
    _STD = np.array([0.26862954, 0.26130258, 0.27577711])

    def __init__(self, name: str) -> None:
        checkpoint = _CLIP_VARIANTS[name]
        try:
            import torch
            from transformers import CLIPModel, CLIPTokenizer
        except ImportError as exc:
            raise EncoderError(
                f"encoder {name!r} needs the optional torch and transformers "
                "dependencies; install this package with the [clip] extra"
            ) from exc
        self.name = name
        self._torch = torch
        self._model = CLIPModel.from_pretrained(checkpoint).eval()
        self._tokenizer = CLIPTokenizer.from_pretrained(checkpoint)
        self.d = int(self._model.config.projection_dim)

    def encode_images(self, views: np.ndarray) -> np.ndarray:
        views = self._check_views(views)
        normalized = (views - self._MEAN) / self._STD
        pixels = self._torch.from_numpy(
            normalized.transpose(0, 3, 1, 2).astype(np.float32)
        )
        with self._torch.no_grad():
            features = self._model.get_image_features(pixel_values=pixels)
        return features.cpu().numpy().astype(np.float64)

    def encode_texts(self, prompts: list[str]) -> np.ndarray:
        tokens = self._tokenizer(prompts, padding=True, return_tensors="pt")
        with self._torch.no_grad():
            features = self._model.get_text_features(**tokens)
        return features.cpu().numpy().astype(np.float64)


def get_encoder(identifier: str) -> Encoder:
    """Instantiate the encoder named by an identifier string."""
    match = _TOY_PATTERN.match(identifier)
    if match:
        return ToyEncoder(int(match.group(1)))
    if identifier in _CLIP_VARIANTS:
        return ClipEncoder(identifier)
    known = ", ".join(["toy-<d>", *sorted(_CLIP_VARIANTS)])
    raise EncoderError(f"unknown encoder {identifier!r}; known forms: {known}")

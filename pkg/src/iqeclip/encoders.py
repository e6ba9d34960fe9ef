"""Frozen stand-ins for the CLIP image and text towers.

Both encoders are randomly initialised from the backbone seed and frozen
immediately; only tensors injected from outside (prompt embeddings, learnable
prompting tokens) ever carry gradients through them.
"""
from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import RunConfig
from .nn import AttentionWithBias, LayerNorm, Linear, Module

PAD, UNK, CLS = 0, 1, 2
RESERVED = 3


class TokenizerError(ValueError):
    pass


class Tokenizer:
    """Whitespace tokenizer over a fixed word list (id = line index + 3)."""

    def __init__(self, words: list[str], capacity: int):
        self.words = list(words)
        self.capacity = capacity
        self.index = {}
        for i, w in enumerate(self.words):
            self.index.setdefault(w, i + RESERVED)

    @classmethod
    def from_file(cls, path=None, capacity: int = 32) -> "Tokenizer":
        if path:
            text = Path(path).read_text()
        else:
            text = resources.files("iqeclip").joinpath("vocab.txt").read_text()
        return cls([ln.strip() for ln in text.splitlines() if ln.strip()], capacity)

    @property
    def vocab_size(self) -> int:
        return len(self.words) + RESERVED

    def __contains__(self, word: str) -> bool:
        return word in self.index

    def token_id(self, word: str) -> int:
        return self.index.get(word, UNK)

    def tokenize(self, text: str) -> list[int]:
        ids = [CLS] + [self.token_id(w) for w in text.split()]
        if len(ids) > self.capacity:
            raise TokenizerError(f"prompt of {len(ids)} tokens exceeds capacity {self.capacity}")
        return ids


class TransformerLayer(Module):
    """Pre-norm encoder layer: self-attention then a relu MLP, both residual."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        self.ln1 = LayerNorm(dim)
        self.attn = AttentionWithBias(dim, heads, rng)
        self.ln2 = LayerNorm(dim)
        self.fc1 = Linear(dim, 4 * dim, rng)
        self.fc2 = Linear(4 * dim, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        h = self.ln1(x)
        x = x + self.attn(h, h, h)
        return x + self.fc2(ad.relu(self.fc1(self.ln2(x))))


@dataclass
class StageFeatures:
    """Patch tokens at the four tap layers plus the final class token."""

    features: list[np.ndarray]  # 4 x (..., G, d)
    x_cls: np.ndarray           # (..., d)

    def __post_init__(self):
        if len(self.features) != 4:
            raise ValueError(f"expected 4 stage features, got {len(self.features)}")
        g = self.features[0].shape[-2]
        if int(round(g ** 0.5)) ** 2 != g:
            raise ValueError(f"grid size {g} is not a perfect square")


class ImageEncoder(Module):
    def __init__(self, cfg: RunConfig, rng: np.random.Generator):
        self.image_size = cfg.image_size
        self.patch = cfg.patch
        self.channels = cfg.channels
        self.taps = tuple(cfg.taps)
        g = cfg.grid
        self.patch_embed = Linear(cfg.patch * cfg.patch * cfg.channels, cfg.d, rng)
        self.cls_token = Tensor(rng.normal(0.0, 0.5, size=(1, cfg.d)))
        self.positions = Tensor(rng.normal(0.0, 0.1, size=(g * g + 1, cfg.d)))
        self.layers = [TransformerLayer(cfg.d, cfg.img_heads, rng) for _ in range(cfg.img_layers)]
        self.freeze()

    def _patchify(self, images: np.ndarray) -> np.ndarray:
        b, h, w, c = images.shape
        p = self.patch
        x = images.reshape(b, h // p, p, w // p, p, c).transpose(0, 1, 3, 2, 4, 5)
        return x.reshape(b, (h // p) * (w // p), p * p * c)

    def prepare(self, images) -> np.ndarray:
        """Bring images to (B, H, W, channels), replicating grayscale."""
        x = np.asarray(images, dtype=ad.default_dtype())
        if x.ndim == 2:
            x = x[None, :, :, None]
        elif x.ndim == 3 and x.shape[-1] not in (1, self.channels):
            x = x[..., None]  # (B, H, W) stack of grayscale images
        elif x.ndim == 3:
            x = x[None]
        if x.shape[1:3] != (self.image_size, self.image_size):
            raise ValueError(f"expected {self.image_size}x{self.image_size} images, got {x.shape[1:3]}")
        if x.shape[-1] == 1:
            x = np.repeat(x, self.channels, axis=-1)
        return x

    def forward(self, images) -> StageFeatures:
        x = self.prepare(images)
        tokens = self.patch_embed(Tensor(self._patchify(x)))
        b = x.shape[0]
        cls = ad.broadcast_to(self.cls_token, (b, 1, self.cls_token.shape[-1]))
        h = ad.concat([cls, tokens], axis=1) + self.positions
        stages = []
        for depth, layer in enumerate(self.layers, 1):
            h = layer(h)
            if depth in self.taps:
                stages.append(h.data[:, 1:, :])
        return StageFeatures(stages, h.data[:, 0, :])


class TextEncoder(Module):
    def __init__(self, cfg: RunConfig, vocab_size: int, rng: np.random.Generator):
        self.depth_lpt = cfg.D
        self.token_embedding = Tensor(rng.normal(0.0, 0.5, size=(vocab_size, cfg.C)))
        self.positions = Tensor(rng.normal(0.0, 0.1, size=(cfg.context, cfg.C)))
        self.layers = [TransformerLayer(cfg.C, cfg.txt_heads, rng) for _ in range(cfg.txt_layers)]
        self.ln_final = LayerNorm(cfg.C)
        self.freeze()

    def embed(self, ids) -> Tensor:
        """Embedding lookup for integer ids of shape (..., N)."""
        return Tensor(self.token_embedding.data[np.asarray(ids)])

    def encode_text_layers(self, tokens: Tensor, lpt: list | None = None) -> Tensor:
        """Run all layers over embedded prompt tokens (..., N, C).

        With ``lpt`` given, layer ``l < D`` sees ``[lpt[l], tokens]`` and the
        injected positions are dropped from its output.
        """
        tokens = ad.as_tensor(tokens)
        n = tokens.shape[-2]
        if n > self.positions.shape[0]:
            raise ad.ShapeError(f"{n} tokens exceed context capacity {self.positions.shape[0]}")
        if lpt is not None and len(lpt) != self.depth_lpt:
            raise ValueError(f"expected {self.depth_lpt} injected token sets, got {len(lpt)}")
        x = tokens + self.positions[:n]
        for depth, layer in enumerate(self.layers):
            if lpt is not None and depth < self.depth_lpt:
                inject = ad.as_tensor(lpt[depth])
                m = inject.shape[-2]
                inject = ad.broadcast_to(inject, x.shape[:-2] + inject.shape[-2:])
                x = layer(ad.concat([inject, x], axis=-2))[..., m:, :]
            else:
                x = layer(x)
        return self.ln_final(x)

    def pool(self, hidden: Tensor) -> Tensor:
        """Class-token pooling: hidden state at position 0."""
        return hidden[..., 0, :]

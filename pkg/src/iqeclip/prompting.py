"""Normal/abnormal prompt construction and text embeddings."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoders import TextEncoder, Tokenizer
from .nn import Linear, Module

STATES = ("normal", "abnormal")
PREFIX = "a photo of a"


class CptMlp(Module):
    """Shared trunk ``relu(Linear(d -> C))`` with the class-token head ``C -> r*C``.

    The trunk output also feeds the IQM query initialiser.
    """

    def __init__(self, d: int, C: int, r: int, rng: np.random.Generator, zero: bool = False):
        self.r = r
        self.C = C
        self.trunk = Linear(d, C, rng, zero=zero)
        self.head_cpt = Linear(C, r * C, rng, zero=zero)

    def shared(self, x_cls) -> Tensor:
        return ad.relu(self.trunk(x_cls))

    def context(self, trunk_out: Tensor) -> Tensor:
        x = self.head_cpt(trunk_out)
        return x.reshape(x.shape[:-1] + (self.r, self.C))

    def forward(self, x_cls) -> Tensor:
        return self.context(self.shared(x_cls))


class PromptLearner(Module):
    """Learnable context ``v``, the CPT head and the per-layer LPT tokens."""

    def __init__(self, tokenizer: Tokenizer, encoder: TextEncoder, d: int, C: int, r: int,
                 M: int, D: int, rng: np.random.Generator,
                 use_cpt: bool = True, use_lpt: bool = True):
        for word in STATES:
            if word not in tokenizer:
                raise ValueError(f"state word {word!r} missing from vocabulary")
        self._tokenizer = tokenizer
        self._encoder = encoder
        self.use_cpt = use_cpt
        self.use_lpt = use_lpt
        self.context = Tensor(rng.normal(0.0, 0.02, size=(r, C)), requires_grad=True)
        self.cpt = CptMlp(d, C, r, rng)
        self.lpt = [Tensor(rng.normal(0.0, 0.02, size=(M, C)), requires_grad=True) for _ in range(D)]

    @property
    def r(self) -> int:
        return self.context.shape[0]

    def template_ids(self, state: str, class_word: str) -> list[int]:
        if state not in STATES:
            raise ValueError(f"state must be one of {STATES}, got {state!r}")
        return self._tokenizer.tokenize(f"{PREFIX} {state} {class_word}")

    def class_ids(self, class_words) -> np.ndarray:
        """Template ids for each class word, shape (B, 2, N_words)."""
        return np.array([[self.template_ids(s, w) for s in STATES] for w in class_words])

    def build(self, ids: np.ndarray, trunk_out: Tensor | None) -> Tensor:
        """Embedded prompt sequences P_c for a batch.

        ``ids`` is (B, 2, N_words); ``trunk_out`` is the shared CPT trunk
        output (B, C). Returns (B, 2, N_words + r, C).
        """
        words = self._encoder.embed(ids)
        b = ids.shape[0]
        slots = self.context
        if self.use_cpt and trunk_out is not None:
            x = self.cpt.context(trunk_out)                       # (B, r, C)
            slots = ad.reshape(x, (b, 1) + x.shape[1:]) + slots  # shared by both states
        slots = ad.broadcast_to(slots, (b, 2) + self.context.shape)
        return ad.concat([words, slots], axis=-2)

    def build_prompt(self, state: str, class_word: str, x_cls) -> Tensor:
        """Single prompt sequence (N, C) for one state and one image."""
        ids = np.array([[self.template_ids(s, class_word) for s in STATES]])
        trunk_out = self.cpt.shared(ad.reshape(ad.as_tensor(x_cls), (1, -1)))
        return self.build(ids, trunk_out)[0, STATES.index(state)]

    def encode(self, ids: np.ndarray, trunk_out: Tensor | None) -> Tensor:
        """Text embeddings F^T of shape (B, 2, C); row 0 normal, row 1 abnormal."""
        prompts = self.build(ids, trunk_out)
        hidden = self._encoder.encode_text_layers(prompts, self.lpt if self.use_lpt else None)
        return self._encoder.pool(hidden)

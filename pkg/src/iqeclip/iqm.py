"""Instance-aware query module: query init, per-stage adapters, attention blocks."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import FFN, AttentionWithBias, Linear, Module


class QueryInit(Module):
    """``concat(position_embedding[q], head(trunk(x_cls))[q])`` for q in (N, A)."""

    def __init__(self, C: int, rng: np.random.Generator, use_class: bool = True):
        half = C // 2
        self.use_class = use_class
        self.head_query = Linear(C, 2 * half, rng)
        self.position = Tensor(rng.normal(0.0, 1.0, size=(2, half)), requires_grad=True)

    def forward(self, trunk_out: Tensor) -> Tensor:
        b = trunk_out.shape[0]
        half = self.position.shape[1]
        if self.use_class:
            cls = self.head_query(trunk_out).reshape(b, 2, half)
        else:
            cls = Tensor(np.zeros((b, 2, half)))
        pos = ad.broadcast_to(self.position, (b, 2, half))
        return ad.concat([pos, cls], axis=-1)


class QueryAdapter(Module):
    """``A(relu(W x))`` with ``A = Linear(C, C/2) -> relu -> Linear(C/2, C)``."""

    def __init__(self, d: int, C: int, rng: np.random.Generator):
        self.proj = Linear(d, C, rng)
        self.down = Linear(C, C // 2, rng)
        self.up = Linear(C // 2, C, rng)

    def forward(self, x) -> Tensor:
        x = ad.as_tensor(x)
        if x.shape[-1] != self.proj.weight.shape[0]:
            raise ad.ShapeError(f"stage feature dim {x.shape[-1]} != {self.proj.weight.shape[0]}")
        return self.up(ad.relu(self.down(ad.relu(self.proj(x)))))


class IqmBlock(Module):
    """Self-attention, text cross-attention and image cross-attention, each with an FFN."""

    def __init__(self, C: int, heads: int, grid_tokens: int, rng: np.random.Generator,
                 zero_out: bool = False):
        hidden = 2 * C
        self.self_attn = AttentionWithBias(C, heads, rng, (2, 2), zero_out)
        self.self_ffn = FFN(C, hidden, rng, zero_out)
        self.text_attn = AttentionWithBias(C, heads, rng, (2, 2), zero_out)
        self.text_ffn = FFN(C, hidden, rng, zero_out)
        self.image_attn = AttentionWithBias(C, heads, rng, (2, grid_tokens), zero_out)
        self.image_ffn = FFN(C, hidden, rng, zero_out)

    def forward(self, q: Tensor, text: Tensor, image: Tensor,
                use_text: bool = True, use_image: bool = True) -> Tensor:
        q = self.self_ffn(self.self_attn(q, q, q), q)
        q_text = self.text_ffn(self.text_attn(q, text, text), q) if use_text else q
        if not use_image:
            return q_text
        # image attention queries the self-attended stream; the residual is the text-step output
        return self.image_ffn(self.image_attn(q, image, image), q_text)


class IQM(Module):
    def __init__(self, d: int, C: int, heads: int, blocks: int, grid_tokens: int,
                 rng: np.random.Generator, stages: int = 4, zero_out: bool = False,
                 use_class_init: bool = True, use_text: bool = True, use_image: bool = True):
        if blocks != stages:
            raise ValueError(f"stage-per-block binding needs {stages} blocks, got {blocks}")
        self.use_text = use_text
        self.use_image = use_image
        self.query_init = QueryInit(C, rng, use_class=use_class_init)
        self.adapters = [QueryAdapter(d, C, rng) for _ in range(stages)]
        self.blocks = [IqmBlock(C, heads, grid_tokens, rng, zero_out) for _ in range(blocks)]

    def init_query(self, trunk_out: Tensor) -> Tensor:
        return self.query_init(trunk_out)

    def adapt_features(self, stages) -> list[Tensor]:
        if len(stages) != len(self.adapters):
            raise ValueError(f"expected {len(self.adapters)} stages, got {len(stages)}")
        return [adapter(ad.as_tensor(s)) for adapter, s in zip(self.adapters, stages)]

    def run(self, q0: Tensor, text: Tensor, adapted: list[Tensor]) -> Tensor:
        if len(adapted) != len(self.blocks):
            raise ValueError(f"{len(self.blocks)} blocks need as many adapted stages, got {len(adapted)}")
        q = q0
        for block, image in zip(self.blocks, adapted):
            q = block(q, text, image, self.use_text, self.use_image)
        return q

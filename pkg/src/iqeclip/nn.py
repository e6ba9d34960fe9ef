"""Neural building blocks on top of :mod:`iqeclip.autodiff`."""
from __future__ import annotations

import hashlib
import math
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    """Minimal parameter container.

    Parameters are discovered by walking attributes: ``Tensor`` leaves with
    ``requires_grad`` set at construction, child ``Module`` objects and
    lists of either.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            yield from _walk(value, f"{prefix}{key}")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def freeze(self) -> "Module":
        for p in self.parameters():
            p.requires_grad = False
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _walk(value, name):
    if isinstance(value, Tensor):
        if value.is_leaf:
            yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(prefix=name + ".")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(item, f"{name}.{i}")


def checksum(params) -> str:
    """SHA-256 over parameter names, shapes and raw bytes."""
    h = hashlib.sha256()
    items = params.items() if isinstance(params, dict) else params
    for name, p in items:
        h.update(name.encode())
        h.update(str(p.shape).encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, zero: bool = False):
        if zero:
            self.weight = Tensor(np.zeros((n_in, n_out)), requires_grad=True)
            self.bias = Tensor(np.zeros(n_out), requires_grad=True)
        else:
            # non-zero bias: a layer whose relu inputs all die still emits a usable direction
            self.weight = uniform_init(rng, (n_in, n_out), n_in)
            self.bias = uniform_init(rng, (n_out,), n_in)

    @property
    def trainable(self) -> bool:
        return self.weight.requires_grad

    def forward(self, x) -> Tensor:
        x = ad.as_tensor(x)
        if x.shape[-1] != self.weight.shape[0]:
            raise ad.ShapeError(f"Linear expects last dim {self.weight.shape[0]}, got {x.shape}")
        return x @ self.weight + self.bias


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.weight = Tensor(np.ones(dim), requires_grad=True)
        self.bias = Tensor(np.zeros(dim), requires_grad=True)

    def forward(self, x) -> Tensor:
        return ad.layer_norm(x, self.weight, self.bias)


class AttentionWithBias(Module):
    """Multi-head attention with a learnable additive logit bias.

    ``softmax((Q K^T + bias[:Lq, :Lk]) / sqrt(head_dim)) V`` per head, heads
    concatenated and passed through the output projection. ``bias_shape``
    of ``None`` builds plain attention without a table.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator,
                 bias_shape: tuple[int, int] | None = None, zero_out: bool = False):
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.head_dim = dim // heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng, zero=zero_out)
        self.bias_table = (Tensor(np.zeros(bias_shape), requires_grad=True)
                           if bias_shape is not None else None)

    def _split(self, x: Tensor) -> Tensor:
        lead = x.shape[:-1]
        x = x.reshape(lead + (self.heads, self.head_dim))
        return ad.swapaxes(x, -2, -3)  # (..., heads, L, head_dim)

    def weights(self, q, k) -> Tensor:
        """Attention probabilities, shape (..., heads, Lq, Lk)."""
        q, k = ad.as_tensor(q), ad.as_tensor(k)
        if q.shape[-1] != self.heads * self.head_dim or k.shape[-1] != q.shape[-1]:
            raise ad.ShapeError(f"attention dim mismatch: q {q.shape}, k {k.shape}")
        qh = self._split(self.q(q))
        kh = self._split(self.k(k))
        logits = qh @ ad.swapaxes(kh, -1, -2)
        if self.bias_table is not None:
            lq, lk = q.shape[-2], k.shape[-2]
            mq, mk = self.bias_table.shape
            if lq > mq or lk > mk:
                raise ad.ShapeError(f"bias table {self.bias_table.shape} cannot cover ({lq}, {lk})")
            logits = logits + self.bias_table[:lq, :lk]
        return ad.softmax(ad.scale(logits, 1.0 / math.sqrt(self.head_dim)), axis=-1)

    def forward(self, q, k, v) -> Tensor:
        q, k, v = ad.as_tensor(q), ad.as_tensor(k), ad.as_tensor(v)
        if v.shape[-2] != k.shape[-2]:
            raise ad.ShapeError(f"keys and values differ in length: {k.shape} vs {v.shape}")
        attn = self.weights(q, k)
        mixed = attn @ self._split(self.v(v))           # (..., heads, Lq, head_dim)
        mixed = ad.swapaxes(mixed, -2, -3)
        mixed = mixed.reshape(mixed.shape[:-2] + (self.heads * self.head_dim,))
        return self.out(mixed)


class FFN(Module):
    """``residual + fc2(relu(fc1(layernorm(x))))``."""

    def __init__(self, dim: int, hidden: int, rng: np.random.Generator, zero_out: bool = False):
        self.norm = LayerNorm(dim)
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng, zero=zero_out)

    def forward(self, x, residual) -> Tensor:
        x, residual = ad.as_tensor(x), ad.as_tensor(residual)
        if x.shape != residual.shape:
            raise ad.ShapeError(f"ffn input {x.shape} and residual {residual.shape} differ")
        return residual + self.fc2(ad.relu(self.fc1(self.norm(x))))


class Adam:
    """Bias-corrected Adam over a name -> Tensor mapping."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}

    def step(self) -> None:
        live = {n: p for n, p in self.params.items() if p.requires_grad and p.grad is not None}
        for name, p in live.items():
            if not np.isfinite(p.grad).all():
                raise ad.NonFiniteError(f"non-finite gradient for parameter {name!r}; step aborted")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name, p in live.items():
            g = p.grad
            m = self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            v = self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

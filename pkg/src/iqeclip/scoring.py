"""Per-layer anomaly maps, branch fusion and the image-level score."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class AnomalyResult:
    maps_text: list[np.ndarray]
    maps_query: list[np.ndarray]
    fused: np.ndarray
    score: np.ndarray


def layer_map(adapted: Tensor, emb: Tensor, size: tuple[int, int]) -> Tensor:
    """Abnormal-vs-normal two-way softmax of cosine similarities, upsampled.

    adapted: (..., G, C) patch tokens; emb: (..., 2, C) rows (normal, abnormal).
    Returns (..., H, W) with values in (0, 1).
    """
    adapted, emb = ad.as_tensor(adapted), ad.as_tensor(emb)
    g = adapted.shape[-2]
    side = int(round(g ** 0.5))
    if side * side != g:
        raise ad.ShapeError(f"token count {g} is not a perfect square")
    if emb.shape[-2] != 2:
        raise ad.ShapeError(f"embedding needs 2 rows, got {emb.shape}")
    cos = ad.l2_normalize(adapted) @ ad.swapaxes(ad.l2_normalize(emb), -1, -2)  # (..., G, 2)
    prob = ad.softmax(cos, axis=-1)[..., 1]
    grid = prob.reshape(prob.shape[:-1] + (side, side))
    return ad.bilinear_upsample(grid, size)


def fuse(maps_query, maps_text, alpha: float):
    """``alpha * sum(query maps) + (1 - alpha) * sum(text maps)``.

    Works on Tensors (differentiable) or plain arrays.
    """
    shapes = {tuple(np.shape(_data(m))) for m in list(maps_query) + list(maps_text)}
    if len(shapes) != 1:
        raise ad.ShapeError(f"map shapes differ: {sorted(shapes)}")
    q_sum = _total(maps_query)
    t_sum = _total(maps_text)
    if any(isinstance(m, Tensor) for m in list(maps_query) + list(maps_text)):
        return ad.scale(q_sum, alpha) + ad.scale(t_sum, 1.0 - alpha)
    return alpha * q_sum + (1.0 - alpha) * t_sum


def _data(m):
    return m.data if isinstance(m, Tensor) else m


def _total(maps):
    total = maps[0]
    for m in maps[1:]:
        total = total + m
    return total


def anomaly_score(fused) -> np.ndarray:
    """Max over the trailing H x W axes."""
    arr = np.asarray(_data(fused))
    return arr.reshape(arr.shape[:-2] + (-1,)).max(axis=-1)


def to_display(fused: np.ndarray) -> np.ndarray:
    """Per-image min-max normalisation into [0, 1] for export."""
    lo, hi = float(fused.min()), float(fused.max())
    if hi - lo <= 0:
        return np.zeros_like(fused)
    return (fused - lo) / (hi - lo)

"""Focal + Dice + BCE-on-max segmentation objective."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import LOG_EPS, Tensor


@dataclass
class LossParams:
    gamma: float = 2.0
    balance: float = 0.25
    dice_eps: float = 1.0


def _const(x, like: Tensor) -> Tensor:
    return Tensor(np.asarray(x), dtype=like.data.dtype)


def segmentation_losses(pred, mask, label, params: LossParams = LossParams()):
    """Per-sample (focal, dice, bce) tensors for maps of shape (..., H, W).

    ``label`` has the leading shape of ``pred`` (one image label per map).
    """
    pred = ad.as_tensor(pred)
    if np.shape(mask) != pred.shape:
        raise ad.ShapeError(f"map {pred.shape} and mask {np.shape(mask)} differ")
    g = _const(mask, pred)
    c = _const(label, pred)
    pix = (-2, -1)

    p = ad.clamp(pred, LOG_EPS, 1.0 - LOG_EPS)
    p_t = g * p + (1.0 - g) * (1.0 - p)
    alpha_t = g * params.balance + (1.0 - g) * (1.0 - params.balance)
    modulator = ad.power(1.0 - p_t, params.gamma)
    focal = ad.mean(-(alpha_t * modulator * ad.log(p_t)), axis=pix)

    inter = ad.sum_(pred * g, axis=pix)
    denom = ad.sum_(pred, axis=pix) + ad.sum_(g, axis=pix) + params.dice_eps
    dice = 1.0 - (ad.scale(inter, 2.0) + params.dice_eps) / denom

    top = ad.clamp(ad.max_(pred, axis=pix), LOG_EPS, 1.0 - LOG_EPS)
    bce = -(c * ad.log(top) + (1.0 - c) * ad.log(1.0 - top))
    return focal, dice, bce


def layer_loss(pred, mask, label, has_mask=None, params: LossParams = LossParams()) -> Tensor:
    """Focal + Dice + BCE per sample; mask-less samples keep only the BCE term."""
    focal, dice, bce = segmentation_losses(pred, mask, label, params)
    seg = focal + dice
    if has_mask is not None:
        seg = seg * _const(np.asarray(has_mask, dtype=float), seg)
    return seg + bce


def total_loss(maps_text, maps_query, mask, label, loss_alpha: float, has_mask=None,
               params: LossParams = LossParams()) -> Tensor:
    """Sum over layers of ``a * L(text_i) + (1 - a) * L(query_i)``, averaged over the batch."""
    if maps_query is not None and len(maps_query) != len(maps_text):
        raise ValueError("text and query map lists differ in length")
    total = None
    for i, m_text in enumerate(maps_text):
        term = ad.scale(layer_loss(m_text, mask, label, has_mask, params), loss_alpha)
        if maps_query is not None and loss_alpha < 1.0:
            q = layer_loss(maps_query[i], mask, label, has_mask, params)
            term = term + ad.scale(q, 1.0 - loss_alpha)
        total = term if total is None else total + term
    return ad.mean(total)

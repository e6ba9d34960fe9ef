"""Full detector: frozen encoders + prompt learner + IQM + map scoring."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .config import RunConfig
from .encoders import ImageEncoder, StageFeatures, TextEncoder, Tokenizer
from .iqm import IQM
from .losses import LossParams, total_loss
from .nn import Module
from .prompting import PromptLearner
from .scoring import AnomalyResult, anomaly_score, fuse, layer_map


class IQEClip(Module):
    def __init__(self, cfg: RunConfig, tokenizer: Tokenizer | None = None, zero_out: bool = False):
        self._cfg = cfg
        self._tokenizer = tokenizer or Tokenizer.from_file(cfg.vocab or None, cfg.context)
        backbone = np.random.default_rng(cfg.backbone_seed)
        self.image_encoder = ImageEncoder(cfg, backbone)
        self.text_encoder = TextEncoder(cfg, self._tokenizer.vocab_size, backbone)
        rng = np.random.default_rng(cfg.seed)
        self.prompts = PromptLearner(self._tokenizer, self.text_encoder, cfg.d, cfg.C, cfg.r,
                                     cfg.M, cfg.D, rng, use_cpt=not cfg.disable_cpt,
                                     use_lpt=not cfg.disable_lpt)
        self.iqm = IQM(cfg.d, cfg.C, cfg.heads, cfg.iqm_blocks, cfg.grid ** 2, rng,
                       zero_out=zero_out, use_class_init=not cfg.disable_query_init,
                       use_text=not cfg.disable_text_xattn,
                       use_image=not cfg.disable_image_xattn)

    @property
    def cfg(self) -> RunConfig:
        return self._cfg

    @property
    def tokenizer(self) -> Tokenizer:
        return self._tokenizer

    @property
    def loss_params(self) -> LossParams:
        return LossParams(self.cfg.focal_gamma, self.cfg.focal_balance, self.cfg.dice_eps)

    def trainable(self) -> dict:
        return {n: p for n, p in self.named_parameters() if p.requires_grad}

    def frozen(self) -> dict:
        return {n: p for n, p in self.named_parameters() if not p.requires_grad}

    def encode_image(self, images) -> StageFeatures:
        with ad.no_grad():
            return self.image_encoder(images)

    def forward_maps(self, stages, x_cls, class_words):
        """Per-layer text and query maps for cached encoder features.

        stages: 4 arrays (B, G, d); x_cls: (B, d). Query maps are ``None``
        when the IQM is ablated.
        """
        size = (self.cfg.image_size, self.cfg.image_size)
        x_cls = ad.Tensor(np.asarray(x_cls))
        ids = self.prompts.class_ids(class_words)
        trunk = self.prompts.cpt.shared(x_cls)
        text_emb = self.prompts.encode(ids, trunk)
        adapted = self.iqm.adapt_features(stages)
        maps_text = [layer_map(a, text_emb, size) for a in adapted]
        if self.cfg.disable_iqm:
            return maps_text, None
        query_emb = self.iqm.run(self.iqm.init_query(trunk), text_emb, adapted)
        maps_query = [layer_map(a, query_emb, size) for a in adapted]
        return maps_text, maps_query

    def loss(self, stages, x_cls, class_words, masks, labels, has_mask=None) -> ad.Tensor:
        maps_text, maps_query = self.forward_maps(stages, x_cls, class_words)
        return total_loss(maps_text, maps_query, masks, labels, self.cfg.effective_loss_alpha,
                          has_mask, self.loss_params)

    def predict_features(self, stages, x_cls, class_words, map_alpha: float | None = None) -> AnomalyResult:
        alpha = self.cfg.effective_map_alpha if map_alpha is None else map_alpha
        with ad.no_grad():
            maps_text, maps_query = self.forward_maps(stages, x_cls, class_words)
        text = [m.data for m in maps_text]
        query = [m.data for m in maps_query] if maps_query is not None else [np.zeros_like(text[0])] * 4
        fused = fuse(query, text, alpha)
        return AnomalyResult(text, query, fused, anomaly_score(fused))

    def predict(self, images, class_words, map_alpha: float | None = None) -> AnomalyResult:
        feats = self.encode_image(images)
        return self.predict_features(feats.features, feats.x_cls, class_words, map_alpha)

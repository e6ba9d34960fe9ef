"""Leave-one-out training and few-shot adaptation."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .data import Domain, list_domains, load_domain, sample_few_shot
from .model import IQEClip
from .nn import Adam

log = logging.getLogger(__name__)

ENCODE_CHUNK = 64


class TrainingError(RuntimeError):
    pass


@dataclass
class FeatureBank:
    """Frozen-encoder features and annotations for a set of samples."""

    stages: list[np.ndarray]   # 4 x (n, G, d)
    x_cls: np.ndarray          # (n, d)
    masks: np.ndarray          # (n, H, W) float
    labels: np.ndarray         # (n,)
    has_mask: np.ndarray       # (n,) bool
    class_words: list[str]
    ids: list[str]
    domains: list[str]

    def __len__(self) -> int:
        return len(self.ids)

    def take(self, idx) -> "FeatureBank":
        idx = np.asarray(idx, dtype=int)
        return FeatureBank([s[idx] for s in self.stages], self.x_cls[idx], self.masks[idx],
                           self.labels[idx], self.has_mask[idx],
                           [self.class_words[i] for i in idx], [self.ids[i] for i in idx],
                           [self.domains[i] for i in idx])

    @staticmethod
    def concat(banks: list["FeatureBank"]) -> "FeatureBank":
        banks = [b for b in banks if len(b)]
        return FeatureBank([np.concatenate([b.stages[i] for b in banks]) for i in range(4)],
                           np.concatenate([b.x_cls for b in banks]),
                           np.concatenate([b.masks for b in banks]),
                           np.concatenate([b.labels for b in banks]),
                           np.concatenate([b.has_mask for b in banks]),
                           sum((b.class_words for b in banks), []),
                           sum((b.ids for b in banks), []),
                           sum((b.domains for b in banks), []))


def build_bank(model: IQEClip, domain: Domain, split: str, ids=None) -> FeatureBank:
    samples = domain.split(split)
    if ids is not None:
        wanted = set(ids)
        samples = [s for s in samples if s.id in wanted]
    if not samples:
        raise TrainingError(f"no {split} samples in domain {domain.name!r}")
    images, masks, has_mask = [], [], []
    for s in samples:
        img, mask = s.load()
        images.append(img)
        has_mask.append(mask is not None)
        masks.append(mask if mask is not None else np.zeros_like(img, dtype=bool))
    images = np.stack(images)
    stages, x_cls = [[] for _ in range(4)], []
    for start in range(0, len(images), ENCODE_CHUNK):
        feats = model.encode_image(images[start:start + ENCODE_CHUNK])
        for i in range(4):
            stages[i].append(feats.features[i])
        x_cls.append(feats.x_cls)
    return FeatureBank([np.concatenate(s) for s in stages], np.concatenate(x_cls),
                       np.stack(masks).astype(np.float32), np.array([s.label for s in samples]),
                       np.array(has_mask), [domain.class_word] * len(samples),
                       [s.id for s in samples], [domain.name] * len(samples))


def _step(model: IQEClip, opt: Adam, bank: FeatureBank) -> float:
    loss = model.loss(bank.stages, bank.x_cls, bank.class_words, bank.masks, bank.labels,
                      bank.has_mask)
    opt.zero_grad()
    loss.backward()
    opt.step()
    return loss.item()


def run_epochs(model: IQEClip, bank: FeatureBank, epochs: int, cfg: RunConfig,
               extra: FeatureBank | None = None, shuffle_seed=None, opt: Adam | None = None):
    """Adam over seeded shuffled batches; ``extra`` is appended to every batch."""
    opt = opt or Adam(model.trainable(), lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed, 7] if shuffle_seed is None else shuffle_seed)
    history = []
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(bank))
        losses = []
        for start in range(0, len(order), cfg.batch):
            batch = bank.take(order[start:start + cfg.batch])
            if extra is not None and len(extra):
                batch = FeatureBank.concat([batch, extra])
            losses.append(_step(model, opt, batch))
        mean_loss = float(np.mean(losses))
        history.append((epoch, mean_loss))
        log.info("epoch %d mean loss %.6f", epoch, mean_loss)
    return history


def source_domains(data_root, held_out: str) -> list[str]:
    names = list_domains(data_root)
    if held_out not in names:
        raise TrainingError(f"held-out domain {held_out!r} not found in {data_root}")
    rest = [n for n in names if n != held_out]
    if not rest:
        raise TrainingError("no training domains left after holding one out")
    return rest


def source_bank(model: IQEClip, data_root, held_out: str) -> FeatureBank:
    return FeatureBank.concat([build_bank(model, load_domain(data_root, n), "train")
                               for n in source_domains(data_root, held_out)])


def train_zero_shot(cfg: RunConfig, data_root, held_out: str, bank: FeatureBank | None = None):
    """Train a fresh model on every domain except ``held_out``.

    Returns ``(model, history)`` with history as ``[(epoch, mean_loss)]``.
    """
    model = IQEClip(cfg)
    if bank is None:
        bank = source_bank(model, data_root, held_out)
    if held_out in set(bank.domains):
        raise TrainingError(f"held-out domain {held_out!r} present in the training bank")
    history = run_epochs(model, bank, cfg.epochs, cfg)
    return model, history


def few_shot_adapt(model: IQEClip, data_root, target: str, k: int, cfg: RunConfig | None = None,
                   source: FeatureBank | None = None, sample_seed: int | None = None):
    """Continue training on source batches with the K target shots appended to each batch.

    ``k == 0`` returns the model untouched. In ``joint`` mode the model is
    re-initialised and trained for ``cfg.epochs`` instead.
    Returns ``(model, history, shot_ids)``.
    """
    cfg = cfg or model.cfg
    if k == 0:
        return model, [], []
    domain = load_domain(data_root, target)
    shot_ids = sample_few_shot(domain, k, cfg.seed if sample_seed is None else sample_seed)
    shots = build_bank(model, domain, "train", shot_ids)
    if source is None:
        source = source_bank(model, data_root, target)
    if cfg.few_shot_mode == "joint":
        model = IQEClip(cfg)
        epochs = cfg.epochs
    else:
        epochs = cfg.adapt_epochs
    history = run_epochs(model, source, epochs, cfg, extra=shots, shuffle_seed=[cfg.seed, 11, k])
    return model, history, shot_ids

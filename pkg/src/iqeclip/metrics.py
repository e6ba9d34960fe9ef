"""AUROC and multi-seed evaluation reports."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.stats import rankdata

from .data import load_domain
from .training import build_bank

log = logging.getLogger(__name__)

REPORT_HEADER = ["domain", "seed", "ac_auroc", "as_auroc", "n_images", "n_pixels", "wall_seconds"]


class MetricError(ValueError):
    pass


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC with average ranks for ties."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape:
        raise MetricError("scores and labels differ in length")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUROC is undefined when only one class is present")
    ranks = rankdata(scores)  # average ranks
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


@dataclass
class SeedResult:
    domain: str
    seed: int
    ac_auroc: float
    as_auroc: float | None
    n_images: int
    n_pixels: int
    wall_seconds: float


@dataclass
class EvalReport:
    rows: list[SeedResult] = field(default_factory=list)

    def aggregate(self, domain: str) -> dict:
        rows = [r for r in self.rows if r.domain == domain]
        ac = np.array([r.ac_auroc for r in rows])
        out = {"ac_mean": float(ac.mean()), "ac_std": float(ac.std()), "as_mean": None, "as_std": None}
        if all(r.as_auroc is not None for r in rows):
            as_ = np.array([r.as_auroc for r in rows])
            out.update(as_mean=float(as_.mean()), as_std=float(as_.std()))
        return out

    def domains(self) -> list[str]:
        return list(dict.fromkeys(r.domain for r in self.rows))

    def write_csv(self, path, timing: bool = True) -> None:
        def fmt(v):
            return "" if v is None else f"{v:.6f}"

        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(REPORT_HEADER)
            for r in self.rows:
                w.writerow([r.domain, r.seed, fmt(r.ac_auroc), fmt(r.as_auroc), r.n_images,
                            r.n_pixels, fmt(r.wall_seconds if timing else 0.0)])
            for d in self.domains():
                agg = self.aggregate(d)
                rows = [r for r in self.rows if r.domain == d]
                wall = sum(r.wall_seconds for r in rows) if timing else 0.0
                w.writerow([d, "AGGREGATE_MEAN", fmt(agg["ac_mean"]), fmt(agg["as_mean"]),
                            rows[0].n_images, rows[0].n_pixels, fmt(wall)])
                w.writerow([d, "AGGREGATE_STD", fmt(agg["ac_std"]), fmt(agg["as_std"]),
                            rows[0].n_images, rows[0].n_pixels, fmt(0.0)])


def score_bank(model, bank, map_alpha=None, chunk: int = 50):
    """Image scores and fused maps for every sample of a feature bank."""
    scores, maps = [], []
    for start in range(0, len(bank), chunk):
        part = bank.take(range(start, min(start + chunk, len(bank))))
        res = model.predict_features(part.stages, part.x_cls, part.class_words, map_alpha)
        scores.append(res.score)
        maps.append(res.fused)
    return np.concatenate(scores), np.concatenate(maps)


def pixel_auroc(maps: np.ndarray, masks: np.ndarray, pooling: str = "pooled") -> float:
    if pooling == "pooled":
        return auroc(maps.ravel(), masks.ravel() > 0.5)
    per_image = [auroc(m.ravel(), g.ravel() > 0.5) for m, g in zip(maps, masks)
                 if 0 < (g > 0.5).sum() < g.size]
    if not per_image:
        raise MetricError("no test image has both normal and abnormal pixels")
    return float(np.mean(per_image))


def evaluate_model(model, data_root, domain: str, seed: int = 0, map_alpha=None,
                   bank=None) -> SeedResult:
    start = time.perf_counter()
    if bank is None:
        bank = build_bank(model, load_domain(data_root, domain), "test")
    scores, maps = score_bank(model, bank, map_alpha)
    ac = auroc(scores, bank.labels)
    if bank.has_mask.all():
        as_ = pixel_auroc(maps, bank.masks, model.cfg.pixel_pooling)
    else:
        log.warning("domain %s lacks pixel masks; AS omitted", domain)
        as_ = None
    return SeedResult(domain, seed, ac, as_, len(bank), int(bank.masks.size),
                      time.perf_counter() - start)


def evaluate(model_for_seed: Callable[[int], object], data_root, domain: str, seeds,
             map_alpha=None) -> EvalReport:
    """Score the test split once per seed; ``model_for_seed(seed)`` supplies each model."""
    report = EvalReport()
    for seed in seeds:
        report.rows.append(evaluate_model(model_for_seed(seed), data_root, domain, seed, map_alpha))
    return report

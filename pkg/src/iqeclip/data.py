"""Synthetic multi-domain defect benchmark, PGM I/O and manifests."""
from __future__ import annotations

import math
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

MANIFEST = "manifest.tsv"


class DatasetError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# PGM (binary P5, 8 bit)
# ---------------------------------------------------------------------------

def write_pgm(path, image: np.ndarray) -> None:
    """Write values in [0, 1] as an 8-bit P5 file."""
    arr = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a P5 file into float32 values in [0, 1]."""
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DatasetError(f"{path}: truncated PGM header")
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise DatasetError(f"{path}: not a binary P5 PGM")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise DatasetError(f"{path}: only maxval 255 is supported")
    body = raw[pos + 1: pos + 1 + w * h]
    if len(body) != w * h:
        raise DatasetError(f"{path}: truncated pixel data")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).astype(np.float32) / 255.0


# ---------------------------------------------------------------------------
# domain specifications
# ---------------------------------------------------------------------------

@dataclass
class DomainSpec:
    name: str
    class_word: str
    texture: str                      # stripes | checker | blobs
    frequency: float                  # cycles per image (stripes) / cells per side (checker) / blob scale
    orientation: float = 0.0          # degrees
    contrast: float = 0.18
    noise: float = 0.03
    defects: tuple = ("bright_blob", "dark_scratch", "texture_swap")
    counts: dict = field(default_factory=lambda: {
        ("train", 0): 200, ("train", 1): 40, ("test", 0): 50, ("test", 1): 50})


def default_domains() -> list[DomainSpec]:
    return [
        DomainSpec("stripes", "fabric", "stripes", frequency=5.0, orientation=15.0, contrast=0.16),
        DomainSpec("checker", "tile", "checker", frequency=7.0, contrast=0.14),
        DomainSpec("blobs", "tissue", "blobs", frequency=3.0, contrast=0.18, noise=0.04),
    ]


def _texture(spec: DomainSpec, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    if spec.texture == "stripes":
        theta = math.radians(spec.orientation + rng.uniform(-10, 10))
        freq = spec.frequency * rng.uniform(0.85, 1.15)
        phase = rng.uniform(0, 2 * math.pi)
        base = np.sin(2 * math.pi * freq * (xx * math.cos(theta) + yy * math.sin(theta)) + phase)
    elif spec.texture == "checker":
        cells = spec.frequency * rng.uniform(0.9, 1.1)
        ox, oy = rng.uniform(0, 1, size=2)
        base = np.sign(np.sin(math.pi * cells * (xx + ox / cells)) * np.sin(math.pi * cells * (yy + oy / cells)))
    elif spec.texture == "blobs":
        field_ = ndimage.gaussian_filter(rng.normal(size=(size, size)), sigma=spec.frequency, mode="wrap")
        base = field_ / (np.abs(field_).max() + 1e-12)
    else:
        raise ValueError(f"unknown texture family {spec.texture!r}")
    level = 0.5 + rng.uniform(-0.05, 0.05)
    img = level + spec.contrast * base + rng.normal(0.0, spec.noise, size=(size, size))
    return img


def _blob_mask(size, rng):
    cy, cx = rng.uniform(0.15 * size, 0.85 * size, size=2)
    ry, rx = rng.uniform(0.05 * size, 0.14 * size, size=2)
    yy, xx = np.mgrid[0:size, 0:size]
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def _scratch_mask(size, rng):
    length = rng.uniform(0.3 * size, 0.6 * size)
    angle = rng.uniform(0, math.pi)
    cy, cx = rng.uniform(0.25 * size, 0.75 * size, size=2)
    width = rng.uniform(1.5, 2.5)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = math.sin(angle), math.cos(angle)
    along = (yy - cy) * dy + (xx - cx) * dx
    across = -(yy - cy) * dx + (xx - cx) * dy
    return (np.abs(along) <= length / 2) & (np.abs(across) <= width)


def _rect_mask(size, rng):
    h, w = rng.integers(int(0.12 * size), int(0.28 * size), size=2)
    y0 = rng.integers(0, size - h)
    x0 = rng.integers(0, size - w)
    mask = np.zeros((size, size), dtype=bool)
    mask[y0:y0 + h, x0:x0 + w] = True
    return mask


def _inject(img: np.ndarray, family: str, rng: np.random.Generator):
    size = img.shape[0]
    for _ in range(100):
        mask = {"bright_blob": _blob_mask, "dark_scratch": _scratch_mask,
                "texture_swap": _rect_mask}[family](size, rng)
        if 0.01 <= mask.mean() <= 0.10:
            break
    else:
        raise DatasetError(f"could not place a {family} defect within the area bounds")
    out = img.copy()
    if family == "bright_blob":
        out[mask] += rng.uniform(0.3, 0.45)
    elif family == "dark_scratch":
        out[mask] -= rng.uniform(0.3, 0.45)
    else:
        sign = rng.choice([-1.0, 1.0])
        swap = 0.5 + sign * rng.uniform(0.28, 0.38) + rng.normal(0, 0.1, size=img.shape)
        out[mask] = swap[mask]
    return out, mask


def generate_sample(spec: DomainSpec, size: int, abnormal: bool, rng: np.random.Generator):
    img = _texture(spec, size, rng)
    if abnormal:
        family = spec.defects[rng.integers(len(spec.defects))]
        img, mask = _inject(img, family, rng)
    else:
        mask = np.zeros((size, size), dtype=bool)
    return np.clip(img, 0.0, 1.0), mask


# ---------------------------------------------------------------------------
# on-disk dataset
# ---------------------------------------------------------------------------

@dataclass
class Sample:
    id: str
    split: str
    label: int
    image_path: Path
    mask_path: Path | None

    def load(self):
        image = read_pgm(self.image_path)
        mask = read_pgm(self.mask_path) > 0.5 if self.mask_path else None
        return image, mask


@dataclass
class Domain:
    name: str
    class_word: str
    samples: list[Sample]

    def split(self, split: str, label: int | None = None) -> list[Sample]:
        return [s for s in self.samples if s.split == split and (label is None or s.label == label)]


def generate_dataset(root, specs: list[DomainSpec] | None = None, seed: int = 0,
                     size: int = 64, force: bool = False) -> list[str]:
    root = Path(root)
    specs = specs or default_domains()
    if root.exists() and any(root.iterdir()):
        if not force:
            raise DatasetError(f"{root} is not empty (use force to overwrite)")
        for spec in specs:
            shutil.rmtree(root / spec.name, ignore_errors=True)
    root.mkdir(parents=True, exist_ok=True)
    for index, spec in enumerate(specs):
        rng = np.random.default_rng([seed, index])
        base = root / spec.name
        lines = [f"{spec.name}\t{spec.class_word}"]
        counter = 0
        for split in ("train", "test"):
            for label in (0, 1):
                folder = base / split / ("abnormal" if label else "normal")
                folder.mkdir(parents=True, exist_ok=True)
                for _ in range(spec.counts[(split, label)]):
                    sid = f"{counter:05d}"
                    counter += 1
                    img, mask = generate_sample(spec, size, bool(label), rng)
                    img_rel = f"{split}/{folder.name}/img_{sid}.pgm"
                    mask_rel = f"{split}/{folder.name}/mask_{sid}.pgm"
                    write_pgm(base / img_rel, img)
                    write_pgm(base / mask_rel, mask.astype(np.float64))
                    lines.append(f"{sid}\t{split}\t{label}\t{img_rel}\t{mask_rel}")
        (base / MANIFEST).write_text("\n".join(lines) + "\n")
    return [s.name for s in specs]


def list_domains(root) -> list[str]:
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} does not exist")
    return sorted(p.parent.name for p in root.glob(f"*/{MANIFEST}"))


def load_domain(root, name: str) -> Domain:
    base = Path(root) / name
    path = base / MANIFEST
    if not path.is_file():
        raise DatasetError(f"domain {name!r} not found under {root}")
    lines = path.read_text().splitlines()
    domain_name, class_word = lines[0].split("\t")
    samples = []
    for line in lines[1:]:
        if not line.strip():
            continue
        sid, split, label, img_rel, mask_rel = (line.split("\t") + [""])[:5]
        samples.append(Sample(sid, split, int(label), base / img_rel,
                              base / mask_rel if mask_rel else None))
    return Domain(domain_name, class_word, samples)


def sample_few_shot(domain: Domain, k: int, seed: int) -> list[str]:
    """Seeded balanced draw from the train split: ceil(k/2) abnormal, floor(k/2) normal."""
    if k < 0:
        raise ValueError("k must be non-negative")
    n_abn = (k + 1) // 2
    n_norm = k - n_abn
    abnormal = sorted(s.id for s in domain.split("train", 1))
    normal = sorted(s.id for s in domain.split("train", 0))
    if len(abnormal) < n_abn or len(normal) < n_norm:
        raise DatasetError(f"domain {domain.name!r} train pool too small for k={k}")
    rng = np.random.default_rng([seed, k])
    picked = list(rng.choice(abnormal, size=n_abn, replace=False)) if n_abn else []
    picked += list(rng.choice(normal, size=n_norm, replace=False)) if n_norm else []
    return [str(i) for i in picked]

"""Dataset ingestion, preprocessing, prompt sampling, and a synthetic generator.

Two on-disk layouts are supported:

* ``mvtec_folders`` — the usual convention::

      root/<category>/train/good/*.png
      root/<category>/test/<good|defect...>/*.png
      root/<category>/ground_truth/<defect>/<stem>_mask.png

  Defect subfolders are also accepted under ``train/`` (the training
  protocol consumes labelled anomalous images); their masks live in the
  same ``ground_truth`` tree, which is why generated stems are unique
  across splits.

* ``manifest`` — ``root/manifest.jsonl`` with one JSON object per line::

      {"image_path": ..., "mask_path": ..., "label": 0|1,
       "category": ..., "split": "train"|"test"}

  Paths are relative to the manifest's directory. ``mask_path`` may be
  null; label-1 samples without masks restrict that dataset to
  image-level evaluation.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import ArgumentError, DataError, ProtocolError

logger = logging.getLogger(__name__)

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


@dataclass(frozen=True)
class Sample:
    image_path: str
    mask_path: str | None
    label: int
    category: str
    split: str  # "train" or "test"


@dataclass
class DatasetSpec:
    root_path: str
    layout: str = "mvtec_folders"
    categories: list[str] | None = None
    resolution: int = 518


def scan(spec: DatasetSpec) -> list[Sample]:
    """Discover samples under the dataset root, deterministically ordered."""
    root = spec.root_path
    if not os.path.isdir(root):
        raise DataError(f"dataset root does not exist: {root}")
    if spec.layout == "manifest":
        samples = _scan_manifest(root)
    elif spec.layout == "mvtec_folders":
        samples = _scan_folders(root, spec.categories)
    else:
        raise ArgumentError(f"unknown layout {spec.layout!r}")
    samples.sort(key=lambda s: (s.category, s.split, s.image_path))
    return samples


def _scan_manifest(root: str) -> list[Sample]:
    manifest = os.path.join(root, "manifest.jsonl")
    if not os.path.isfile(manifest):
        raise DataError(f"manifest layout requires {manifest}")
    samples = []
    with open(manifest, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{manifest}:{lineno}: invalid JSON") from exc
            mask = rec.get("mask_path")
            samples.append(
                Sample(
                    image_path=os.path.join(root, rec["image_path"]),
                    mask_path=os.path.join(root, mask) if mask else None,
                    label=int(rec["label"]),
                    category=rec["category"],
                    split=rec["split"],
                )
            )
    return samples


def _scan_folders(root: str, categories: list[str] | None) -> list[Sample]:
    cats = categories or sorted(
        d for d in os.listdir(root) if os.path.isdir(os.path.join(root, d))
    )
    samples: list[Sample] = []
    for cat in cats:
        cat_dir = os.path.join(root, cat)
        if not os.path.isdir(cat_dir):
            raise DataError(f"category folder not found: {cat_dir}")
        found_any = False
        for split in ("train", "test"):
            split_dir = os.path.join(cat_dir, split)
            if not os.path.isdir(split_dir):
                continue
            for defect in sorted(os.listdir(split_dir)):
                defect_dir = os.path.join(split_dir, defect)
                if not os.path.isdir(defect_dir):
                    continue
                for name in sorted(os.listdir(defect_dir)):
                    stem, ext = os.path.splitext(name)
                    if ext.lower() not in IMAGE_EXTENSIONS:
                        continue
                    found_any = True
                    image_path = os.path.join(defect_dir, name)
                    if defect == "good":
                        samples.append(Sample(image_path, None, 0, cat, split))
                    else:
                        mask_path = os.path.join(
                            cat_dir, "ground_truth", defect, f"{stem}_mask.png"
                        )
                        if not os.path.isfile(mask_path):
                            raise DataError(
                                f"anomalous image {image_path} has no mask at {mask_path}"
                            )
                        samples.append(Sample(image_path, mask_path, 1, cat, split))
        if not found_any:
            logger.warning("category %r contains no images", cat)
    return samples


def load_and_resize(sample: Sample, resolution: int) -> tuple[np.ndarray, np.ndarray]:
    """Load one sample as (image [res, res, 3] float32 in [0, 1], binary mask [res, res]).

    Images resize bilinearly; masks resize nearest-neighbour and binarise
    at the 127/255 threshold so they stay strictly {0, 1}. Normal samples
    yield an all-zero mask.
    """
    try:
        with Image.open(sample.image_path) as img:
            rgb = img.convert("RGB").resize((resolution, resolution), Image.BILINEAR)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {sample.image_path}: {exc}") from exc
    image = np.asarray(rgb, dtype=np.float32) / 255.0
    if sample.mask_path is None:
        return image, np.zeros((resolution, resolution), dtype=np.uint8)
    try:
        with Image.open(sample.mask_path) as m:
            mask_img = m.convert("L").resize((resolution, resolution), Image.NEAREST)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read mask {sample.mask_path}: {exc}") from exc
    mask = (np.asarray(mask_img) > 127).astype(np.uint8)
    return image, mask


def sample_prompts(samples: list[Sample], category: str, k: int, seed: int) -> list[Sample]:
    """Draw k normal test-split samples of a category, uniform without replacement.

    Prompts come only from the test split: training queries are never
    eligible, which keeps the few-shot protocol honest.
    """
    if k < 1:
        raise ArgumentError("k must be >= 1")
    normals = [s for s in samples if s.category == category and s.split == "test" and s.label == 0]
    if len(normals) < k:
        raise ProtocolError(
            f"category {category!r} has {len(normals)} normal test samples, need k={k}"
        )
    order = np.random.RandomState(seed).permutation(len(normals))
    return [normals[i] for i in order[:k]]


@dataclass
class SyntheticSpec:
    """Counts are dataset totals, distributed round-robin over categories."""

    n_normal: int = 50
    n_anomalous: int = 50
    resolution: int = 224
    seed: int = 0
    test_normal: int = 30
    test_anomalous: int = 30
    categories: tuple[str, ...] = ("weave", "speckle")


def generate_synthetic(root: str, spec: SyntheticSpec | None = None, **overrides) -> DatasetSpec:
    """Write a seed-deterministic textured anomaly dataset in MVTec layout.

    Normal images are per-category procedural textures with mild per-image
    jitter; anomalies add a localised high-contrast patch whose exact
    footprint becomes the ground-truth mask.
    """
    spec = spec or SyntheticSpec(**overrides)
    if spec.resolution < 64:
        raise ArgumentError("synthetic resolution must be >= 64")
    counts = {
        ("train", 0): spec.n_normal,
        ("train", 1): spec.n_anomalous,
        ("test", 0): spec.test_normal,
        ("test", 1): spec.test_anomalous,
    }
    for ci, cat in enumerate(spec.categories):
        cat_dir = os.path.join(root, cat)
        base = _category_base(spec.seed, ci, spec.resolution)
        for (split, label), total in counts.items():
            n_cat = total // len(spec.categories) + (1 if ci < total % len(spec.categories) else 0)
            kind = "good" if label == 0 else "defect"
            img_dir = os.path.join(cat_dir, split, kind)
            os.makedirs(img_dir, exist_ok=True)
            if label == 1:
                os.makedirs(os.path.join(cat_dir, "ground_truth", kind), exist_ok=True)
            for i in range(n_cat):
                rng = np.random.RandomState(
                    _sample_seed(spec.seed, ci, split, label, i)
                )
                image = _render(rng, base, ci)
                stem = f"{split}_{kind}_{i:03d}"
                if label == 1:
                    image, mask = _inject_anomaly(rng, image)
                    _save_png(
                        mask * 255,
                        os.path.join(cat_dir, "ground_truth", kind, f"{stem}_mask.png"),
                    )
                _save_png(
                    (image * 255).round().astype(np.uint8),
                    os.path.join(img_dir, f"{stem}.png"),
                )
    return DatasetSpec(root_path=root, layout="mvtec_folders", resolution=spec.resolution)


def _sample_seed(seed: int, cat_index: int, split: str, label: int, index: int) -> int:
    salt = (cat_index * 4 + (0 if split == "train" else 2) + label) * 100003 + index
    return (seed * 7919 + salt) % (2**31 - 1)


def _category_base(seed: int, cat_index: int, res: int) -> np.ndarray:
    """Per-category base texture, shared by every sample of the category."""
    rng = np.random.RandomState((seed * 31 + 17 * cat_index + 5) % (2**31 - 1))
    yy, xx = np.meshgrid(np.arange(res), np.arange(res), indexing="ij")
    if cat_index % 2 == 0:
        # diagonal weave: two crossed sinusoids
        freq = rng.uniform(0.15, 0.22)
        phase = rng.uniform(0, 2 * math.pi, size=2)
        base = 0.5 + 0.18 * np.sin(freq * (xx + yy) + phase[0]) + 0.12 * np.sin(
            freq * 1.7 * (xx - yy) + phase[1]
        )
    else:
        # blotchy speckle: one smoothed coarse noise field for the category
        coarse = rng.uniform(0.3, 0.7, size=(res // 16 + 1, res // 16 + 1))
        base = _upsample(coarse, res)
    tint = np.array([1.0, 0.95, 0.9]) if cat_index % 2 == 0 else np.array([0.9, 0.95, 1.0])
    return np.clip(base[:, :, None] * tint[None, None, :], 0.0, 1.0)


def _render(rng: np.random.RandomState, base: np.ndarray, cat_index: int) -> np.ndarray:
    """Base texture plus small per-image brightness and pixel noise."""
    brightness = rng.uniform(-0.03, 0.03)
    noise = rng.normal(0.0, 0.015, size=base.shape)
    return np.clip(base + brightness + noise, 0.0, 1.0)


def _upsample(coarse: np.ndarray, res: int) -> np.ndarray:
    img = Image.fromarray((coarse * 255).astype(np.uint8))
    return np.asarray(img.resize((res, res), Image.BILINEAR), dtype=np.float64) / 255.0


def _inject_anomaly(rng: np.random.RandomState, image: np.ndarray):
    """Stamp a high-contrast elliptical patch; returns (image, binary mask)."""
    res = image.shape[0]
    mask = np.zeros((res, res), dtype=np.uint8)
    ry = rng.randint(res // 10, res // 4)
    rx = rng.randint(res // 10, res // 4)
    cy = rng.randint(ry, res - ry)
    cx = rng.randint(rx, res - rx)
    yy, xx = np.meshgrid(np.arange(res), np.arange(res), indexing="ij")
    region = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    mask[region] = 1
    out = image.copy()
    shift = rng.choice([-0.5, 0.5])
    speckle = rng.normal(0.0, 0.2, size=image.shape)
    out[region] = np.clip(out[region] + shift + speckle[region], 0.0, 1.0)
    return out, mask


def _save_png(array: np.ndarray, path: str) -> None:
    Image.fromarray(array.astype(np.uint8)).save(path, format="PNG")

"""Deterministic synthetic corpora and prediction bundles for tests.

The end-to-end fixture is 20 rendered document pages with band-layout ground
truth and five prediction bundles derived from the truth: each model misses a
random subset of instances and adds noise detections, some above and some
below the 0.25 confidence operating point. Majority voting cancels both error
kinds, so the ensemble scores at least as well as any single bundle.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from layoutfuse import degrade as dg
from layoutfuse.dataset import (
    Annotation,
    AnnotationSet,
    Category,
    ImageInfo,
    save_annotations,
)
from layoutfuse.ensemble import InstancePrediction, PredictionBundle
from layoutfuse.masks import BinaryMask, Polygon, encode_rle

CATEGORIES = (
    Category(1, "paragraph"),
    Category(2, "text_box"),
    Category(3, "image"),
    Category(4, "table"),
)
BAND_SHADE = {1: 70, 2: 110, 3: 40, 4: 150}


def rect_mask(height: int, width: int, x0: int, y0: int, x1: int, y1: int) -> BinaryMask:
    grid = np.zeros((height, width), dtype=bool)
    grid[y0:y1, x0:x1] = True
    return encode_rle(grid)


def rect_polygon(x0: int, y0: int, x1: int, y1: int) -> Polygon:
    return Polygon(((x0, y0), (x1, y0), (x1, y1), (x0, y1)))


def counts_corpus(per_image_counts: np.ndarray, seed_mask_dims=(4, 4)) -> AnnotationSet:
    """Corpus with prescribed per-image category counts; geometry is a shared
    dummy mask since only the counts matter for splitting."""
    n, ncat = per_image_counts.shape
    assert ncat == len(CATEGORIES)
    dummy = rect_mask(seed_mask_dims[0], seed_mask_dims[1], 0, 0, 2, 2)
    images = tuple(
        ImageInfo(i + 1, f"img_{i:05d}.png", seed_mask_dims[0], seed_mask_dims[1])
        for i in range(n)
    )
    annotations = []
    ann_id = 1
    for i in range(n):
        for c, cat in enumerate(CATEGORIES):
            for _ in range(int(per_image_counts[i, c])):
                annotations.append(Annotation(ann_id, i + 1, cat.id, dummy))
                ann_id += 1
    return AnnotationSet(images, CATEGORIES, tuple(annotations))


def badlad_like_counts(n_images: int, seed: int) -> np.ndarray:
    """Per-image counts with marginals shaped like the BaDLAD folds:
    ~10 paragraphs and ~10 text boxes per image, images and tables rare."""
    rng = np.random.default_rng(seed)
    counts = np.zeros((n_images, 4), dtype=np.int64)
    counts[:, 0] = rng.poisson(10.3, n_images)
    counts[:, 1] = rng.poisson(10.0, n_images)
    counts[:, 2] = rng.poisson(0.5, n_images)
    counts[:, 3] = (rng.random(n_images) < 0.066).astype(np.int64)
    return counts


def build_truth(n_images: int, seed: int, height: int = 96, width: int = 72):
    """Band-layout ground truth: each page is split into six horizontal bands,
    each band empty or carrying one instance."""
    rng = np.random.default_rng(seed)
    images = []
    annotations = []
    ann_id = 1
    band_h = height // 6
    for i in range(n_images):
        image_id = i + 1
        images.append(ImageInfo(image_id, f"img_{i:03d}.png", height, width))
        for band in range(6):
            roll = rng.random()
            if roll < 0.45:
                cat = 1
            elif roll < 0.75:
                cat = 2
            elif roll < 0.85:
                cat = 3
            elif roll < 0.92:
                cat = 4
            else:
                continue
            y0 = band * band_h + 2
            y1 = (band + 1) * band_h - 2
            x0 = int(rng.integers(2, 8))
            x1 = width - int(rng.integers(2, 8))
            annotations.append(
                Annotation(ann_id, image_id, cat, (rect_polygon(x0, y0, x1, y1),))
            )
            ann_id += 1
    return AnnotationSet(tuple(images), CATEGORIES, tuple(annotations))


def render_pages(truth: AnnotationSet, images_dir: Path) -> None:
    images_dir.mkdir(parents=True, exist_ok=True)
    for img in truth.images:
        page = np.full((img.height, img.width), 255, dtype=np.uint8)
        for ann in truth.annotations_of(img.id):
            poly = ann.segmentation[0]
            xs = [v[0] for v in poly.vertices]
            ys = [v[1] for v in poly.vertices]
            x0, x1 = int(min(xs)), int(max(xs))
            y0, y1 = int(min(ys)), int(max(ys))
            page[y0:y1, x0:x1] = BAND_SHADE[ann.category_id]
        dg.save_gray_image(page, images_dir / img.file_name)


def build_bundles(
    truth: AnnotationSet,
    n_models: int = 5,
    seed: int = 7,
    miss_prob: float = 0.12,
    noise_prob: float = 0.4,
) -> list[PredictionBundle]:
    rng = np.random.default_rng(seed)
    bundles = []
    for m in range(n_models):
        model_id = f"model_{m}"
        preds = []
        for img in truth.images:
            for ann in truth.annotations_of(img.id):
                if rng.random() < miss_prob:
                    continue
                poly = ann.segmentation[0]
                xs = [int(v[0]) for v in poly.vertices]
                ys = [int(v[1]) for v in poly.vertices]
                mask = rect_mask(
                    img.height, img.width, min(xs), min(ys), max(xs), max(ys)
                )
                preds.append(
                    InstancePrediction(
                        image_id=img.id,
                        category_id=ann.category_id,
                        confidence=float(rng.uniform(0.55, 0.95)),
                        mask=mask,
                        model_id=model_id,
                    )
                )
            if rng.random() < noise_prob:  # spurious detection above 0.25
                x0 = int(rng.integers(0, img.width - 16))
                y0 = int(rng.integers(0, img.height - 16))
                preds.append(
                    InstancePrediction(
                        image_id=img.id,
                        category_id=int(rng.integers(1, 5)),
                        confidence=float(rng.uniform(0.26, 0.45)),
                        mask=rect_mask(img.height, img.width, x0, y0, x0 + 14, y0 + 12),
                        model_id=model_id,
                    )
                )
            if rng.random() < noise_prob:  # junk below the confidence cut
                x0 = int(rng.integers(0, img.width - 10))
                y0 = int(rng.integers(0, img.height - 10))
                preds.append(
                    InstancePrediction(
                        image_id=img.id,
                        category_id=int(rng.integers(1, 5)),
                        confidence=float(rng.uniform(0.05, 0.20)),
                        mask=rect_mask(img.height, img.width, x0, y0, x0 + 8, y0 + 8),
                        model_id=model_id,
                    )
                )
        bundles.append(PredictionBundle(model_id, tuple(preds)))
    return bundles


def save_bundles(bundles, out_dir: Path) -> list[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for b in bundles:
        records = [
            {
                "image_id": p.image_id,
                "category_id": p.category_id,
                "score": p.confidence,
                "segmentation": p.mask.to_json(),
            }
            for p in b.predictions
        ]
        path = out_dir / f"{b.model_id}.json"
        path.write_text(json.dumps(records))
        paths.append(path)
    return paths


def build_e2e_fixture(root: Path, n_images: int = 20, seed: int = 2024) -> dict:
    """Materialize the full fixture on disk for CLI-level runs."""
    truth = build_truth(n_images, seed)
    root.mkdir(parents=True, exist_ok=True)
    ann_path = root / "annotations.json"
    save_annotations(truth, ann_path)
    images_dir = root / "images"
    render_pages(truth, images_dir)
    bundles = build_bundles(truth, seed=seed + 1)
    bundle_paths = save_bundles(bundles, root / "bundles")
    return {
        "root": root,
        "annotations": ann_path,
        "images": images_dir,
        "bundles": bundles,
        "bundle_paths": bundle_paths,
        "truth": truth,
    }

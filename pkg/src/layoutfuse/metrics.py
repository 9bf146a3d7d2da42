"""Evaluation stack: dice score, mAP50-95 for masks and boxes, and
background-aware confusion matrices.

mAP follows the COCO protocol: greedy per-image matching at each IoU
threshold in 0.50:0.05:0.95, 101-point interpolated precision-recall, mean
over thresholds then categories (categories without ground truth excluded).
Confusion matrices match class-agnostically and carry background as the extra
row/column; columns are normalized by true-class totals.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kernels
from .dataset import AnnotationSet, DatasetError, annotation_mask
from .ensemble import ClasswiseMaskSet, InstancePrediction
from .masks import (
    BinaryMask,
    BoundingBox,
    box_iou,
    mask_dice,
    mask_intersection_area,
    mask_iou,
    mask_to_bbox,
)

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


@dataclass(frozen=True)
class GroundTruthInstance:
    category_id: int
    mask: BinaryMask
    bbox: BoundingBox


class GroundTruthIndex:
    """Rasterized ground truth, one entry per image."""

    def __init__(self, truth: AnnotationSet):
        self.truth = truth
        self.instances: dict[int, list[GroundTruthInstance]] = {}
        self._union_cache: dict[tuple[int, int], BinaryMask] = {}
        for img in truth.images:
            items = []
            for ann in truth.annotations_of(img.id):
                mask = annotation_mask(ann, img)
                if mask.area == 0:
                    continue  # degenerate geometry contributes no instance
                items.append(GroundTruthInstance(ann.category_id, mask, mask_to_bbox(mask)))
            self.instances[img.id] = items

    def category_union(self, image_id: int, category_id: int) -> BinaryMask:
        key = (image_id, category_id)
        cached = self._union_cache.get(key)
        if cached is not None:
            return cached
        img = self.truth.image_by_id(image_id)
        parts = [i.mask for i in self.instances[image_id] if i.category_id == category_id]
        if not parts:
            union = BinaryMask(img.height, img.width, (img.height * img.width,))
        elif len(parts) == 1:
            union = parts[0]
        else:
            flat = np.zeros(img.height * img.width, dtype=np.bool_)
            for m in parts:
                kernels.rle_paint(flat, m.counts_array())
            union = BinaryMask(
                img.height, img.width, tuple(int(c) for c in kernels.rle_encode(flat))
            )
        self._union_cache[key] = union
        return union


@dataclass(frozen=True)
class DiceReport:
    per_category: dict[str, float]
    overall: float


def evaluate_dice(
    preds: Sequence[ClasswiseMaskSet],
    truth: AnnotationSet,
    aggregation: str = "macro",
    index: GroundTruthIndex | None = None,
) -> DiceReport:
    """Pixel dice of predicted classwise masks against ground-truth unions.

    ``macro``: mean over images per category, then mean over categories.
    ``micro``: pixel counts pooled over images per category, then mean over
    categories. Both use the both-empty = 1 convention.
    """
    if aggregation not in ("macro", "micro"):
        raise ValueError(f"aggregation must be 'macro' or 'micro', got {aggregation!r}")
    by_image = {}
    for p in preds:
        img = truth.image_by_id(p.image_id)  # raises on unknown image
        if (p.height, p.width) != (img.height, img.width):
            raise DatasetError(
                f"prediction grid {p.height}x{p.width} does not match "
                f"image {p.image_id} grid {img.height}x{img.width}"
            )
        by_image[p.image_id] = p
    index = index or GroundTruthIndex(truth)
    per_category: dict[str, float] = {}
    for cat in truth.categories:
        scores = []
        inter_total = 0
        size_total = 0
        for img in truth.images:
            gt = index.category_union(img.id, cat.id)
            pred_set = by_image.get(img.id)
            if pred_set is None:
                pm = BinaryMask(img.height, img.width, (img.height * img.width,))
            else:
                pm = pred_set.mask_for(cat.id)
            if aggregation == "macro":
                scores.append(mask_dice(pm, gt))
            else:
                inter_total += mask_intersection_area(pm, gt)
                size_total += pm.area + gt.area
        if aggregation == "macro":
            per_category[cat.name] = float(np.mean(scores)) if scores else 1.0
        else:
            per_category[cat.name] = (
                2.0 * inter_total / size_total if size_total > 0 else 1.0
            )
    overall = float(np.mean(list(per_category.values()))) if per_category else 1.0
    return DiceReport(per_category, overall)


@dataclass(frozen=True)
class MatchResult:
    pairs: tuple[tuple[int, int, float], ...]  # (pred idx, truth idx, IoU)
    unmatched_predictions: tuple[int, ...]
    unmatched_truths: tuple[int, ...]


def _pair_iou(pred: InstancePrediction, gt: GroundTruthInstance, iou_kind: str) -> float:
    if iou_kind == "box":
        return box_iou(pred.bbox, gt.bbox)
    return mask_iou(pred.mask, gt.mask)


def match_instances(
    preds: Sequence[InstancePrediction],
    truths: Sequence[GroundTruthInstance],
    iou_threshold: float,
    iou_kind: str = "mask",
    same_category: bool = True,
) -> MatchResult:
    """Greedy one-image matching in descending confidence order.

    Each prediction takes the unmatched ground truth with the highest
    IoU >= threshold (lowest index on ties); ``same_category=False`` gives the
    class-agnostic variant used by confusion matrices.
    """
    if iou_kind not in ("box", "mask"):
        raise ValueError(f"iou_kind must be 'box' or 'mask', got {iou_kind!r}")
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].confidence, i))
    taken = [False] * len(truths)
    pairs = []
    for pi in order:
        pred = preds[pi]
        best_j = -1
        best_iou = iou_threshold
        for j, gt in enumerate(truths):
            if taken[j]:
                continue
            if same_category and gt.category_id != pred.category_id:
                continue
            iou = _pair_iou(pred, gt, iou_kind)
            if iou > best_iou or (iou == best_iou and iou >= iou_threshold and best_j < 0):
                best_iou = iou
                best_j = j
        if best_j >= 0:
            taken[best_j] = True
            pairs.append((pi, best_j, best_iou))
    matched_preds = {p for p, _, _ in pairs}
    return MatchResult(
        tuple(pairs),
        tuple(i for i in range(len(preds)) if i not in matched_preds),
        tuple(j for j in range(len(truths)) if not taken[j]),
    )


def _average_precision(scores: np.ndarray, is_tp: np.ndarray, n_truth: int) -> float:
    """101-point interpolated AP from per-detection hit flags."""
    if n_truth == 0:
        return float("nan")
    if scores.size == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    tp = np.cumsum(is_tp[order])
    fp = np.cumsum(~is_tp[order])
    recall = tp / n_truth
    precision = tp / np.maximum(tp + fp, 1)
    # Monotone envelope from the right, then sample at the recall grid.
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.where(idx < recall.size, precision[np.minimum(idx, recall.size - 1)], 0.0)
    return float(sampled.mean())


def mean_ap_50_95(
    preds: dict[int, Sequence[InstancePrediction]],
    truth: AnnotationSet,
    iou_kind: str = "mask",
    index: GroundTruthIndex | None = None,
) -> tuple[float, dict[str, float]]:
    """COCO-style mAP50-95; returns (overall, per-category means)."""
    index = index or GroundTruthIndex(truth)
    for image_id in preds:
        truth.image_by_id(image_id)
    per_category: dict[str, float] = {}
    ap_values = []
    for cat in truth.categories:
        n_truth = sum(
            sum(1 for g in index.instances[img.id] if g.category_id == cat.id)
            for img in truth.images
        )
        if n_truth == 0:
            continue
        # IoU tables are threshold-independent; compute once per image.
        per_image: list[tuple[np.ndarray, np.ndarray]] = []
        for img in truth.images:
            cat_preds = [
                p for p in preds.get(img.id, ()) if p.category_id == cat.id
            ]
            cat_preds.sort(key=lambda p: -p.confidence)
            gts = [g for g in index.instances[img.id] if g.category_id == cat.id]
            iou_table = np.array(
                [[_pair_iou(p, g, iou_kind) for g in gts] for p in cat_preds],
                dtype=np.float64,
            ).reshape(len(cat_preds), len(gts))
            scores = np.array([p.confidence for p in cat_preds], dtype=np.float64)
            per_image.append((scores, iou_table))
        threshold_aps = []
        for thr in IOU_THRESHOLDS:
            all_scores = []
            all_tp = []
            for scores, iou_table in per_image:
                taken = np.zeros(iou_table.shape[1], dtype=np.bool_)
                for pi in range(scores.size):
                    best_j = -1
                    best_iou = thr
                    for j in range(iou_table.shape[1]):
                        if taken[j]:
                            continue
                        iou = iou_table[pi, j]
                        if iou > best_iou or (iou == best_iou and iou >= thr and best_j < 0):
                            best_iou = iou
                            best_j = j
                    if best_j >= 0:
                        taken[best_j] = True
                        all_tp.append(True)
                    else:
                        all_tp.append(False)
                    all_scores.append(scores[pi])
            ap = _average_precision(
                np.array(all_scores), np.array(all_tp, dtype=np.bool_), n_truth
            )
            threshold_aps.append(ap)
        per_category[cat.name] = float(np.mean(threshold_aps))
        ap_values.append(per_category[cat.name])
    overall = float(np.mean(ap_values)) if ap_values else 0.0
    return overall, per_category


@dataclass(frozen=True)
class ConfusionMatrix:
    labels: tuple[str, ...]  # category names plus "background"
    counts: np.ndarray  # rows = predicted, cols = true

    def normalized(self) -> np.ndarray:
        """Column-normalized matrix; all-zero columns stay zero."""
        totals = self.counts.sum(axis=0, keepdims=True)
        safe = np.maximum(totals, 1)
        return self.counts / safe

    def to_csv(self, path: str | Path) -> None:
        norm = self.normalized()
        with Path(path).open("w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["predicted\\true", *self.labels])
            for label, row in zip(self.labels, norm):
                writer.writerow([label, *(f"{v:.6f}" for v in row)])


def confusion_matrix(
    preds: dict[int, Sequence[InstancePrediction]],
    truth: AnnotationSet,
    iou_threshold: float = 0.5,
    confidence_threshold: float = 0.25,
    iou_kind: str = "mask",
    index: GroundTruthIndex | None = None,
) -> ConfusionMatrix:
    """Background-aware instance confusion matrix.

    Class-agnostic greedy matching pairs predictions and ground truths; a
    matched pair increments (pred class, true class), an unmatched truth
    increments (background, true class), an unmatched prediction increments
    (pred class, background).
    """
    if not 0.0 <= iou_threshold <= 1.0 or not 0.0 <= confidence_threshold <= 1.0:
        raise ValueError("thresholds must lie in [0,1]")
    index = index or GroundTruthIndex(truth)
    cat_pos = {c.id: i for i, c in enumerate(truth.categories)}
    n = len(truth.categories)
    counts = np.zeros((n + 1, n + 1), dtype=np.int64)
    for img in truth.images:
        image_preds = [
            p for p in preds.get(img.id, ()) if p.confidence >= confidence_threshold
        ]
        gts = index.instances[img.id]
        result = match_instances(
            image_preds, gts, iou_threshold, iou_kind, same_category=False
        )
        for pi, j, _ in result.pairs:
            counts[cat_pos[image_preds[pi].category_id], cat_pos[gts[j].category_id]] += 1
        for pi in result.unmatched_predictions:
            counts[cat_pos[image_preds[pi].category_id], n] += 1
        for j in result.unmatched_truths:
            counts[n, cat_pos[gts[j].category_id]] += 1
    labels = truth.category_names() + ("background",)
    return ConfusionMatrix(labels, counts)


@dataclass(frozen=True)
class MetricsReport:
    dice: DiceReport | None
    map_mask: float | None
    map_box: float | None
    map_mask_per_category: dict[str, float] | None
    map_box_per_category: dict[str, float] | None
    confusion: ConfusionMatrix | None

    def to_json(self) -> dict:
        out: dict = {}
        if self.dice is not None:
            out["dice"] = {
                "overall": self.dice.overall,
                "per_category": dict(self.dice.per_category),
            }
        if self.map_mask is not None:
            out.setdefault("map50_95", {})["mask"] = self.map_mask
            out["map50_95"].setdefault("per_category", {})["mask"] = dict(
                self.map_mask_per_category or {}
            )
        if self.map_box is not None:
            out.setdefault("map50_95", {})["box"] = self.map_box
            out["map50_95"].setdefault("per_category", {})["box"] = dict(
                self.map_box_per_category or {}
            )
        if self.confusion is not None:
            out["confusion"] = {
                "labels": list(self.confusion.labels),
                "matrix": [list(map(float, row)) for row in self.confusion.normalized()],
            }
        return out

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2), encoding="utf-8")


def compare_reports(a: dict, b: dict) -> dict:
    """Elementwise deltas (a - b) between two report JSON objects."""

    def diff(x, y, where):
        if isinstance(x, dict) or isinstance(y, dict):
            if not (isinstance(x, dict) and isinstance(y, dict)) or set(x) != set(y):
                raise ValueError(f"report shapes differ at {where or 'top level'}")
            return {k: diff(x[k], y[k], f"{where}.{k}") for k in x}
        if isinstance(x, (list, tuple)) or isinstance(y, (list, tuple)):
            if not (isinstance(x, (list, tuple)) and isinstance(y, (list, tuple))) or len(x) != len(y):
                raise ValueError(f"report shapes differ at {where or 'top level'}")
            return [diff(xi, yi, f"{where}[{i}]") for i, (xi, yi) in enumerate(zip(x, y))]
        if isinstance(x, str) or isinstance(y, str):
            if x != y:
                raise ValueError(f"label mismatch at {where}: {x!r} vs {y!r}")
            return x
        return float(x) - float(y)

    return diff(a, b, "")

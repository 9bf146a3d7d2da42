"""Fusion of multi-model predictions: per-pixel majority voting for classwise
masks and class-agnostic NMS for instancewise detections.

The five-model topology this serves (four fold-models plus one full-data
model) votes with quorum ceil(M/2); suppression runs on bounding boxes by
default with mask IoU as an opt-in, and survivors keep their original
confidence. Tie-breaking is total, so fusion output is independent of bundle
order.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import kernels
from .dataset import ImageInfo
from .masks import (
    BinaryMask,
    BoundingBox,
    ShapeMismatchError,
    box_iou,
    mask_iou,
    mask_to_bbox,
)


class BundleError(ValueError):
    """Malformed prediction bundle content."""


@dataclass(frozen=True)
class InstancePrediction:
    """One detected layout element from one model."""

    image_id: int
    category_id: int
    confidence: float
    mask: BinaryMask
    model_id: str
    bbox: BoundingBox | None = None  # derived from the mask when not supplied

    def __post_init__(self) -> None:
        if not 0.0 <= self.confidence <= 1.0:
            raise BundleError(f"confidence {self.confidence} out of [0,1]")
        if self.mask.area == 0:
            raise BundleError(
                f"instance on image {self.image_id} has an empty mask"
            )
        derived = mask_to_bbox(self.mask)
        if self.bbox is None:
            object.__setattr__(self, "bbox", derived)
        elif self.bbox != derived:
            raise BundleError(
                f"bbox {self.bbox} does not match mask bbox {derived}"
            )

    def sort_key(self):
        """Total order: confidence desc, area desc, then stable identity."""
        return (
            -self.confidence,
            -self.mask.area,
            self.model_id,
            self.category_id,
            self.mask.counts,
        )


@dataclass(frozen=True)
class PredictionBundle:
    """All predictions of one model over an image set."""

    model_id: str
    predictions: tuple[InstancePrediction, ...]

    def for_image(self, image_id: int) -> tuple[InstancePrediction, ...]:
        return tuple(p for p in self.predictions if p.image_id == image_id)

    @property
    def image_ids(self) -> set[int]:
        return {p.image_id for p in self.predictions}


@dataclass(frozen=True)
class ClasswiseMaskSet:
    """Per-category fused masks for one image; absent ids mean empty masks."""

    image_id: int
    height: int
    width: int
    masks: dict[int, BinaryMask]

    def __post_init__(self) -> None:
        for cat, m in self.masks.items():
            if m.height != self.height or m.width != self.width:
                raise ShapeMismatchError(
                    f"category {cat} mask is {m.height}x{m.width}, "
                    f"image grid is {self.height}x{self.width}"
                )

    def mask_for(self, category_id: int) -> BinaryMask:
        got = self.masks.get(category_id)
        if got is None:
            return BinaryMask(self.height, self.width, (self.height * self.width,))
        return got


@dataclass(frozen=True)
class EnsembleConfig:
    confidence_threshold: float = 0.25
    iou_threshold: float = 0.7
    vote_quorum: int | None = None  # None -> ceil(M/2) for M bundles
    iou_kind: str = "box"

    def __post_init__(self) -> None:
        if not 0.0 <= self.confidence_threshold <= 1.0:
            raise ValueError(f"confidence threshold {self.confidence_threshold} out of [0,1]")
        if not 0.0 <= self.iou_threshold <= 1.0:
            raise ValueError(f"iou threshold {self.iou_threshold} out of [0,1]")
        if self.iou_kind not in ("box", "mask"):
            raise ValueError(f"iou_kind must be 'box' or 'mask', got {self.iou_kind!r}")
        if self.vote_quorum is not None and self.vote_quorum < 1:
            raise ValueError(f"vote quorum must be >= 1, got {self.vote_quorum}")

    def quorum_for(self, n_models: int) -> int:
        q = self.vote_quorum if self.vote_quorum is not None else math.ceil(n_models / 2)
        if q > n_models:
            raise ValueError(f"quorum {q} exceeds model count {n_models}")
        return q

    def to_json(self) -> dict:
        return {
            "confidence_threshold": self.confidence_threshold,
            "iou_threshold": self.iou_threshold,
            "vote_quorum": self.vote_quorum,
            "iou_kind": self.iou_kind,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "EnsembleConfig":
        return cls(
            confidence_threshold=float(obj.get("confidence_threshold", 0.25)),
            iou_threshold=float(obj.get("iou_threshold", 0.7)),
            vote_quorum=obj.get("vote_quorum"),
            iou_kind=obj.get("iou_kind", "box"),
        )


def filter_by_confidence(bundle: PredictionBundle, threshold: float) -> PredictionBundle:
    """Keep predictions with confidence >= threshold, order preserved."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold {threshold} out of [0,1]")
    kept = tuple(p for p in bundle.predictions if p.confidence >= threshold)
    return PredictionBundle(bundle.model_id, kept)


def vote_counts_classwise(
    bundles: Sequence[PredictionBundle], image: tuple[int, int, int]
) -> dict[int, np.ndarray]:
    """Per-category model-vote counts, flattened column-major.

    A model votes for a pixel in category c when any of its retained
    instances of c covers it; multiple instances of one model count once.
    """
    image_id, height, width = image
    if not bundles:
        raise ValueError("need at least one prediction bundle")
    npix = height * width
    categories = sorted(
        {p.category_id for b in bundles for p in b.predictions if p.image_id == image_id}
    )
    votes_by_cat: dict[int, np.ndarray] = {}
    for cat in categories:
        votes = np.zeros(npix, dtype=np.int16)
        coverage = np.zeros(npix, dtype=np.bool_)
        for bundle in bundles:
            coverage[:] = False
            any_instance = False
            for p in bundle.predictions:
                if p.image_id != image_id or p.category_id != cat:
                    continue
                if p.mask.height != height or p.mask.width != width:
                    raise ShapeMismatchError(
                        f"instance mask {p.mask.height}x{p.mask.width} does not match "
                        f"image {image_id} grid {height}x{width}"
                    )
                kernels.rle_paint(coverage, p.mask.counts_array())
                any_instance = True
            if any_instance:
                votes += coverage
        votes_by_cat[cat] = votes
    return votes_by_cat


def majority_vote_classwise(
    bundles: Sequence[PredictionBundle],
    image: tuple[int, int, int],
    quorum: int,
) -> ClasswiseMaskSet:
    """Per-pixel, per-category vote: a pixel is set for category c iff at
    least ``quorum`` models have a retained instance of c covering it."""
    image_id, height, width = image
    out: dict[int, BinaryMask] = {}
    for cat, votes in vote_counts_classwise(bundles, image).items():
        winning = votes >= quorum
        if winning.any():
            counts = kernels.rle_encode(winning)  # already column-major flat
            out[cat] = BinaryMask(height, width, tuple(int(c) for c in counts))
    return ClasswiseMaskSet(image_id, height, width, out)


def agnostic_nms(
    predictions: Sequence[InstancePrediction],
    iou_threshold: float,
    iou_kind: str = "box",
) -> list[InstancePrediction]:
    """Greedy class-agnostic suppression.

    Predictions are visited in descending confidence (full tie-break via
    ``sort_key``); one is kept iff its IoU with every already-kept prediction
    is strictly below the threshold, regardless of class.
    """
    if not 0.0 <= iou_threshold <= 1.0:
        raise ValueError(f"iou threshold {iou_threshold} out of [0,1]")
    ordered = sorted(predictions, key=InstancePrediction.sort_key)
    kept: list[InstancePrediction] = []
    for cand in ordered:
        suppressed = False
        for k in kept:
            if iou_kind == "box":
                overlap = box_iou(cand.bbox, k.bbox)
            else:
                overlap = mask_iou(cand.mask, k.mask)
            if overlap >= iou_threshold:
                suppressed = True
                break
        if not suppressed:
            kept.append(cand)
    return kept


def fuse_instancewise(
    bundles: Sequence[PredictionBundle], config: EnsembleConfig
) -> dict[int, list[InstancePrediction]]:
    """Pool all models per image, confidence-filter, then agnostic NMS."""
    filtered = [filter_by_confidence(b, config.confidence_threshold) for b in bundles]
    image_ids = sorted({i for b in filtered for i in b.image_ids})
    fused: dict[int, list[InstancePrediction]] = {}
    for image_id in image_ids:
        pool = [p for b in filtered for p in b.predictions if p.image_id == image_id]
        fused[image_id] = agnostic_nms(pool, config.iou_threshold, config.iou_kind)
    return fused


def fuse_classwise(
    bundles: Sequence[PredictionBundle],
    config: EnsembleConfig,
    images: Iterable[ImageInfo | tuple[int, int, int]],
) -> list[ClasswiseMaskSet]:
    """Confidence-filter each model, then majority-vote every image grid."""
    filtered = [filter_by_confidence(b, config.confidence_threshold) for b in bundles]
    quorum = config.quorum_for(len(bundles))
    out = []
    for image in images:
        if isinstance(image, ImageInfo):
            key = (image.id, image.height, image.width)
        else:
            key = (image[0], image[1], image[2])
        out.append(majority_vote_classwise(filtered, key, quorum))
    return out


def flatten_one_class_per_pixel(
    bundles: Sequence[PredictionBundle], image: tuple[int, int, int]
) -> np.ndarray:
    """Export view resolving per-pixel overlaps: the category with the most
    model votes wins, ties to the lowest category id; no votes -> -1."""
    _, height, width = image
    voting_counts = vote_counts_classwise(bundles, image)
    flat = np.full(height * width, -1, dtype=np.int64)
    best = np.zeros(height * width, dtype=np.int64)
    for cat in sorted(voting_counts):
        votes = voting_counts[cat]
        better = votes > best
        flat[better] = cat
        best[better] = votes[better]
    return flat.reshape((height, width), order="F")


# ---------------------------------------------------------------------------
# Wire formats


def load_bundle(path: str | Path, model_id: str | None = None) -> PredictionBundle:
    """Read one model's predictions: a JSON list of {image_id, category_id,
    score, segmentation}. ``model_id`` defaults to the file stem."""
    path = Path(path)
    if model_id is None:
        model_id = path.stem
    try:
        records = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise BundleError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(records, list):
        raise BundleError(f"{path}: expected a JSON list of predictions")
    preds = []
    for idx, rec in enumerate(records):
        try:
            preds.append(
                InstancePrediction(
                    image_id=int(rec["image_id"]),
                    category_id=int(rec["category_id"]),
                    confidence=float(rec["score"]),
                    mask=BinaryMask.from_json(rec["segmentation"]),
                    model_id=str(rec.get("model_id", model_id)),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise BundleError(f"{path}: record {idx}: {exc}") from exc
    return PredictionBundle(model_id, tuple(preds))


def instance_predictions_to_json(
    fused: dict[int, list[InstancePrediction]], model_id: str = "ensemble"
) -> list[dict]:
    records = []
    for image_id in sorted(fused):
        for p in fused[image_id]:
            records.append(
                {
                    "image_id": p.image_id,
                    "category_id": p.category_id,
                    "score": p.confidence,
                    "segmentation": p.mask.to_json(),
                    "model_id": model_id,
                }
            )
    return records


def classwise_to_json(sets: Sequence[ClasswiseMaskSet]) -> list[dict]:
    return [
        {
            "image_id": s.image_id,
            "height": s.height,
            "width": s.width,
            "masks": {str(cat): s.masks[cat].to_json() for cat in sorted(s.masks)},
        }
        for s in sets
    ]


def classwise_from_json(records: list[dict]) -> list[ClasswiseMaskSet]:
    out = []
    for rec in records:
        masks = {int(cat): BinaryMask.from_json(m) for cat, m in rec["masks"].items()}
        if "height" in rec and "width" in rec:
            h, w = int(rec["height"]), int(rec["width"])
        elif masks:
            some = next(iter(masks.values()))
            h, w = some.height, some.width
        else:
            raise BundleError(
                f"classwise record for image {rec.get('image_id')} has no masks "
                "and no grid size"
            )
        out.append(ClasswiseMaskSet(int(rec["image_id"]), h, w, masks))
    return out


def write_submission_csv(
    sets: Sequence[ClasswiseMaskSet],
    category_ids: Sequence[int],
    path: str | Path,
) -> None:
    """One row per (image, category): image_id,category_id,"c0 c1 c2 ..."."""
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        fh.write("image_id,category_id,rle\n")
        for s in sorted(sets, key=lambda s: s.image_id):
            for cat in category_ids:
                counts = " ".join(str(c) for c in s.mask_for(cat).counts)
                fh.write(f'{s.image_id},{cat},"{counts}"\n')


def read_submission_csv(
    path: str | Path, grids: dict[int, tuple[int, int]]
) -> list[ClasswiseMaskSet]:
    """Parse a submission CSV back into classwise mask sets.

    ``grids`` maps image id -> (height, width); rows referencing unknown
    images are rejected.
    """
    per_image: dict[int, dict[int, BinaryMask]] = {}
    with Path(path).open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        for row in reader:
            if not row or row[0] == "image_id":
                continue
            if len(row) != 3:
                raise BundleError(f"{path}: malformed row {row!r}")
            image_id = int(row[0])
            cat = int(row[1])
            if image_id not in grids:
                raise BundleError(f"{path}: unknown image id {image_id}")
            h, w = grids[image_id]
            counts = tuple(int(tok) for tok in row[2].split())
            per_image.setdefault(image_id, {})[cat] = BinaryMask(h, w, counts)
    out = []
    for image_id in sorted(per_image):
        h, w = grids[image_id]
        masks = {c: m for c, m in per_image[image_id].items() if m.area > 0}
        out.append(ClasswiseMaskSet(image_id, h, w, masks))
    return out

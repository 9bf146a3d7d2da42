"""Ground-truth corpora: COCO-style loading, stratified group k-fold
splitting, per-fold distribution reports, and leakage-safe training views.

The splitter treats each image as an indivisible group, so all annotations of
an image land in the same fold, and balances per-fold category counts
greedily, rarest category first.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .masks import BinaryMask, Polygon, rasterize_rings

DEFAULT_CATEGORIES = ("paragraph", "text_box", "image", "table")


class DatasetError(ValueError):
    """Base error for malformed or inconsistent annotation corpora."""


class DuplicateIdError(DatasetError):
    pass


class DanglingReferenceError(DatasetError):
    pass


class LeakageError(DatasetError):
    """An augmented image would leak validation-fold content into training."""


@dataclass(frozen=True)
class ImageInfo:
    id: int
    file_name: str
    height: int
    width: int
    provenance: int | None = None  # original image id for augmented copies


@dataclass(frozen=True)
class Category:
    id: int
    name: str


@dataclass(frozen=True)
class Annotation:
    id: int
    image_id: int
    category_id: int
    segmentation: tuple[Polygon, ...] | BinaryMask
    provenance: int | None = None  # original image id for augmented copies


class AnnotationSet:
    """Validated, immutable view of a COCO-style annotation corpus."""

    def __init__(
        self,
        images: tuple[ImageInfo, ...],
        categories: tuple[Category, ...],
        annotations: tuple[Annotation, ...],
    ):
        self.images = tuple(images)
        self.categories = tuple(categories)
        self.annotations = tuple(annotations)
        self._image_by_id: dict[int, ImageInfo] = {}
        for img in self.images:
            if img.id in self._image_by_id:
                raise DuplicateIdError(f"duplicate image id {img.id}")
            self._image_by_id[img.id] = img
        self._category_by_id: dict[int, Category] = {}
        for cat in self.categories:
            if cat.id in self._category_by_id:
                raise DuplicateIdError(f"duplicate category id {cat.id}")
            self._category_by_id[cat.id] = cat
        self._anns_by_image: dict[int, list[Annotation]] = {i.id: [] for i in self.images}
        seen_ann: set[int] = set()
        for ann in self.annotations:
            if ann.id in seen_ann:
                raise DuplicateIdError(f"duplicate annotation id {ann.id}")
            seen_ann.add(ann.id)
            if ann.image_id not in self._image_by_id:
                raise DanglingReferenceError(
                    f"annotation {ann.id} references missing image id {ann.image_id}"
                )
            if ann.category_id not in self._category_by_id:
                raise DanglingReferenceError(
                    f"annotation {ann.id} references missing category id {ann.category_id}"
                )
            self._anns_by_image[ann.image_id].append(ann)

    def image_by_id(self, image_id: int) -> ImageInfo:
        try:
            return self._image_by_id[image_id]
        except KeyError:
            raise DanglingReferenceError(f"unknown image id {image_id}") from None

    def category_by_id(self, category_id: int) -> Category:
        try:
            return self._category_by_id[category_id]
        except KeyError:
            raise DanglingReferenceError(f"unknown category id {category_id}") from None

    def annotations_of(self, image_id: int) -> tuple[Annotation, ...]:
        return tuple(self._anns_by_image.get(image_id, ()))

    @property
    def image_ids(self) -> tuple[int, ...]:
        return tuple(img.id for img in self.images)

    def category_names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.categories)

    def subset(self, image_ids: set[int]) -> "AnnotationSet":
        images = tuple(i for i in self.images if i.id in image_ids)
        anns = tuple(a for a in self.annotations if a.image_id in image_ids)
        return AnnotationSet(images, self.categories, anns)

    def __len__(self) -> int:
        return len(self.images)


def annotation_mask(ann: Annotation, image: ImageInfo) -> BinaryMask:
    """Rasterize an annotation's geometry onto its image grid."""
    seg = ann.segmentation
    if isinstance(seg, BinaryMask):
        if seg.height != image.height or seg.width != image.width:
            raise DatasetError(
                f"annotation {ann.id} mask is {seg.height}x{seg.width}, "
                f"image {image.id} is {image.height}x{image.width}"
            )
        return seg
    return rasterize_rings(seg, image.height, image.width)


def _parse_segmentation(raw, ann_id: int):
    if isinstance(raw, dict):
        return BinaryMask.from_json(raw)
    if isinstance(raw, (list, tuple)):
        if not raw:
            raise DatasetError(f"annotation {ann_id} has an empty segmentation")
        if isinstance(raw[0], (list, tuple)):
            return tuple(Polygon.from_flat(ring) for ring in raw)
        return (Polygon.from_flat(raw),)
    raise DatasetError(f"annotation {ann_id} has unsupported segmentation {type(raw)}")


def load_annotations(path: str | Path) -> AnnotationSet:
    """Load and validate a COCO-style annotation JSON file."""
    path = Path(path)
    try:
        with path.open("r", encoding="utf-8") as fh:
            obj = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DatasetError(f"cannot parse {path}: {exc}") from exc
    return annotation_set_from_json(obj)


def annotation_set_from_json(obj: dict) -> AnnotationSet:
    try:
        raw_images = obj["images"]
        raw_categories = obj["categories"]
        raw_annotations = obj["annotations"]
    except (KeyError, TypeError) as exc:
        raise DatasetError(f"missing top-level key: {exc}") from exc
    images = tuple(
        ImageInfo(
            int(i["id"]),
            str(i["file_name"]),
            int(i["height"]),
            int(i["width"]),
            provenance=None if i.get("provenance") is None else int(i["provenance"]),
        )
        for i in raw_images
    )
    categories = tuple(Category(int(c["id"]), str(c["name"])) for c in raw_categories)
    annotations = []
    for a in raw_annotations:
        ann_id = int(a["id"])
        prov = a.get("provenance")
        annotations.append(
            Annotation(
                id=ann_id,
                image_id=int(a["image_id"]),
                category_id=int(a["category_id"]),
                segmentation=_parse_segmentation(a["segmentation"], ann_id),
                provenance=None if prov is None else int(prov),
            )
        )
    return AnnotationSet(images, categories, tuple(annotations))


def annotation_set_to_json(data: AnnotationSet) -> dict:
    def seg_json(seg):
        if isinstance(seg, BinaryMask):
            return seg.to_json()
        return [[coord for vertex in p.vertices for coord in vertex] for p in seg]

    anns = []
    for a in data.annotations:
        entry = {
            "id": a.id,
            "image_id": a.image_id,
            "category_id": a.category_id,
            "segmentation": seg_json(a.segmentation),
        }
        if a.provenance is not None:
            entry["provenance"] = a.provenance
        anns.append(entry)
    images = []
    for i in data.images:
        entry = {"id": i.id, "file_name": i.file_name, "height": i.height, "width": i.width}
        if i.provenance is not None:
            entry["provenance"] = i.provenance
        images.append(entry)
    return {
        "images": images,
        "categories": [{"id": c.id, "name": c.name} for c in data.categories],
        "annotations": anns,
    }


def save_annotations(data: AnnotationSet, path: str | Path) -> None:
    Path(path).write_text(json.dumps(annotation_set_to_json(data)), encoding="utf-8")


@dataclass(frozen=True)
class FoldStats:
    images: int
    category_counts: tuple[int, ...]  # vocabulary order


@dataclass(frozen=True)
class FoldPlan:
    k: int
    seed: int
    assignment: dict[int, int]  # image id -> fold index
    category_names: tuple[str, ...]
    per_fold_stats: tuple[FoldStats, ...]

    def fold_image_ids(self, fold: int) -> tuple[int, ...]:
        return tuple(i for i, f in self.assignment.items() if f == fold)

    def to_json(self) -> dict:
        return {
            "k": self.k,
            "seed": self.seed,
            "assignment": {str(i): f for i, f in self.assignment.items()},
        }

    @classmethod
    def from_json(cls, obj: dict, data: AnnotationSet) -> "FoldPlan":
        k = int(obj["k"])
        assignment = {int(i): int(f) for i, f in obj["assignment"].items()}
        if set(assignment) != set(data.image_ids):
            raise DatasetError("fold plan does not cover exactly the corpus images")
        if any(not 0 <= f < k for f in assignment.values()):
            raise DatasetError("fold index out of range in plan")
        stats = compute_fold_stats(data, assignment, k)
        return cls(k, int(obj["seed"]), assignment, data.category_names(), stats)


def compute_fold_stats(
    data: AnnotationSet, assignment: dict[int, int], k: int
) -> tuple[FoldStats, ...]:
    cat_pos = {c.id: i for i, c in enumerate(data.categories)}
    ncat = len(data.categories)
    counts = np.zeros((k, ncat), dtype=np.int64)
    sizes = np.zeros(k, dtype=np.int64)
    for img in data.images:
        sizes[assignment[img.id]] += 1
    for ann in data.annotations:
        counts[assignment[ann.image_id], cat_pos[ann.category_id]] += 1
    return tuple(
        FoldStats(int(sizes[f]), tuple(int(c) for c in counts[f])) for f in range(k)
    )


def stratified_group_kfold(data: AnnotationSet, k: int, seed: int) -> FoldPlan:
    """Partition images into k folds, groups disjoint by image.

    Greedy pass: images are shuffled with the seed, stably sorted so that
    carriers of globally rare categories come first, then each image goes to
    the fold with the largest deficit in the image's rarest present category,
    choosing among the currently smallest folds so image counts per fold
    differ by at most one. Deterministic for a fixed (data, k, seed).
    """
    if k < 2:
        raise DatasetError(f"k must be at least 2, got {k}")
    n = len(data.images)
    if k > n:
        raise DatasetError(f"cannot split {n} images into {k} folds")

    cat_pos = {c.id: i for i, c in enumerate(data.categories)}
    ncat = len(data.categories)
    counts = np.zeros((n, ncat), dtype=np.int64)
    img_pos = {img.id: i for i, img in enumerate(data.images)}
    for ann in data.annotations:
        counts[img_pos[ann.image_id], cat_pos[ann.category_id]] += 1

    global_counts = counts.sum(axis=0)
    # Rarity rank: fewest global annotations first, vocabulary order on ties.
    rank = np.full(ncat, ncat, dtype=np.int64)
    order_cats = sorted(range(ncat), key=lambda c: (global_counts[c], c))
    for r, c in enumerate(order_cats):
        rank[c] = r
    present = counts > 0
    rank_mat = np.where(present, rank[None, :], ncat)
    dominant = np.argmin(rank_mat, axis=1)
    dominant[~present.any(axis=1)] = -1
    rarity = np.where(
        present.any(axis=1),
        np.where(global_counts[dominant] > 0, 1.0 / np.maximum(global_counts[dominant], 1), 0.0),
        0.0,
    )
    totals = counts.sum(axis=1)

    rng = np.random.default_rng(seed)
    shuffled = rng.permutation(n)
    # lexsort: last key is primary; stable, so the shuffle breaks exact ties.
    order = shuffled[np.lexsort((-totals[shuffled], -rarity[shuffled]))]

    fold_counts = np.zeros((k, ncat), dtype=np.int64)
    fold_sizes = np.zeros(k, dtype=np.int64)
    assignment: dict[int, int] = {}
    for i in order:
        d = int(dominant[i])
        smallest = int(fold_sizes.min())
        best = -1
        best_key = None
        for f in range(k):
            if fold_sizes[f] != smallest:
                continue
            primary = int(fold_counts[f, d]) if d >= 0 else 0
            key = (primary, f)
            if best_key is None or key < best_key:
                best_key = key
                best = f
        assignment[data.images[i].id] = best
        fold_sizes[best] += 1
        fold_counts[best] += counts[i]

    stats = tuple(
        FoldStats(int(fold_sizes[f]), tuple(int(c) for c in fold_counts[f]))
        for f in range(k)
    )
    return FoldPlan(k, seed, assignment, data.category_names(), stats)


def fold_report(plan: FoldPlan) -> list[dict]:
    """Per-fold distribution rows: image count plus one column per category."""
    rows = []
    for f, stats in enumerate(plan.per_fold_stats):
        row: dict = {"fold": f, "images": stats.images}
        for name, count in zip(plan.category_names, stats.category_counts):
            row[name] = count
        rows.append(row)
    return rows


def format_fold_report(rows: list[dict]) -> str:
    if not rows:
        return "(empty plan)"
    headers = list(rows[0].keys())
    table = [headers] + [[str(r[h]) for h in headers] for r in rows]
    widths = [max(len(line[i]) for line in table) for i in range(len(headers))]
    lines = ["  ".join(cell.rjust(w) for cell, w in zip(line, widths)) for line in table]
    return "\n".join(lines)


def select_training_view(
    data: AnnotationSet,
    plan: FoldPlan,
    val_fold: int,
    augmented: AnnotationSet | None = None,
) -> tuple[AnnotationSet, AnnotationSet]:
    """Split into (train, validation) sets for one fold choice.

    Train is every non-validation fold plus the augmented counterparts of
    those images; validation is the chosen fold's originals only. Passing an
    augmented copy of a validation-fold image raises :class:`LeakageError`.
    """
    if not 0 <= val_fold < plan.k:
        raise DatasetError(f"val_fold {val_fold} out of range for k={plan.k}")
    val_ids = {i for i, f in plan.assignment.items() if f == val_fold}
    train_ids = {i for i in plan.assignment if i not in val_ids}
    val_set = data.subset(val_ids)
    train_set = data.subset(train_ids)
    if augmented is None:
        return train_set, val_set

    seen_originals: set[int] = set()
    for img in augmented.images:
        original = img.provenance
        if original is None:
            # Fall back to the annotation-level links.
            prov = {a.provenance for a in augmented.annotations_of(img.id)}
            prov.discard(None)
            if len(prov) != 1:
                raise DatasetError(
                    f"augmented image {img.id} lacks a single provenance original"
                )
            original = prov.pop()
        if original in val_ids:
            raise LeakageError(
                f"augmented image {img.id} duplicates validation image {original}"
            )
        if original not in train_ids:
            raise DanglingReferenceError(
                f"augmented image {img.id} references unknown original {original}"
            )
        if original in seen_originals:
            raise DuplicateIdError(
                f"original image {original} has more than one augmented copy"
            )
        seen_originals.add(original)

    if augmented.category_names() != data.category_names():
        raise DatasetError("augmented corpus uses a different category vocabulary")
    merged = AnnotationSet(
        train_set.images + augmented.images,
        data.categories,
        train_set.annotations + augmented.annotations,
    )
    return merged, val_set

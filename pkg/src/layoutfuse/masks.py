"""Binary masks, run-length codecs, polygon rasterization, and pairwise geometry.

Masks are stored run-length encoded in column-major order, counts alternating
zero-runs and one-runs starting with the zero-run (length 0 when the first
pixel is set). This matches the uncompressed COCO layout, so detector exports
interoperate directly.

Conventions pinned here and relied on by the metric stack:

* ``mask_iou`` of two empty masks is 0.0 (a vacuous match is still a failure).
* ``mask_dice`` of two empty masks is 1.0 (absent on both sides scores perfectly).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import kernels


class ShapeMismatchError(ValueError):
    """Raised when an operation mixes masks of different grid sizes."""


class CorruptMaskError(ValueError):
    """Raised when run-length counts are inconsistent with the grid."""


class EmptyMaskError(ValueError):
    """Raised when an operation requires at least one set pixel."""


def _canonical_counts(counts: Sequence[int], npixels: int) -> tuple[int, ...]:
    """Validate counts and collapse non-canonical zero-length runs.

    Canonical form: alternating runs starting with the zero-run, a zero count
    allowed only in position 0 (and only when the mask starts with a set
    pixel).
    """
    total = 0
    runs: list[int] = []  # canonical alternating counts, zero-run first
    value = 0
    for c in counts:
        c = int(c)
        if c < 0:
            raise CorruptMaskError(f"negative run length {c}")
        total += c
        if c > 0:
            if not runs:
                if value == 1:
                    runs.append(0)
                runs.append(c)
            elif (len(runs) - 1) % 2 == value:
                runs[-1] += c
            else:
                runs.append(c)
        value ^= 1
    if total != npixels:
        raise CorruptMaskError(
            f"run lengths sum to {total}, expected {npixels} pixels"
        )
    if not runs:  # zero-area grid is rejected upstream; defensive
        runs = [0]
    return tuple(runs)


@dataclass(frozen=True)
class BinaryMask:
    """Run-length encoded bitmap over an ``height x width`` grid."""

    height: int
    width: int
    counts: tuple[int, ...]

    def __post_init__(self) -> None:
        if self.height < 1 or self.width < 1:
            raise CorruptMaskError(
                f"grid must be at least 1x1, got {self.height}x{self.width}"
            )
        object.__setattr__(
            self, "counts", _canonical_counts(self.counts, self.height * self.width)
        )

    @property
    def area(self) -> int:
        """Number of set pixels."""
        return sum(self.counts[1::2])

    def counts_array(self) -> np.ndarray:
        return np.asarray(self.counts, dtype=np.int64)

    def to_json(self) -> dict:
        return {"size": [self.height, self.width], "counts": list(self.counts)}

    @classmethod
    def from_json(cls, obj: dict) -> "BinaryMask":
        try:
            h, w = obj["size"]
            counts = obj["counts"]
        except (KeyError, TypeError, ValueError) as exc:
            raise CorruptMaskError(f"malformed RLE object: {obj!r}") from exc
        return cls(int(h), int(w), tuple(counts))


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned pixel box, half-open on the max edges."""

    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self) -> None:
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box {self}")

    @property
    def area(self) -> int:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)


@dataclass(frozen=True)
class Polygon:
    """Closed ring of (x, y) vertices in pixel coordinates."""

    vertices: tuple[tuple[float, float], ...]

    def __post_init__(self) -> None:
        verts = tuple((float(x), float(y)) for x, y in self.vertices)
        if len(verts) < 3:
            raise ValueError(f"polygon needs at least 3 vertices, got {len(verts)}")
        object.__setattr__(self, "vertices", verts)

    @classmethod
    def from_flat(cls, coords: Iterable[float]) -> "Polygon":
        """Build from a flat [x0, y0, x1, y1, ...] coordinate list."""
        flat = list(coords)
        if len(flat) % 2 != 0:
            raise ValueError("flat coordinate list has odd length")
        return cls(tuple(zip(flat[0::2], flat[1::2])))


def encode_rle(bitmap: np.ndarray) -> BinaryMask:
    """Encode a 2-D boolean grid column-major, zero-run first."""
    bitmap = np.asarray(bitmap)
    if bitmap.ndim != 2 or bitmap.size == 0:
        raise CorruptMaskError(f"expected a non-empty 2-D grid, got shape {bitmap.shape}")
    h, w = bitmap.shape
    counts = kernels.rle_encode(bitmap.ravel(order="F"))
    return BinaryMask(h, w, tuple(int(c) for c in counts))


def decode_rle(mask: BinaryMask) -> np.ndarray:
    """Decode to a 2-D boolean grid; exact inverse of :func:`encode_rle`."""
    n = mask.height * mask.width
    flat = kernels.rle_decode(mask.counts_array(), n)
    return flat.reshape((mask.height, mask.width), order="F")


def rasterize_polygon(poly: Polygon, height: int, width: int) -> BinaryMask:
    """Even-odd fill with pixel-center sampling; geometry outside the grid is
    clipped. A polygon with no covered pixel centers yields an empty mask."""
    if height < 1 or width < 1:
        raise CorruptMaskError(f"grid must be at least 1x1, got {height}x{width}")
    xs = np.array([v[0] for v in poly.vertices], dtype=np.float64)
    ys = np.array([v[1] for v in poly.vertices], dtype=np.float64)
    grid = kernels.fill_polygon(xs, ys, height, width)
    return encode_rle(grid)


def rasterize_rings(rings: Sequence[Polygon], height: int, width: int) -> BinaryMask:
    """Union of independently filled rings (multi-part annotation geometry)."""
    if len(rings) == 1:
        return rasterize_polygon(rings[0], height, width)
    acc = np.zeros((height, width), dtype=np.bool_)
    for ring in rings:
        xs = np.array([v[0] for v in ring.vertices], dtype=np.float64)
        ys = np.array([v[1] for v in ring.vertices], dtype=np.float64)
        acc |= kernels.fill_polygon(xs, ys, height, width)
    return encode_rle(acc)


def _check_same_grid(a: BinaryMask, b: BinaryMask) -> None:
    if a.height != b.height or a.width != b.width:
        raise ShapeMismatchError(
            f"mask grids differ: {a.height}x{a.width} vs {b.height}x{b.width}"
        )


def mask_intersection_area(a: BinaryMask, b: BinaryMask) -> int:
    """|A ∩ B| computed directly on the run lists, no dense decode."""
    _check_same_grid(a, b)
    return kernels.rle_overlap(a.counts_array(), b.counts_array())


def mask_iou(a: BinaryMask, b: BinaryMask) -> float:
    """|A ∩ B| / |A ∪ B|; 0.0 when both masks are empty."""
    inter = mask_intersection_area(a, b)
    union = a.area + b.area - inter
    if union == 0:
        return 0.0
    return inter / union


def mask_iou_dense(a: BinaryMask, b: BinaryMask) -> float:
    """Decoded-bitmap IoU; must agree exactly with :func:`mask_iou`."""
    _check_same_grid(a, b)
    fa = decode_rle(a)
    fb = decode_rle(b)
    inter = int(np.count_nonzero(fa & fb))
    union = int(np.count_nonzero(fa | fb))
    if union == 0:
        return 0.0
    return inter / union


def mask_dice(a: BinaryMask, b: BinaryMask) -> float:
    """2|A ∩ B| / (|A| + |B|); 1.0 when both masks are empty."""
    inter = mask_intersection_area(a, b)
    denom = a.area + b.area
    if denom == 0:
        return 1.0
    return 2.0 * inter / denom


def box_iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def mask_to_bbox(mask: BinaryMask) -> BoundingBox:
    """Tightest box covering all set pixels; rejects empty masks."""
    c = mask.counts_array()
    ends = np.cumsum(c)
    starts = ends - c
    s = starts[1::2]
    e = ends[1::2]
    keep = e > s
    s = s[keep]
    e = e[keep]
    if s.size == 0:
        raise EmptyMaskError("cannot take the bounding box of an empty mask")
    h = mask.height
    last = e - 1
    col_s = s // h
    col_e = last // h
    x_min = int(col_s.min())
    x_max = int(col_e.max()) + 1
    single = col_s == col_e
    row_min = np.where(single, s % h, 0)
    row_max = np.where(single, last % h, h - 1)
    return BoundingBox(x_min, int(row_min.min()), x_max, int(row_max.max()) + 1)

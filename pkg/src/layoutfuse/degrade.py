"""Deterministic document-image degradation: blur, bleed-through, salt,
pepper, morphological open and close.

All effects are photometric or morphological, never geometric, so annotation
masks stay valid for the degraded copies. Randomness comes from a
counter-based (Philox) stream keyed by (seed, image key, effect kind), which
makes the augmented corpus reproducible regardless of processing order.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import kernels
from .dataset import Annotation, AnnotationSet, ImageInfo

EFFECT_KINDS = ("blur", "bleed_through", "salt", "pepper", "open", "close")


class DegradeError(ValueError):
    pass


@dataclass(frozen=True)
class EffectSpec:
    """One degradation step; ``value`` is sigma, alpha, fraction, or radius
    depending on the kind. ``probability`` gates per-image application."""

    kind: str
    value: float
    probability: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in EFFECT_KINDS:
            raise DegradeError(f"unknown effect kind {self.kind!r}")
        if not 0.0 <= self.probability <= 1.0:
            raise DegradeError(f"effect probability {self.probability} out of [0,1]")
        v = self.value
        if self.kind == "blur" and not v > 0:
            raise DegradeError(f"blur sigma must be > 0, got {v}")
        if self.kind == "bleed_through" and not 0.0 <= v <= 1.0:
            raise DegradeError(f"bleed alpha {v} out of [0,1]")
        if self.kind in ("salt", "pepper") and not 0.0 <= v <= 1.0:
            raise DegradeError(f"{self.kind} fraction {v} out of [0,1]")
        if self.kind in ("open", "close") and (v < 1 or v != int(v)):
            raise DegradeError(f"{self.kind} kernel radius must be an integer >= 1")


@dataclass(frozen=True)
class DegradationConfig:
    effects: tuple[EffectSpec, ...]
    seed: int

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "effects": [
                {"kind": e.kind, "value": e.value, "probability": e.probability}
                for e in self.effects
            ],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "DegradationConfig":
        effects = tuple(
            EffectSpec(e["kind"], float(e["value"]), float(e.get("probability", 1.0)))
            for e in obj["effects"]
        )
        return cls(effects, int(obj["seed"]))

    @classmethod
    def default(cls, seed: int) -> "DegradationConfig":
        """Mild defaults that keep document text legible; each effect fires
        with probability 0.5 per image."""
        return cls(
            effects=(
                EffectSpec("blur", 1.5, 0.5),
                EffectSpec("bleed_through", 0.25, 0.5),
                EffectSpec("salt", 0.02, 0.5),
                EffectSpec("pepper", 0.02, 0.5),
                EffectSpec("open", 1, 0.5),
                EffectSpec("close", 1, 0.5),
            ),
            seed=seed,
        )


def _check_gray(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 2 or img.size == 0:
        raise DegradeError(f"expected a non-empty 2-D grayscale image, got {img.shape}")
    if img.dtype != np.uint8:
        raise DegradeError(f"expected uint8 intensities, got {img.dtype}")
    return img


def _round_half_up_u8(values: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(values + 0.5), 0, 255).astype(np.uint8)


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = math.ceil(3.0 * sigma)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Gaussian blur, kernel truncated at radius ceil(3*sigma), clamp-to-edge."""
    img = _check_gray(img)
    if not sigma > 0:
        raise DegradeError(f"blur sigma must be > 0, got {sigma}")
    out = kernels.convolve_separable(img.astype(np.float64), gaussian_kernel(sigma))
    return _round_half_up_u8(out)


def bleed_through(img: np.ndarray, alpha: float) -> np.ndarray:
    """Blend with the horizontal mirror, simulating verso ink show-through."""
    img = _check_gray(img)
    if not 0.0 <= alpha <= 1.0:
        raise DegradeError(f"bleed alpha {alpha} out of [0,1]")
    mixed = (1.0 - alpha) * img.astype(np.float64) + alpha * img[:, ::-1].astype(np.float64)
    return _round_half_up_u8(mixed)


def salt(img: np.ndarray, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Set each pixel to 255 independently with probability ``fraction``."""
    img = _check_gray(img)
    if not 0.0 <= fraction <= 1.0:
        raise DegradeError(f"salt fraction {fraction} out of [0,1]")
    hits = rng.random(img.shape) < fraction
    return np.where(hits, np.uint8(255), img)


def pepper(img: np.ndarray, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Set each pixel to 0 independently with probability ``fraction``."""
    img = _check_gray(img)
    if not 0.0 <= fraction <= 1.0:
        raise DegradeError(f"pepper fraction {fraction} out of [0,1]")
    hits = rng.random(img.shape) < fraction
    return np.where(hits, np.uint8(0), img)


def morphological_open(img: np.ndarray, kernel_radius: int) -> np.ndarray:
    """Grayscale erosion then dilation with a (2r+1)-square element."""
    img = _check_gray(img)
    r = int(kernel_radius)
    if r < 1:
        raise DegradeError(f"kernel radius must be >= 1, got {kernel_radius}")
    return kernels.grey_dilate(kernels.grey_erode(img, r), r)


def morphological_close(img: np.ndarray, kernel_radius: int) -> np.ndarray:
    """Grayscale dilation then erosion with a (2r+1)-square element."""
    img = _check_gray(img)
    r = int(kernel_radius)
    if r < 1:
        raise DegradeError(f"kernel radius must be >= 1, got {kernel_radius}")
    return kernels.grey_erode(kernels.grey_dilate(img, r), r)


def _image_key(image_id) -> int:
    if isinstance(image_id, (int, np.integer)):
        return int(image_id) & 0xFFFFFFFFFFFFFFFF
    digest = hashlib.sha256(str(image_id).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def effect_rng(seed: int, image_id, effect_kind: str) -> np.random.Generator:
    """Counter-based substream for one (image, effect) cell of the corpus."""
    kind_index = EFFECT_KINDS.index(effect_kind)
    seq = np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, _image_key(image_id), kind_index])
    return np.random.Generator(np.random.Philox(seq))


def apply_effect(img: np.ndarray, spec: EffectSpec, rng: np.random.Generator) -> np.ndarray:
    if spec.kind == "blur":
        return blur(img, spec.value)
    if spec.kind == "bleed_through":
        return bleed_through(img, spec.value)
    if spec.kind == "salt":
        return salt(img, spec.value, rng)
    if spec.kind == "pepper":
        return pepper(img, spec.value, rng)
    if spec.kind == "open":
        return morphological_open(img, int(spec.value))
    return morphological_close(img, int(spec.value))


def apply_pipeline(img: np.ndarray, config: DegradationConfig, image_id=0) -> np.ndarray:
    """Apply the configured effects in order.

    Substreams are keyed by effect kind, so adding an effect to the list does
    not perturb the randomness of the others.
    """
    return _apply_pipeline_traced(img, config, image_id)[0]


def _apply_pipeline_traced(
    img: np.ndarray, config: DegradationConfig, image_id=0
) -> tuple[np.ndarray, list[str]]:
    img = _check_gray(img)
    applied: list[str] = []
    for spec in config.effects:
        rng = effect_rng(config.seed, image_id, spec.kind)
        if rng.random() >= spec.probability:
            continue
        img = apply_effect(img, spec, rng)
        applied.append(spec.kind)
    return img, applied


def load_gray_image(path: str | Path) -> np.ndarray:
    """Read a PNG as 8-bit grayscale (RGB converted via BT.601 luma)."""
    path = Path(path)
    if not path.is_file():
        raise DegradeError(f"image file not found: {path}")
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("L"), dtype=np.uint8)
    except OSError as exc:
        raise DegradeError(f"cannot read image {path}: {exc}") from exc


def save_gray_image(img: np.ndarray, path: str | Path) -> None:
    Image.fromarray(_check_gray(img), mode="L").save(path, format="PNG")


def degrade_fold(
    data: AnnotationSet,
    images_dir: str | Path,
    config: DegradationConfig,
    output_dir: str | Path,
    image_id_offset: int | None = None,
    annotation_id_offset: int | None = None,
    error_sink: list[tuple[str, str]] | None = None,
) -> AnnotationSet:
    """Write degraded copies of every image in ``data`` and return the
    augmented annotation set with provenance links back to the originals.

    Offsets default to the next power of ten above the corpus' max ids so
    folds degraded separately never collide. With an ``error_sink``, per-file
    failures are collected there (and those images skipped) instead of
    raising on the first one.
    """
    images_dir = Path(images_dir)
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    if image_id_offset is None:
        image_id_offset = id_offset(max((i.id for i in data.images), default=0))
    if annotation_id_offset is None:
        annotation_id_offset = id_offset(max((a.id for a in data.annotations), default=0))

    new_images: list[ImageInfo] = []
    new_annotations: list[Annotation] = []
    done: set[int] = set()
    manifest: dict[str, dict] = {}
    for img in data.images:
        src = images_dir / img.file_name
        try:
            pixels = load_gray_image(src)
            if pixels.shape != (img.height, img.width):
                raise DegradeError(
                    f"{src} is {pixels.shape[0]}x{pixels.shape[1]}, "
                    f"catalog says {img.height}x{img.width}"
                )
            degraded, applied = _apply_pipeline_traced(pixels, config, image_id=img.id)
            out_name = f"degraded__{img.file_name}"
            save_gray_image(degraded, output_dir / out_name)
        except (DegradeError, OSError) as exc:
            if error_sink is None:
                raise
            error_sink.append((img.file_name, str(exc)))
            continue
        done.add(img.id)
        new_images.append(
            ImageInfo(
                id=img.id + image_id_offset,
                file_name=out_name,
                height=img.height,
                width=img.width,
                provenance=img.id,
            )
        )
        manifest[out_name] = {
            "original": img.file_name,
            "effects": applied,
            "seed": config.seed,
        }
    for ann in data.annotations:
        if ann.image_id not in done:
            continue
        new_annotations.append(
            Annotation(
                id=ann.id + annotation_id_offset,
                image_id=ann.image_id + image_id_offset,
                category_id=ann.category_id,
                segmentation=ann.segmentation,
                provenance=ann.image_id,
            )
        )
    augmented = AnnotationSet(tuple(new_images), data.categories, tuple(new_annotations))
    (output_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return augmented


def id_offset(max_id: int) -> int:
    return 10 ** len(str(max(max_id, 1)))

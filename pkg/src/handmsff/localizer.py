"""Hand region localization and crop extraction with invertible transforms.

The learned region detector is out of scope here; an oracle derived from
ground-truth joints stands in for it, behind a small detector protocol so
a trained localizer can be slotted in later without touching the rest of
the pipeline.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional, Protocol, Sequence

import numpy as np

from .errors import ContractViolation

#: Smallest region side the cropper accepts, in source pixels.
MIN_REGION_SIDE = 4.0


@dataclass(frozen=True)
class HandRegion:
    """Axis-aligned square-ish region in source-image pixels."""

    x: float
    y: float
    w: float
    h: float


@dataclass(frozen=True)
class HandCrop:
    """Fixed-size crop plus the affine map from crop pixels back to source pixels."""

    pixels: np.ndarray  # (3, S, S) floats in [0, 1]
    offset_x: float
    offset_y: float
    scale: float  # crop px -> source px

    def to_source(self, coords: np.ndarray) -> np.ndarray:
        coords = np.asarray(coords, dtype=np.float64)
        return coords * self.scale + np.array([self.offset_x, self.offset_y])

    def to_crop(self, coords: np.ndarray) -> np.ndarray:
        coords = np.asarray(coords, dtype=np.float64)
        return (coords - np.array([self.offset_x, self.offset_y])) / self.scale


class HandDetector(Protocol):
    """Anything that proposes hand regions for an image."""

    def detect(self, image: np.ndarray, annotation=None) -> list[HandRegion]:
        ...


def oracle_region(joints: np.ndarray, visible: np.ndarray,
                  image_size: tuple[int, int], margin: float = 0.25,
                  ) -> Optional[HandRegion]:
    """Tight box of visible joints, padded by ``margin`` per side, squared, clamped.

    Returns None when no joint is visible. ``image_size`` is (width, height).
    """
    joints = np.asarray(joints, dtype=np.float64)
    visible = np.asarray(visible, dtype=bool)
    if not visible.any():
        return None
    pts = joints[visible]
    x0, y0 = pts.min(axis=0)
    x1, y1 = pts.max(axis=0)
    w = (x1 - x0) * (1.0 + 2.0 * margin)
    h = (y1 - y0) * (1.0 + 2.0 * margin)
    cx, cy = (x0 + x1) / 2.0, (y0 + y1) / 2.0
    side = max(w, h, MIN_REGION_SIDE)
    img_w, img_h = image_size
    side = min(side, float(min(img_w, img_h)))
    x = min(max(cx - side / 2.0, 0.0), img_w - side)
    y = min(max(cy - side / 2.0, 0.0), img_h - side)
    return HandRegion(x=x, y=y, w=side, h=side)


def detect_hands_oracle(annotation, margin: float = 0.25) -> list[HandRegion]:
    """Oracle detector: one region per hand that has at least one visible joint.

    Hands with every joint occluded are skipped with a warning.
    """
    regions = []
    for idx, hand in enumerate(annotation.hands):
        joints = np.asarray(hand.joints, dtype=np.float64)
        region = oracle_region(joints, hand.visible, annotation.image_size, margin)
        if region is None:
            warnings.warn(
                f"hand {idx} in {annotation.image_path} has no visible joints; skipped",
                stacklevel=2,
            )
            continue
        regions.append(region)
    return regions


class OracleDetector:
    """Detector backed by ground-truth annotations."""

    def __init__(self, margin: float = 0.25):
        self.margin = margin

    def detect(self, image, annotation=None):
        if annotation is None:
            raise ContractViolation("oracle detector needs an annotation")
        return detect_hands_oracle(annotation, margin=self.margin)


class FullFrameDetector:
    """Single centered square region covering as much of the frame as possible.

    Fallback for prediction on images without annotations.
    """

    def detect(self, image, annotation=None):
        h, w = np.asarray(image).shape[-2:]
        side = float(min(w, h))
        return [HandRegion(x=(w - side) / 2.0, y=(h - side) / 2.0, w=side, h=side)]


def _bilinear_sample(image: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample (3, H, W) at float coordinate grids, clamping at the border."""
    _, h, w = image.shape
    xs = np.clip(xs, 0.0, w - 1.0)
    ys = np.clip(ys, 0.0, h - 1.0)
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (xs - x0)[None]
    fy = (ys - y0)[None]
    top = image[:, y0, x0] * (1 - fx) + image[:, y0, x1] * fx
    bot = image[:, y1, x0] * (1 - fx) + image[:, y1, x1] * fx
    return top * (1 - fy) + bot * fy


def crop_hand(image: np.ndarray, region: HandRegion, crop_size: int = 256) -> HandCrop:
    """Extract a region and bilinear-resize it to (3, crop_size, crop_size).

    Pixel values are rescaled to [0, 1] if the image is 8-bit. The recorded
    transform sends crop pixel (u, v) to source pixel
    (offset_x + u * scale, offset_y + v * scale).
    """
    image = np.asarray(image)
    if image.dtype == np.uint8:
        image = image.astype(np.float32) / 255.0
    if region.w < MIN_REGION_SIDE or region.h < MIN_REGION_SIDE:
        raise ContractViolation(
            f"degenerate region {region.w:.1f}x{region.h:.1f} (min side {MIN_REGION_SIDE})"
        )
    if abs(region.w - region.h) > 1e-6 * max(region.w, region.h):
        raise ContractViolation("crop regions must be square (single-scale transform)")
    _, img_h, img_w = image.shape
    if region.x < 0 or region.y < 0 or region.x + region.w > img_w + 1e-6 \
            or region.y + region.h > img_h + 1e-6:
        raise ContractViolation("region extends outside the image")
    scale = region.w / crop_size
    xs = region.x + np.arange(crop_size) * scale
    ys = region.y + np.arange(crop_size) * scale
    grid_x = np.broadcast_to(xs[None, :], (crop_size, crop_size))
    grid_y = np.broadcast_to(ys[:, None], (crop_size, crop_size))
    pixels = _bilinear_sample(image, grid_x, grid_y).astype(np.float32)
    return HandCrop(pixels=pixels, offset_x=region.x, offset_y=region.y, scale=scale)


def map_to_source(coords: np.ndarray, crop: HandCrop, heatmap_size: int) -> np.ndarray:
    """Heatmap grid coordinates -> crop pixels -> source pixels."""
    crop_size = crop.pixels.shape[-1]
    stride = crop_size / heatmap_size
    return crop.to_source(np.asarray(coords, dtype=np.float64) * stride)


def map_to_heatmap(coords: np.ndarray, crop: HandCrop, heatmap_size: int) -> np.ndarray:
    """Source pixels -> heatmap grid coordinates (inverse of :func:`map_to_source`)."""
    crop_size = crop.pixels.shape[-1]
    stride = crop_size / heatmap_size
    return crop.to_crop(coords) / stride

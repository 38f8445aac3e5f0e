"""Region-of-interest extraction, square crop/resize and ImageNet-statistics normalization."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from typing import Optional, Tuple

import numpy as np
from scipy import ndimage

from .imaging import resize_bilinear, to_gray

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

_EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


class DegenerateImageError(ValueError):
    """Histogram has a single occupied bin; no threshold separates anything."""


class NoForegroundError(ValueError):
    """Mask has no foreground pixels."""


@dataclass(frozen=True)
class RoiBox:
    """Half-open pixel box [x0, x1) × [y0, y1)."""

    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        if not (0 <= self.x0 < self.x1 and 0 <= self.y0 < self.y1):
            raise ValueError(f"invalid ROI box {self}")

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    @classmethod
    def full(cls, height: int, width: int) -> "RoiBox":
        return cls(0, 0, width, height)

    def validate(self, height: int, width: int) -> None:
        if self.x1 > width or self.y1 > height:
            raise ValueError(f"ROI box {self} exceeds frame {width}x{height}")


@dataclass
class PreprocessConfig:
    side: int = 64
    threshold: Optional[int] = None  # fixed threshold overriding Otsu
    margin: float = 0.02
    mean: Tuple[float, float, float] = IMAGENET_MEAN
    std: Tuple[float, float, float] = IMAGENET_STD

    def fingerprint(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def otsu_threshold(gray: np.ndarray) -> int:
    """Threshold T maximizing between-class variance of {v < T} vs {v >= T}.

    Ties resolve to the smallest T.
    """
    hist = np.bincount(np.asarray(gray, dtype=np.uint8).ravel(), minlength=256).astype(np.float64)
    if np.count_nonzero(hist) < 2:
        raise DegenerateImageError("image has a single intensity level")
    p = hist / hist.sum()
    levels = np.arange(256, dtype=np.float64)
    w0 = np.concatenate([[0.0], np.cumsum(p)[:-1]])  # weight of values < t
    m0 = np.concatenate([[0.0], np.cumsum(p * levels)[:-1]])
    mu_total = float((p * levels).sum())
    w1 = 1.0 - w0
    valid = (w0 > 0) & (w1 > 0)
    between = np.full(256, -1.0)
    between[valid] = (mu_total * w0[valid] - m0[valid]) ** 2 / (w0[valid] * w1[valid])
    return int(np.argmax(between))


def binary_threshold(gray: np.ndarray, threshold: Optional[int] = None) -> Tuple[np.ndarray, int]:
    """Foreground mask (pixel >= T) and the threshold used.

    Raises DegenerateImageError for constant images when T is chosen by Otsu.
    """
    if gray.ndim != 2:
        raise ValueError(f"binary_threshold expects a single-channel image, got shape {gray.shape}")
    t = otsu_threshold(gray) if threshold is None else int(threshold)
    return (gray >= t).astype(np.uint8), t


def largest_component(mask: np.ndarray) -> np.ndarray:
    """Boolean mask of the largest 8-connected foreground component (ties: first in raster order)."""
    labels, count = ndimage.label(mask > 0, structure=_EIGHT_CONNECTED)
    if count == 0:
        raise NoForegroundError("mask has no foreground")
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    return labels == int(np.argmax(sizes))


def largest_contour_bbox(mask: np.ndarray, margin: float = 0.02) -> RoiBox:
    """Tight box of the largest 8-connected component, grown by ``margin`` of each frame dimension."""
    comp = largest_component(mask)
    rows = np.flatnonzero(comp.any(axis=1))
    cols = np.flatnonzero(comp.any(axis=0))
    h, w = mask.shape
    mx, my = int(round(margin * w)), int(round(margin * h))
    return RoiBox(
        max(0, int(cols[0]) - mx),
        max(0, int(rows[0]) - my),
        min(w, int(cols[-1]) + 1 + mx),
        min(h, int(rows[-1]) + 1 + my),
    )


def find_roi(img: np.ndarray, config: PreprocessConfig = PreprocessConfig()) -> RoiBox:
    """Threshold then contour box; degenerate or empty masks fall back to the full frame."""
    gray = to_gray(img)
    try:
        mask, _ = binary_threshold(gray, config.threshold)
        return largest_contour_bbox(mask, config.margin)
    except (DegenerateImageError, NoForegroundError):
        return RoiBox.full(*gray.shape)


@dataclass(frozen=True)
class CropGeometry:
    """Maps output pixel (u, v) of a crop_resize back to source (x, y): x = ox + scale*(u+0.5) - 0.5."""

    scale: float
    ox: float
    oy: float

    def to_source(self, u, v):
        return self.ox + self.scale * (np.asarray(u) + 0.5) - 0.5, self.oy + self.scale * (np.asarray(v) + 0.5) - 0.5

    def to_output(self, x, y):
        return (np.asarray(x) + 0.5 - self.ox) / self.scale - 0.5, (np.asarray(y) + 0.5 - self.oy) / self.scale - 0.5


def crop_geometry(box: RoiBox, side: int) -> CropGeometry:
    s = max(box.width, box.height)
    pad_x = (s - box.width) // 2
    pad_y = (s - box.height) // 2
    return CropGeometry(scale=s / side, ox=box.x0 - pad_x, oy=box.y0 - pad_y)


def crop_resize(img: np.ndarray, box: RoiBox, side: int) -> np.ndarray:
    """Crop to ``box``, zero-letterbox to square, bilinearly resize to side×side (uint8)."""
    box.validate(img.shape[0], img.shape[1])
    crop = img[box.y0 : box.y1, box.x0 : box.x1]
    h, w = crop.shape[:2]
    s = max(h, w)
    top, left = (s - h) // 2, (s - w) // 2
    square = np.zeros((s, s) + crop.shape[2:], dtype=img.dtype)
    square[top : top + h, left : left + w] = crop
    if s == side:
        return square
    if square.ndim == 2:
        out = resize_bilinear(square, side, side)
    else:
        out = np.stack([resize_bilinear(square[:, :, c], side, side) for c in range(square.shape[2])], axis=2)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def normalize(img: np.ndarray, mean=IMAGENET_MEAN, std=IMAGENET_STD) -> np.ndarray:
    """H×W(×C) image -> float32 [3, H, W] with per-channel (v - mean)/std.

    uint8 input is scaled by 1/255; float input is taken to be in [0, 1].
    Grayscale is replicated to three channels.
    """
    arr = np.asarray(img)
    v = arr.astype(np.float64) / 255.0 if arr.dtype == np.uint8 else arr.astype(np.float64)
    if v.ndim == 2:
        v = np.repeat(v[None], 3, axis=0)
    else:
        v = np.moveaxis(v[:, :, :3], 2, 0)
    m = np.asarray(mean, dtype=np.float64)[:, None, None]
    s = np.asarray(std, dtype=np.float64)[:, None, None]
    return ((v - m) / s).astype(np.float32)


def denormalize(t: np.ndarray, mean=IMAGENET_MEAN, std=IMAGENET_STD) -> np.ndarray:
    """Inverse of :func:`normalize`: [3, H, W] -> float64 H×W×3 in intensity units of [0, 1]."""
    t = np.asarray(t, dtype=np.float64)
    m = np.asarray(mean, dtype=np.float64)[:, None, None]
    s = np.asarray(std, dtype=np.float64)[:, None, None]
    return np.moveaxis(t * s + m, 0, 2)


def preprocess_image(img: np.ndarray, config: PreprocessConfig = PreprocessConfig()):
    """ROI crop of a decoded view: returns (side×side uint8 gray crop, box, geometry)."""
    gray = to_gray(img)
    box = find_roi(gray, config)
    return crop_resize(gray, box, config.side), box, crop_geometry(box, config.side)

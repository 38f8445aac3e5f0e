"""Class activation maps from the final feature map and the linear head, and PNG overlays."""

from __future__ import annotations

from typing import Optional, Tuple

import numpy as np

from .imaging import resize_bilinear, to_gray, write_png
from .preprocess import CropGeometry

ALPHA = 0.4


def cam(features, head_weight) -> np.ndarray:
    """Raw map(y, x) = Σ_c w[c] · features[0, c, y, x] for one image.

    With a global-average-pool + linear head, ``map.mean() + bias`` is the logit.
    """
    f = np.asarray(getattr(features, "data", features), dtype=np.float64)
    w = np.asarray(getattr(head_weight, "data", head_weight), dtype=np.float64)
    if f.ndim == 4:
        if f.shape[0] != 1:
            raise ValueError(f"cam expects features for a single image, got batch of {f.shape[0]}")
        f = f[0]
    if f.ndim != 3:
        raise ValueError(f"cam expects features [1,C,h,w] or [C,h,w], got {f.shape}")
    w = w.reshape(-1)
    if w.size != f.shape[0]:
        raise ValueError(f"head weight has {w.size} channels but features have {f.shape[0]}")
    return np.tensordot(w, f, axes=1)


def normalize_map(raw: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant map becomes uniformly 0.5."""
    raw = np.asarray(raw, dtype=np.float64)
    lo, hi = raw.min(), raw.max()
    if hi - lo <= 0:
        return np.full(raw.shape, 0.5)
    return (raw - lo) / (hi - lo)


def upsample(values: np.ndarray, height: int, width: int) -> np.ndarray:
    return np.clip(resize_bilinear(values, height, width), 0.0, 1.0)


def overlay(img: np.ndarray, raw: np.ndarray) -> np.ndarray:
    """Grayscale radiograph with red blended in at alpha = 0.4·heat; returns uint8 H×W×3."""
    gray = to_gray(img).astype(np.float64)
    heat = upsample(normalize_map(raw), gray.shape[0], gray.shape[1])
    alpha = ALPHA * heat
    rgb = np.repeat(gray[..., None], 3, axis=2)
    rgb[..., 0] = (1 - alpha) * gray + alpha * 255.0
    rgb[..., 1] = (1 - alpha) * gray
    rgb[..., 2] = (1 - alpha) * gray
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


def render_overlay(img: np.ndarray, raw: np.ndarray, out) -> np.ndarray:
    rgb = overlay(img, raw)
    write_png(out, rgb)
    return rgb


def peak_location(raw: np.ndarray, side: int, geometry: Optional[CropGeometry] = None) -> Tuple[float, float]:
    """(x, y) of the heatmap maximum after upsampling to the network input side.

    With ``geometry`` the point is mapped back to original image coordinates.
    """
    heat = resize_bilinear(np.asarray(raw, dtype=np.float64), side, side)
    y, x = np.unravel_index(int(np.argmax(heat)), heat.shape)
    if geometry is None:
        return float(x), float(y)
    sx, sy = geometry.to_source(float(x), float(y))
    return float(sx), float(sy)

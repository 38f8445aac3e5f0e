"""PNG input/output and bilinear resampling shared by preprocessing, augmentation and CAM."""

from __future__ import annotations

import os

import numpy as np
from PIL import Image


class ImageFormatError(ValueError):
    pass


def read_png(path) -> np.ndarray:
    """Decode an 8-bit PNG into uint8 H×W (grayscale) or H×W×3 (RGB)."""
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode.startswith("I") or mode == "F":
                raise ImageFormatError(f"{path}: {mode} images are not 8-bit; only 8-bit PNG is supported")
            if mode in ("1", "L", "LA"):
                im = im.convert("L")
            elif mode != "RGB":
                im = im.convert("RGB")
            return np.asarray(im, dtype=np.uint8).copy()
    except ImageFormatError:
        raise
    except (OSError, SyntaxError) as exc:
        raise ImageFormatError(f"cannot decode image {path}: {exc}") from exc


def write_png(path, pixels: np.ndarray) -> None:
    arr = np.asarray(pixels)
    if arr.dtype != np.uint8:
        raise ImageFormatError(f"write_png expects uint8 pixels, got {arr.dtype}")
    parent = os.path.dirname(os.fspath(path))
    if parent:
        os.makedirs(parent, exist_ok=True)
    Image.fromarray(arr).save(path, format="PNG")


def to_gray(img: np.ndarray) -> np.ndarray:
    """uint8 luminance (ITU-R 601 weights) for RGB input; grayscale passes through."""
    if img.ndim == 2:
        return img
    if img.ndim == 3 and img.shape[2] == 1:
        return img[:, :, 0]
    lum = img[:, :, :3].astype(np.float64) @ np.array([0.299, 0.587, 0.114])
    return np.clip(np.rint(lum), 0, 255).astype(np.uint8)


def bilinear_sample(img: np.ndarray, xs: np.ndarray, ys: np.ndarray, fill: float | None = 0.0) -> np.ndarray:
    """Sample a 2-D float image at pixel-centre coordinates (x = column, y = row).

    Out-of-frame neighbours contribute ``fill``; ``fill=None`` clamps to the
    nearest edge pixel instead.  Integer coordinates reproduce pixels exactly.
    """
    h, w = img.shape
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    fx = xs - x0
    fy = ys - y0
    out = np.zeros(np.broadcast(xs, ys).shape, dtype=np.float64)
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            yy = y0 + dy
            xx = x0 + dx
            weight = wy * wx
            if fill is None:
                vals = img[np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)]
            else:
                inside = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
                vals = np.where(inside, img[np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)], fill)
            out += np.where(weight != 0, weight * vals, 0.0)
    return out


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centred bilinear resize of a 2-D array (edge clamped), float64 out."""
    h, w = img.shape
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    return bilinear_sample(img.astype(np.float64), xs[None, :], ys[:, None], fill=None)


def affine_warp(img: np.ndarray, matrix: np.ndarray, fill: float = 0.0) -> np.ndarray:
    """Warp a 2-D image; ``matrix`` (2×3) maps output (x, y, 1) to source (x, y)."""
    h, w = img.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    sx = matrix[0, 0] * xx + matrix[0, 1] * yy + matrix[0, 2]
    sy = matrix[1, 0] * xx + matrix[1, 1] * yy + matrix[1, 2]
    return bilinear_sample(img.astype(np.float64), sx, sy, fill=fill)

"""Training-time augmentation: horizontal flip, rotation, scaling and brightness.

Parameters are drawn from a counter-based generator keyed on
(seed, epoch, sample_index), so a sample's augmentation does not depend on
batch composition or worker scheduling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .imaging import affine_warp


@dataclass
class AugmentConfig:
    flip_prob: float = 0.5
    max_rotation: float = 30.0
    scale_range: Tuple[float, float] = (0.95, 1.30)
    brightness_range: Tuple[float, float] = (0.80, 1.20)
    enabled: bool = True

    def __post_init__(self):
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError(f"flip_prob must lie in [0, 1], got {self.flip_prob}")
        if self.max_rotation < 0:
            raise ValueError(f"max_rotation must be non-negative, got {self.max_rotation}")
        for name in ("scale_range", "brightness_range"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValueError(f"{name} must satisfy 0 < lo <= hi, got {(lo, hi)}")
            setattr(self, name, (float(lo), float(hi)))


@dataclass(frozen=True)
class AugmentParams:
    flip: bool = False
    angle: float = 0.0
    scale: float = 1.0
    brightness: float = 1.0

    @property
    def is_identity(self) -> bool:
        return not self.flip and self.angle == 0.0 and self.scale == 1.0 and self.brightness == 1.0


IDENTITY = AugmentParams()


def sample_rng(seed: int, epoch: int, sample_index: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, epoch, sample_index, stream]))


def sample_params(config: AugmentConfig, seed: int, epoch: int, sample_index: int) -> AugmentParams:
    if not config.enabled:
        return IDENTITY
    rng = sample_rng(seed, epoch, sample_index, stream=1)
    u = rng.random(4)
    lo_s, hi_s = config.scale_range
    lo_b, hi_b = config.brightness_range
    return AugmentParams(
        flip=bool(u[0] < config.flip_prob),
        angle=float(-config.max_rotation + 2 * config.max_rotation * u[1]),
        scale=float(lo_s + (hi_s - lo_s) * u[2]),
        brightness=float(lo_b + (hi_b - lo_b) * u[3]),
    )


def hflip(img: np.ndarray) -> np.ndarray:
    return img[:, ::-1].copy()


def geometry_matrix(h: int, w: int, angle: float, scale: float) -> np.ndarray:
    """Output->source map for rotate-about-centre (degrees) followed by scale-about-centre."""
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    th = math.radians(angle)
    c, s = math.cos(th), math.sin(th)
    # undo scale, then undo rotation
    a = np.array([[c, -s], [s, c]]) / scale
    offset = np.array([cx, cy]) - a @ np.array([cx, cy])
    return np.hstack([a, offset[:, None]])


def apply(img: np.ndarray, params: AugmentParams) -> np.ndarray:
    """flip -> rotate -> scale -> brightness on an image in [0, 1]; size preserved.

    Rotation and scaling are composed into a single bilinear resampling with
    zero fill for uncovered pixels.
    """
    out = np.asarray(img, dtype=np.float64)
    if params.flip:
        out = hflip(out)
    if params.angle != 0.0 or params.scale != 1.0:
        out = affine_warp(out, geometry_matrix(out.shape[0], out.shape[1], params.angle, params.scale))
    if params.brightness != 1.0:
        out = out * params.brightness
    return np.clip(out, 0.0, 1.0)

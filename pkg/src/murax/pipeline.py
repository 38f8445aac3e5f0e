"""Per-view image path from PNG file to network input: ROI crop, augmentation, normalization."""

from __future__ import annotations

import hashlib
import json
import threading
from dataclasses import asdict, replace
from typing import Dict, Tuple

import numpy as np

from . import augment as aug
from .imaging import read_png
from .preprocess import CropGeometry, PreprocessConfig, normalize, preprocess_image


class ImagePipeline:
    """Decodes and ROI-crops each view once (in memory), then augments per (epoch, sample).

    The crop cache is guarded by a lock so worker threads may share one pipeline.
    """

    def __init__(self, preprocess: PreprocessConfig, augment: aug.AugmentConfig, seed: int = 0):
        self.preprocess = preprocess
        self.augment = augment
        self.seed = seed
        self._cache: Dict[str, Tuple[np.ndarray, CropGeometry]] = {}
        self._lock = threading.Lock()

    def for_eval(self) -> "ImagePipeline":
        """Same preprocessing with augmentation disabled; shares the crop cache."""
        other = ImagePipeline(self.preprocess, replace(self.augment, enabled=False), self.seed)
        other._cache = self._cache
        other._lock = self._lock
        return other

    def with_seed(self, seed: int) -> "ImagePipeline":
        """Same configuration under another augmentation seed; shares the crop cache."""
        other = ImagePipeline(self.preprocess, self.augment, seed)
        other._cache = self._cache
        other._lock = self._lock
        return other

    def fingerprint(self) -> str:
        blob = json.dumps(
            {"preprocess": asdict(self.preprocess), "augment": asdict(self.augment), "seed": self.seed},
            sort_keys=True,
            default=list,
        ).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def crop(self, path: str) -> Tuple[np.ndarray, CropGeometry]:
        with self._lock:
            hit = self._cache.get(path)
        if hit is not None:
            return hit
        pixels, _, geom = preprocess_image(read_png(path), self.preprocess)
        with self._lock:
            self._cache[path] = (pixels, geom)
        return pixels, geom

    def eval_input(self, path: str) -> np.ndarray:
        pixels, _ = self.crop(path)
        return normalize(pixels, self.preprocess.mean, self.preprocess.std)

    def train_input(self, path: str, epoch: int, sample_index: int) -> np.ndarray:
        pixels, _ = self.crop(path)
        params = aug.sample_params(self.augment, self.seed, epoch, sample_index)
        if params.is_identity:
            return normalize(pixels, self.preprocess.mean, self.preprocess.std)
        img = aug.apply(pixels.astype(np.float64) / 255.0, params)
        return normalize(img, self.preprocess.mean, self.preprocess.std)

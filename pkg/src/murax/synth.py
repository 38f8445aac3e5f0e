"""Synthetic radiographs written in the MURA directory and CSV layout.

Each study has a latent "bone": a bright capsule on a dark noisy background.
Positive studies carry a transverse dark gap across the capsule at a latent
position shared by all of the study's views.  Views re-render the same bone
under a small rotation and translation.
"""

from __future__ import annotations

import csv
import json
import math
import os
import shutil
from dataclasses import asdict, dataclass
from typing import List, Tuple

import numpy as np

from .imaging import write_png

BODY_PARTS = ("ELBOW", "FINGER", "FOREARM", "HAND", "HUMERUS", "SHOULDER", "WRIST")

BONE_LEVEL = 200.0
BACKGROUND_LEVEL = 30.0
NOISE_SIGMA = 8.0


@dataclass
class SynthSpec:
    n_studies: int = 500
    positive_fraction: float = 0.5
    views_per_study: Tuple[int, int] = (2, 4)
    image_side: int = 64
    seed: int = 7
    body_part: str = "WRIST"
    valid_fraction: float = 0.2
    gap_depth: float = 90.0
    gap_width: Tuple[float, float] = (2.0, 6.0)
    max_view_rotation: float = 15.0

    def __post_init__(self):
        self.views_per_study = tuple(int(v) for v in self.views_per_study)
        self.gap_width = tuple(float(v) for v in self.gap_width)
        if not 0.0 <= self.positive_fraction <= 1.0:
            raise ValueError("positive_fraction must lie in [0, 1]")
        if self.image_side < 32:
            raise ValueError("image_side must be at least 32")
        if self.n_studies < 0:
            raise ValueError("n_studies must be non-negative")
        lo, hi = self.views_per_study
        if not 1 <= lo <= hi:
            raise ValueError(f"views_per_study must satisfy 1 <= lo <= hi, got {self.views_per_study}")
        if self.body_part not in BODY_PARTS:
            raise ValueError(f"unknown body part {self.body_part!r}")
        if not 0.0 <= self.valid_fraction <= 1.0:
            raise ValueError("valid_fraction must lie in [0, 1]")


def largest_remainder(total: int, fractions) -> List[int]:
    """Integer apportionment of ``total`` by ``fractions`` (largest-remainder method)."""
    fr = np.asarray(fractions, dtype=np.float64)
    fr = fr / fr.sum() if fr.sum() > 0 else np.full(len(fr), 1.0 / len(fr))
    quotas = total * fr
    counts = np.floor(quotas).astype(int)
    rem = total - int(counts.sum())
    order = sorted(range(len(fr)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:rem]:
        counts[i] += 1
    return [int(c) for c in counts]


@dataclass
class Bone:
    cx: float
    cy: float
    angle: float  # radians, axis direction
    length: float  # segment length between cap centres
    radius: float
    gap_pos: float | None = None  # axial offset from centre, pixels
    gap_width: float | None = None


def _draw_bone(rng: np.random.Generator, side: int) -> Bone:
    return Bone(
        cx=side / 2 + rng.uniform(-0.04, 0.04) * side,
        cy=side / 2 + rng.uniform(-0.04, 0.04) * side,
        angle=rng.uniform(0, math.pi),
        length=rng.uniform(0.45, 0.60) * side,
        radius=rng.uniform(0.07, 0.10) * side,
    )


def render_view(bone: Bone, side: int, rotation: float, shift: Tuple[float, float], depth: float, rng) -> Tuple[np.ndarray, Tuple[float, float] | None]:
    """Render one uint8 view; returns pixels and the gap centre in pixel coordinates."""
    cx, cy = bone.cx + shift[0], bone.cy + shift[1]
    ang = bone.angle + math.radians(rotation)
    ux, uy = math.cos(ang), math.sin(ang)
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    along = dx * ux + dy * uy
    across = -dx * uy + dy * ux
    half = bone.length / 2
    clamped = np.clip(along, -half, half)
    dist = np.hypot(along - clamped, across) - bone.radius
    inside = np.clip(0.5 - dist, 0.0, 1.0)  # one-pixel anti-aliased edge
    level = np.full((side, side), BONE_LEVEL)
    gap_xy = None
    if bone.gap_pos is not None:
        edge = bone.gap_width / 2
        gap = np.clip(edge + 0.5 - np.abs(along - bone.gap_pos), 0.0, 1.0)
        level = level - depth * gap
        gap_xy = (cx + bone.gap_pos * ux, cy + bone.gap_pos * uy)
    img = BACKGROUND_LEVEL + (level - BACKGROUND_LEVEL) * inside
    img = img + rng.normal(0.0, NOISE_SIGMA, size=img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8), gap_xy


def axis_profile_depth(img: np.ndarray, bone: Bone, rotation: float, shift: Tuple[float, float]) -> float:
    """Depth of the deepest dip in the mean intensity along the capsule axis (interior only)."""
    cx, cy = bone.cx + shift[0], bone.cy + shift[1]
    ang = bone.angle + math.radians(rotation)
    ux, uy = math.cos(ang), math.sin(ang)
    ts = np.arange(-0.35 * bone.length, 0.35 * bone.length + 1e-9, 0.5)
    ws = np.linspace(-0.6 * bone.radius, 0.6 * bone.radius, 7)
    xs = cx + ts[:, None] * ux - ws[None, :] * uy
    ys = cy + ts[:, None] * uy + ws[None, :] * ux
    from .imaging import bilinear_sample

    prof = bilinear_sample(img.astype(np.float64), xs, ys, fill=None).mean(axis=1)
    return float(np.median(prof) - prof.min())


def _split_counts(spec: SynthSpec):
    n_valid = int(round(spec.n_studies * spec.valid_fraction))
    n_train = spec.n_studies - n_valid
    n_pos, _ = largest_remainder(spec.n_studies, [spec.positive_fraction, 1 - spec.positive_fraction])
    if spec.n_studies:
        pos_train, pos_valid = largest_remainder(n_pos, [n_train, n_valid]) if n_pos else (0, 0)
    else:
        pos_train = pos_valid = 0
    # a split cannot hold more positives than studies
    pos_train, pos_valid = min(pos_train, n_train), min(pos_valid, n_valid)
    extra = n_pos - pos_train - pos_valid
    if extra > 0:
        room = n_train - pos_train
        pos_train += min(extra, room)
        pos_valid += extra - min(extra, room)
    return {"train": (n_train, pos_train), "valid": (n_valid, pos_valid)}


def generate(spec: SynthSpec, out_root, overwrite: bool = False) -> dict:
    """Write the synthetic tree, labelled-study CSVs and ``manifest.json`` under ``out_root``."""
    out_root = os.fspath(out_root)
    if os.path.isdir(out_root) and os.listdir(out_root):
        if not overwrite:
            raise FileExistsError(f"{out_root} exists and is not empty (pass overwrite to replace it)")
        shutil.rmtree(out_root)
    os.makedirs(out_root, exist_ok=True)
    prefix = os.path.basename(os.path.normpath(out_root))
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0x5EED]))
    side = spec.image_side
    studies = []
    patient = 0
    for split, (n, n_pos) in _split_counts(spec).items():
        labels = np.array([1] * n_pos + [0] * (n - n_pos))
        rng.shuffle(labels)
        image_rows, study_rows = [], []
        for label in labels:
            patient += 1
            pid = f"patient{patient:05d}"
            suffix = "positive" if label else "negative"
            rel_study = f"{split}/XR_{spec.body_part}/{pid}/study1_{suffix}"
            bone = _draw_bone(rng, side)
            if label:
                bone.gap_width = float(rng.uniform(*spec.gap_width))
                bone.gap_pos = float(rng.uniform(-0.2, 0.2) * bone.length)
            n_views = int(rng.integers(spec.views_per_study[0], spec.views_per_study[1] + 1))
            views = []
            for j in range(n_views):
                rot = float(rng.uniform(-spec.max_view_rotation, spec.max_view_rotation))
                shift = (float(rng.uniform(-0.04, 0.04) * side), float(rng.uniform(-0.04, 0.04) * side))
                pixels, gap_xy = render_view(bone, side, rot, shift, spec.gap_depth, rng)
                rel_img = f"{rel_study}/image{j + 1}.png"
                write_png(os.path.join(out_root, rel_img), pixels)
                image_rows.append([f"{prefix}/{rel_img}"])
                views.append(
                    {
                        "path": rel_img,
                        "rotation": round(rot, 6),
                        "shift": [round(shift[0], 6), round(shift[1], 6)],
                        "abnormality": None if gap_xy is None else [round(gap_xy[0], 4), round(gap_xy[1], 4)],
                        "profile_depth": round(axis_profile_depth(pixels, bone, rot, shift), 4),
                    }
                )
            study_rows.append([f"{prefix}/{rel_study}/", int(label)])
            studies.append(
                {
                    "split": split,
                    "patient_id": pid,
                    "study_id": "study1",
                    "body_part": spec.body_part,
                    "label": int(label),
                    "study_dir": rel_study,
                    "bone": {k: (None if v is None else round(float(v), 6)) for k, v in asdict(bone).items()},
                    "views": views,
                }
            )
        with open(os.path.join(out_root, f"{split}_image_paths.csv"), "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerows(image_rows)
        with open(os.path.join(out_root, f"{split}_labeled_studies.csv"), "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerows(study_rows)
    manifest = {
        "spec": asdict(spec),
        "counts": {
            split: {
                "studies": sum(1 for s in studies if s["split"] == split),
                "positive": sum(s["label"] for s in studies if s["split"] == split),
                "views": sum(len(s["views"]) for s in studies if s["split"] == split),
            }
            for split in ("train", "valid")
        },
        "studies": studies,
    }
    with open(os.path.join(out_root, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return manifest


def load_manifest(root) -> dict:
    with open(os.path.join(os.fspath(root), "manifest.json")) as fh:
        return json.load(fh)

"""Reading the MURA on-disk layout (directory tree or CSV index) into Study records, and batching."""

from __future__ import annotations

import csv
import os
import re
import warnings
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from .imaging import ImageFormatError, read_png

BODY_PARTS = ("ELBOW", "FINGER", "FOREARM", "HAND", "HUMERUS", "SHOULDER", "WRIST")
SPLITS = ("train", "valid")

_STUDY_RE = re.compile(r"^(study\d+)_(positive|negative)$")
_PATIENT_RE = re.compile(r"^patient\d+$")


class DatasetError(ValueError):
    pass


class DatasetWarning(UserWarning):
    pass


@dataclass(frozen=True)
class Study:
    patient_id: str
    body_part: str
    study_id: str
    view_paths: Tuple[str, ...]
    label: int

    def __post_init__(self):
        if not self.view_paths:
            raise DatasetError(f"study {self.key} has no views")
        if self.body_part not in BODY_PARTS:
            raise DatasetError(f"unknown body part {self.body_part!r}")
        if self.label not in (0, 1):
            raise DatasetError(f"label must be 0 or 1, got {self.label!r}")

    @property
    def key(self) -> str:
        return f"{self.body_part}/{self.patient_id}/{self.study_id}"


@dataclass
class DatasetIndex:
    split: str
    studies: List[Study] = field(default_factory=list)

    @property
    def counts(self) -> Dict[str, Dict[int, int]]:
        out: Dict[str, Dict[int, int]] = {}
        for s in self.studies:
            per = out.setdefault(s.body_part, {0: 0, 1: 0})
            per[s.label] += 1
        return out

    @property
    def label_counts(self) -> Dict[int, int]:
        c = Counter(s.label for s in self.studies)
        return {0: c.get(0, 0), 1: c.get(1, 0)}

    @property
    def n_views(self) -> int:
        return sum(len(s.view_paths) for s in self.studies)

    def views(self) -> List[Tuple[str, int, Study]]:
        """Flat image-level list: (path, label, study) in index order."""
        return [(p, s.label, s) for s in self.studies for p in s.view_paths]

    def patients(self) -> set:
        return {s.patient_id for s in self.studies}

    def normalized(self) -> "DatasetIndex":
        return DatasetIndex(self.split, sorted(self.studies, key=lambda s: s.key))


def _check_decodes(path: str) -> None:
    if not os.path.isfile(path):
        raise DatasetError(f"missing image file: {path}")
    try:
        read_png(path)
    except ImageFormatError as exc:
        raise DatasetError(f"unreadable image {path}: {exc}") from exc


def scan_tree(root, split: str, verify_images: bool = True) -> DatasetIndex:
    """Index ``root/<split>/XR_<PART>/patientNNNNN/studyK_<positive|negative>/image*.png``."""
    if split not in SPLITS:
        raise DatasetError(f"split must be one of {SPLITS}, got {split!r}")
    base = os.path.join(os.fspath(root), split)
    if not os.path.isdir(base):
        raise DatasetError(f"split directory not found: {base}")
    studies = []
    for part_dir in sorted(os.listdir(base)):
        part_path = os.path.join(base, part_dir)
        if not os.path.isdir(part_path):
            continue
        part = part_dir[3:] if part_dir.startswith("XR_") else None
        if part not in BODY_PARTS:
            warnings.warn(f"skipping unknown body-part directory {part_path}", DatasetWarning, stacklevel=2)
            continue
        for patient in sorted(os.listdir(part_path)):
            patient_path = os.path.join(part_path, patient)
            if not os.path.isdir(patient_path):
                continue
            if not _PATIENT_RE.match(patient):
                raise DatasetError(f"malformed patient directory {patient_path}")
            for study_dir in sorted(os.listdir(patient_path)):
                study_path = os.path.join(patient_path, study_dir)
                if not os.path.isdir(study_path):
                    continue
                m = _STUDY_RE.match(study_dir)
                if m is None:
                    raise DatasetError(f"malformed study directory {study_path} (expected studyK_positive|negative)")
                views = sorted(
                    os.path.join(study_path, f) for f in os.listdir(study_path) if f.lower().endswith(".png")
                )
                if not views:
                    raise DatasetError(f"study directory {study_path} contains no images")
                if verify_images:
                    for v in views:
                        _check_decodes(v)
                studies.append(
                    Study(patient, part, m.group(1), tuple(views), 1 if m.group(2) == "positive" else 0)
                )
    return DatasetIndex(split, studies)


def _resolve(csv_path: str, rel: str) -> str:
    if os.path.isabs(rel):
        return rel
    here = os.path.dirname(os.path.abspath(csv_path))
    # MURA CSVs list paths starting with the dataset directory name
    for base in (os.path.dirname(here), here):
        cand = os.path.normpath(os.path.join(base, rel))
        if os.path.exists(cand):
            return cand
    return os.path.normpath(os.path.join(os.path.dirname(here), rel))


def _parse_study_path(path: str):
    parts = os.path.normpath(path).split(os.sep)
    if len(parts) < 4:
        raise DatasetError(f"path does not follow the MURA layout: {path}")
    study_dir, patient, part_dir, split = parts[-1], parts[-2], parts[-3], parts[-4]
    m = _STUDY_RE.match(study_dir)
    if m is None:
        raise DatasetError(f"malformed study directory {path}")
    if not part_dir.startswith("XR_") or part_dir[3:] not in BODY_PARTS:
        raise DatasetError(f"unknown body-part directory in {path}")
    return split, part_dir[3:], patient, m.group(1), 1 if m.group(2) == "positive" else 0


def load_csv_index(image_paths_csv, labeled_studies_csv, verify_images: bool = True) -> DatasetIndex:
    """Index from MURA's ``*_image_paths.csv`` and ``*_labeled_studies.csv``.

    CSV labels are authoritative; a disagreement with the directory suffix is an error.
    """
    image_paths_csv, labeled_studies_csv = os.fspath(image_paths_csv), os.fspath(labeled_studies_csv)
    labels: Dict[str, int] = {}
    with open(labeled_studies_csv, newline="") as fh:
        for row in csv.reader(fh):
            if not row or not row[0].strip():
                continue
            if len(row) < 2:
                raise DatasetError(f"{labeled_studies_csv}: row without label: {row}")
            try:
                label = int(row[1])
            except ValueError:
                label = -1
            if label not in (0, 1):
                raise DatasetError(f"{labeled_studies_csv}: label must be 0 or 1, got {row[1]!r} for {row[0]}")
            labels[_resolve(labeled_studies_csv, row[0].strip().rstrip("/"))] = label

    per_study: Dict[str, List[str]] = {}
    seen = set()
    with open(image_paths_csv, newline="") as fh:
        for row in csv.reader(fh):
            if not row or not row[0].strip():
                continue
            path = _resolve(image_paths_csv, row[0].strip())
            if path in seen:
                warnings.warn(f"duplicate image row {row[0]} ignored", DatasetWarning, stacklevel=2)
                continue
            seen.add(path)
            if verify_images:
                _check_decodes(path)
            per_study.setdefault(os.path.dirname(path), []).append(path)

    studies = []
    split_seen = set()
    for study_path in sorted(per_study):
        split, part, patient, study_id, dir_label = _parse_study_path(study_path)
        split_seen.add(split)
        if study_path in labels:
            if labels[study_path] != dir_label:
                raise DatasetError(
                    f"label mismatch for {study_path}: CSV says {labels[study_path]}, directory says {dir_label}"
                )
            label = labels[study_path]
        else:
            raise DatasetError(f"study {study_path} has images but no row in {labeled_studies_csv}")
        studies.append(Study(patient, part, study_id, tuple(sorted(per_study[study_path])), label))
    split = split_seen.pop() if len(split_seen) == 1 else ("valid" if "valid" in os.path.basename(image_paths_csv) else "train")
    return DatasetIndex(split, studies)


def cross_check(a: DatasetIndex, b: DatasetIndex) -> List[str]:
    """Human-readable differences between two indexes (empty when equivalent)."""
    def table(ix):
        return {s.key: (s.label, tuple(os.path.abspath(p) for p in s.view_paths)) for s in ix.studies}

    ta, tb = table(a), table(b)
    problems = []
    for key in sorted(set(ta) | set(tb)):
        if key not in ta:
            problems.append(f"{key}: only in second index")
        elif key not in tb:
            problems.append(f"{key}: only in first index")
        elif ta[key][0] != tb[key][0]:
            problems.append(f"{key}: label {ta[key][0]} vs {tb[key][0]}")
        elif ta[key][1] != tb[key][1]:
            problems.append(f"{key}: view lists differ")
    return problems


def check_disjoint(train: DatasetIndex, valid: DatasetIndex) -> None:
    shared = train.patients() & valid.patients()
    if shared:
        raise DatasetError(f"{len(shared)} patients appear in both splits, e.g. {sorted(shared)[:3]}")


def epoch_permutation(n: int, seed: int, epoch: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, epoch, 0x5A1F]))
    return rng.permutation(n)


def batch_iter(
    index: DatasetIndex,
    batch_size: int,
    seed: int,
    epoch: int,
    pipeline=None,
    shuffle: bool = True,
    train: bool = True,
    workers: int = 1,
) -> Iterator[Tuple[Optional[np.ndarray], np.ndarray, List[Tuple[str, Study]]]]:
    """Yield (images [B,3,S,S] float32, labels [B,1] float32, [(view path, study)]).

    Iteration is image-level; every view carries its study's label.  The
    order depends only on (seed, epoch).  ``pipeline`` maps a view to its
    network input; without one the image batch is ``None``.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    views = index.views()
    order = epoch_permutation(len(views), seed, epoch) if shuffle else np.arange(len(views))
    pool = ThreadPoolExecutor(max_workers=workers) if pipeline is not None and workers > 1 else None
    try:
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            refs = [(views[i][0], views[i][2]) for i in idx]
            labels = np.array([[views[i][1]] for i in idx], dtype=np.float32)
            images = None
            if pipeline is not None:
                if train:
                    jobs = [(views[i][0], epoch, int(i)) for i in idx]
                    fn = lambda job: pipeline.train_input(*job)
                else:
                    jobs = [views[i][0] for i in idx]
                    fn = pipeline.eval_input
                arrs = list(pool.map(fn, jobs)) if pool is not None else [fn(j) for j in jobs]
                images = np.stack(arrs).astype(np.float32, copy=False)
            yield images, labels, refs
    finally:
        if pool is not None:
            pool.shutdown()

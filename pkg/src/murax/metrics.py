"""Study-level aggregation, ensembling, kappa/AUC/accuracy and the metrics report."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import rankdata

from .dataset import DatasetIndex, batch_iter
from .model import ModelParams, forward

THRESHOLD = 0.5


class MetricError(ValueError):
    pass


class UndefinedMetric(MetricError):
    """A metric is mathematically undefined for the given labels (e.g. AUC with one class)."""


def aggregate_study(per_view_probs: Sequence[float]) -> Tuple[float, int]:
    """Mean view probability and label 1 iff it is strictly above 0.5."""
    p = np.asarray(per_view_probs, dtype=np.float64)
    if p.size == 0:
        raise MetricError("aggregate_study: a study needs at least one view probability")
    mean = float(p.mean())
    return mean, int(mean > THRESHOLD)


def ensemble_probs(member_probs: Sequence[Sequence[float]]) -> np.ndarray:
    """Per-view mean across ensemble members."""
    if len(member_probs) == 0:
        raise MetricError("ensemble_probs: no members")
    lengths = {len(m) for m in member_probs}
    if len(lengths) != 1:
        raise MetricError(f"ensemble_probs: members cover different view counts {sorted(lengths)}")
    return np.mean(np.asarray(member_probs, dtype=np.float64), axis=0)


def _binary(v, name):
    a = np.asarray(v)
    if a.ndim != 1:
        raise MetricError(f"{name} must be one-dimensional")
    if not np.all((a == 0) | (a == 1)):
        raise MetricError(f"{name} must contain only 0 and 1")
    return a.astype(np.int64)


def confusion(pred: Sequence[int], gold: Sequence[int]) -> Dict[str, int]:
    p, g = _binary(pred, "pred"), _binary(gold, "gold")
    if p.shape != g.shape:
        raise MetricError(f"length mismatch: {p.size} predictions vs {g.size} labels")
    return {
        "tp": int(np.sum((p == 1) & (g == 1))),
        "fp": int(np.sum((p == 1) & (g == 0))),
        "fn": int(np.sum((p == 0) & (g == 1))),
        "tn": int(np.sum((p == 0) & (g == 0))),
    }


def cohen_kappa(pred: Sequence[int], gold: Sequence[int]) -> float:
    p, g = _binary(pred, "pred"), _binary(gold, "gold")
    if p.shape != g.shape:
        raise MetricError(f"length mismatch: {p.size} predictions vs {g.size} labels")
    n = p.size
    if n == 0:
        raise MetricError("cohen_kappa: empty input")
    po = float(np.sum(p == g)) / n
    p1, g1 = float(p.sum()) / n, float(g.sum()) / n
    pe = p1 * g1 + (1 - p1) * (1 - g1)
    if pe == 1.0:
        return 1.0  # both constant and equal, since po = pe = 1
    return (po - pe) / (1 - pe)


def roc_auc(probs: Sequence[float], gold: Sequence[int]) -> float:
    """Mann–Whitney statistic with midranks: P(pos > neg) + 0.5·P(tie)."""
    s = np.asarray(probs, dtype=np.float64)
    g = _binary(gold, "gold")
    if s.shape != g.shape:
        raise MetricError(f"length mismatch: {s.size} scores vs {g.size} labels")
    n_pos = int(g.sum())
    n_neg = g.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetric("AUC undefined: gold labels contain a single class")
    ranks = rankdata(s)  # average ranks for ties
    u = ranks[g == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class StudyPrediction:
    key: str
    body_part: str
    gold: int
    per_view_probs: List[float]
    study_prob: float
    predicted_label: int


@dataclass
class GroupMetrics:
    count: int
    kappa: float
    accuracy: float
    auc: Optional[float]
    confusion: Dict[str, int]


def group_metrics(preds: Sequence[StudyPrediction]) -> GroupMetrics:
    gold = [p.gold for p in preds]
    labels = [p.predicted_label for p in preds]
    cm = confusion(labels, gold)
    try:
        auc: Optional[float] = roc_auc([p.study_prob for p in preds], gold)
    except UndefinedMetric:
        auc = None
    return GroupMetrics(
        count=len(preds),
        kappa=cohen_kappa(labels, gold),
        accuracy=(cm["tp"] + cm["tn"]) / len(preds),
        auc=auc,
        confusion=cm,
    )


@dataclass
class MetricsReport:
    overall: GroupMetrics
    per_body_part: Dict[str, GroupMetrics]
    view_accuracy: float
    n_members: int
    config_fingerprint: str = ""
    checkpoint_hashes: List[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def write(self, path) -> None:
        path = os.fspath(path)
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w") as fh:
            fh.write(self.to_json())

    def undefined(self) -> List[str]:
        """Names of metrics that could not be computed."""
        out = ["overall.auc"] if self.overall.auc is None else []
        out += [f"{k}.auc" for k, g in sorted(self.per_body_part.items()) if g.auc is None]
        return out


def predict_views(model: ModelParams, index: DatasetIndex, pipeline, batch_size: int = 32, workers: int = 1) -> np.ndarray:
    """Eval-mode probability for every view of ``index`` in ``index.views()`` order."""
    eval_pipe = pipeline.for_eval()
    out = []
    for images, _, _ in batch_iter(
        index, batch_size, seed=0, epoch=0, pipeline=eval_pipe, shuffle=False, train=False, workers=workers
    ):
        x = images.astype(model.params["classifier.weight"].dtype, copy=False)
        out.append(forward(model, x, "eval").data[:, 0].astype(np.float64))
    return np.concatenate(out) if out else np.zeros(0)


def study_predictions(index: DatasetIndex, view_probs: Sequence[float]) -> List[StudyPrediction]:
    view_probs = np.asarray(view_probs, dtype=np.float64)
    if view_probs.size != index.n_views:
        raise MetricError(f"{view_probs.size} view probabilities for {index.n_views} views")
    preds = []
    pos = 0
    for s in index.studies:
        v = view_probs[pos : pos + len(s.view_paths)]
        pos += len(s.view_paths)
        prob, label = aggregate_study(v)
        preds.append(StudyPrediction(s.key, s.body_part, s.label, [float(x) for x in v], prob, label))
    return preds


def report_from_probs(
    index: DatasetIndex,
    member_view_probs: Sequence[Sequence[float]],
    config_fingerprint: str = "",
    checkpoint_hashes: Sequence[str] = (),
) -> MetricsReport:
    """Ensemble per view, aggregate per study, and score overall and per body part."""
    if not index.studies:
        raise MetricError("cannot evaluate an empty index")
    views = ensemble_probs(member_view_probs)
    preds = study_predictions(index, views)
    parts = sorted({p.body_part for p in preds})
    view_gold = np.array([label for _, label, _ in index.views()])
    view_acc = float(np.mean((views > THRESHOLD).astype(int) == view_gold))
    return MetricsReport(
        overall=group_metrics(preds),
        per_body_part={b: group_metrics([p for p in preds if p.body_part == b]) for b in parts},
        view_accuracy=view_acc,
        n_members=len(member_view_probs),
        config_fingerprint=config_fingerprint,
        checkpoint_hashes=list(checkpoint_hashes),
    )


def evaluate(
    models: Sequence[ModelParams],
    index: DatasetIndex,
    pipeline,
    batch_size: int = 32,
    checkpoint_hashes: Sequence[str] = (),
    workers: int = 1,
) -> MetricsReport:
    if not models:
        raise MetricError("evaluate needs at least one model")
    side = pipeline.preprocess.side
    for m in models:
        if m.config.input_side != side:
            raise MetricError(f"model expects input side {m.config.input_side} but preprocessing produces {side}")
    probs = [predict_views(m, index, pipeline, batch_size, workers) for m in models]
    return report_from_probs(index, probs, pipeline.fingerprint(), checkpoint_hashes)

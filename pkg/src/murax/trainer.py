"""Two-phase training schedule: frozen-encoder warmup, then full fine-tuning with step LR decay."""

from __future__ import annotations

import json
import logging
import math
import os
import warnings
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from . import checkpoint
from .autograd import Tape, Tensor, weighted_bce
from .dataset import DatasetIndex, batch_iter
from .metrics import evaluate
from .model import DenseNetConfig, ModelParams, build, forward, set_trainable

log = logging.getLogger("murax.train")

Weight = Union[float, str]


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, epoch: int, lr: float, loss: float):
        super().__init__(f"non-finite loss {loss} at global step {step} (epoch {epoch}, lr {lr:.3g})")
        self.step, self.epoch, self.lr, self.loss = step, epoch, lr, loss


class EnsembleMemberError(RuntimeError):
    def __init__(self, member: int, cause: BaseException):
        super().__init__(f"ensemble member {member} failed: {cause}")
        self.member = member


@dataclass
class TrainConfig:
    batch_size: int = 8
    lr0: float = 1e-4
    lr_decay_every: int = 6
    lr_decay_factor: float = 0.1
    warmup_epochs: int = 5
    finetune_epochs: int = 25
    optimizer: str = "adam"
    momentum: float = 0.9
    seed: int = 0
    pos_weight: Weight = "auto"
    neg_weight: Weight = "auto"
    clip_norm: Optional[float] = None
    eval_batch_size: int = 32

    def __post_init__(self):
        if self.batch_size < 1 or self.lr0 <= 0 or self.lr_decay_every < 1 or self.lr_decay_factor <= 0:
            raise ValueError("batch_size, lr0, lr_decay_every and lr_decay_factor must be positive")
        if self.warmup_epochs < 0 or self.finetune_epochs < 0:
            raise ValueError("warmup_epochs and finetune_epochs must be non-negative")
        if self.optimizer not in ("adam", "sgd_momentum"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd_momentum', got {self.optimizer!r}")
        for name in ("pos_weight", "neg_weight"):
            v = getattr(self, name)
            if v != "auto" and not (isinstance(v, (int, float)) and v > 0):
                raise ValueError(f"{name} must be 'auto' or a positive number, got {v!r}")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive when set")
        if not 5 <= self.lr_decay_every <= 7 or not 20 <= self.finetune_epochs <= 30:
            warnings.warn(
                "schedule outside the reference ranges (decay every 5-7 epochs, 20-30 fine-tune epochs)",
                stacklevel=3,
            )

    @property
    def total_epochs(self) -> int:
        return self.warmup_epochs + self.finetune_epochs


def lr_at(config: TrainConfig, epoch: int) -> float:
    """lr0 · factor^floor(epoch / decay_every), epochs counted from 0 across both phases."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return config.lr0 * config.lr_decay_factor ** (epoch // config.lr_decay_every)


def scope_at(config: TrainConfig, epoch: int) -> str:
    return "head_only" if epoch < config.warmup_epochs else "all"


def class_weights(index: DatasetIndex, config: TrainConfig) -> Tuple[float, float]:
    """Loss weights; "auto" gives each class the other class's share of training views."""
    labels = np.array([label for _, label, _ in index.views()])
    n = labels.size
    n_pos = int(labels.sum())
    pos, neg = config.pos_weight, config.neg_weight
    if pos == "auto":
        pos = (n - n_pos) / n if 0 < n_pos < n else 1.0
    if neg == "auto":
        neg = n_pos / n if 0 < n_pos < n else 1.0
    return float(pos), float(neg)


class Optimizer:
    """Adam (bias-corrected) or SGD with momentum over named tensors; frozen tensors are skipped."""

    def __init__(self, kind: str = "adam", beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8, momentum: float = 0.9):
        self.kind = kind
        self.beta1, self.beta2, self.eps, self.momentum = beta1, beta2, eps, momentum
        self.state: Dict[str, dict] = {}

    def step(self, named: List[Tuple[str, Tensor]], lr: float) -> None:
        for name, p in named:
            if not p.requires_grad or p.grad is None:
                continue
            g = p.grad
            st = self.state.get(name)
            if st is None:
                st = self.state[name] = {"t": 0, "m": np.zeros_like(p.data), "v": np.zeros_like(p.data)}
            st["t"] += 1
            if self.kind == "adam":
                st["m"] *= self.beta1
                st["m"] += (1 - self.beta1) * g
                st["v"] *= self.beta2
                st["v"] += (1 - self.beta2) * (g * g)
                mhat = st["m"] / (1 - self.beta1 ** st["t"])
                vhat = st["v"] / (1 - self.beta2 ** st["t"])
                p.data -= (lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.dtype, copy=False)
            else:
                st["m"] *= self.momentum
                st["m"] += g
                p.data -= (lr * st["m"]).astype(p.dtype, copy=False)


def optimizer_step(model: ModelParams, optimizer: Optimizer, lr: float) -> None:
    optimizer.step(list(model.params.items()), lr)


def clip_grad_norm(model: ModelParams, max_norm: float) -> float:
    grads = [t.grad for _, t in model.trainable() if t.grad is not None]
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for _, t in model.trainable():
            if t.grad is not None:
                t.grad = (t.grad * scale).astype(t.dtype, copy=False)
    return total


@dataclass
class TrainState:
    epoch: int = 0
    global_step: int = 0
    current_lr: float = 0.0
    best_valid_kappa: float = -math.inf
    best_epoch: int = -1
    optimizer: Optimizer = field(default_factory=Optimizer)


@dataclass
class TrainResult:
    model: ModelParams
    history: List[dict]
    best_checkpoint: Optional[str]
    best_hash: Optional[str]
    state: TrainState


def _finite_or_none(x):
    return None if x is None or not math.isfinite(x) else x


def train(
    model: ModelParams,
    train_index: DatasetIndex,
    valid_index: Optional[DatasetIndex],
    config: TrainConfig,
    pipeline,
    out_dir: Optional[str] = None,
    workers: int = 1,
    keep_epoch_checkpoints: bool = True,
) -> TrainResult:
    """Run the full schedule; writes per-epoch and ``best`` checkpoints plus ``history.json`` to ``out_dir``."""
    if not train_index.studies:
        raise ValueError("training split is empty")
    pos_w, neg_w = class_weights(train_index, config)
    dtype = model.params["classifier.weight"].dtype
    state = TrainState(optimizer=Optimizer(config.optimizer, momentum=config.momentum))
    history: List[dict] = []
    best_path = best_hash = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    log.info("training %d views, pos_weight=%.4f neg_weight=%.4f", train_index.n_views, pos_w, neg_w)

    for epoch in range(config.total_epochs):
        scope = scope_at(config, epoch)
        set_trainable(model, scope)
        lr = lr_at(config, epoch)
        state.epoch, state.current_lr = epoch, lr
        assert state.current_lr == config.lr0 * config.lr_decay_factor ** (epoch // config.lr_decay_every)

        losses, correct, seen = [], 0, 0
        for images, labels, _ in batch_iter(
            train_index, config.batch_size, config.seed, epoch, pipeline, shuffle=True, train=True, workers=workers
        ):
            x = Tensor(images.astype(dtype, copy=False))
            y = Tensor(labels.astype(dtype, copy=False))
            with Tape() as tape:
                prob = forward(model, x, "train")
                loss = weighted_bce(prob, y, pos_w, neg_w)
            value = float(loss.item())
            if not math.isfinite(value):
                raise TrainingDiverged(state.global_step, epoch, lr, value)
            tape.backward(loss)
            if config.clip_norm is not None:
                clip_grad_norm(model, config.clip_norm)
            state.optimizer.step(list(model.params.items()), lr)
            model.zero_grad()
            state.global_step += 1
            losses.append(value * len(labels))
            correct += int(np.sum((prob.data > 0.5) == (labels > 0.5)))
            seen += len(labels)

        entry = {
            "epoch": epoch,
            "scope": scope,
            "lr": lr,
            "steps": state.global_step,
            "train_loss": float(np.sum(losses) / seen),
            "train_accuracy": correct / seen,
            "encoder_hash": model.digest(model.encoder_names()),
        }
        if valid_index is not None and valid_index.studies:
            report = evaluate([model], valid_index, pipeline, config.eval_batch_size, workers=workers)
            entry.update(
                valid_kappa=report.overall.kappa,
                valid_auc=_finite_or_none(report.overall.auc),
                valid_accuracy=report.overall.accuracy,
            )
            kappa = report.overall.kappa
        else:
            kappa = -entry["train_loss"]  # no validation split: fall back to lowest training loss
        improved = kappa > state.best_valid_kappa
        if improved:
            state.best_valid_kappa, state.best_epoch = kappa, epoch
        entry["best_epoch"] = state.best_epoch
        history.append(entry)
        log.info(
            "epoch %d scope=%s lr=%.1e loss=%.4f acc=%.3f valid_kappa=%s valid_auc=%s",
            epoch, scope, lr, entry["train_loss"], entry["train_accuracy"],
            entry.get("valid_kappa"), entry.get("valid_auc"),
        )
        if out_dir is not None:
            meta = {"epoch": epoch, "seed": config.seed, "metrics": {k: v for k, v in entry.items() if k.startswith("valid_")}}
            if keep_epoch_checkpoints:
                checkpoint.save(model, os.path.join(out_dir, f"epoch_{epoch:03d}.ckpt"), meta)
            if improved:
                best_path = os.path.join(out_dir, "best.ckpt")
                best_hash = checkpoint.save(model, best_path, meta)
            write_history(history, config, os.path.join(out_dir, "history.json"))

    return TrainResult(model, history, best_path, best_hash, state)


def write_history(history: List[dict], config: TrainConfig, path: str) -> None:
    with open(path, "w") as fh:
        json.dump({"config": asdict(config), "epochs": history}, fh, indent=1, sort_keys=True)
        fh.write("\n")


def train_ensemble(
    n_models: int,
    model_config: DenseNetConfig,
    train_index: DatasetIndex,
    valid_index: Optional[DatasetIndex],
    config: TrainConfig,
    pipeline,
    out_dir: str,
    precision: str = "single",
    workers: int = 1,
    keep_epoch_checkpoints: bool = True,
) -> List[TrainResult]:
    """Members differ only by seed (config.seed + i) for initialization, batch order and augmentation."""
    if n_models < 1:
        raise ValueError("n_models must be >= 1")
    results = []
    for i in range(n_models):
        seed = config.seed + i
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")  # the caller's config already warned once
            member_cfg = replace(config, seed=seed)
        try:
            model = build(model_config, seed=seed, precision=precision)
            results.append(
                train(
                    model,
                    train_index,
                    valid_index,
                    member_cfg,
                    pipeline.with_seed(seed),
                    os.path.join(out_dir, f"member_{i}"),
                    workers=workers,
                    keep_epoch_checkpoints=keep_epoch_checkpoints,
                )
            )
        except Exception as exc:
            raise EnsembleMemberError(i, exc) from exc
    return results

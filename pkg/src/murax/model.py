"""Dense-connectivity CNN classifier (DenseNet-BC style) on the autograd core."""

from __future__ import annotations

import hashlib
from collections import OrderedDict
from dataclasses import asdict, dataclass
from typing import Iterable, List, Optional, Tuple

import numpy as np

from .autograd import ops
from .autograd.tensor import Tensor

HEAD_PREFIXES = ("final_norm.", "classifier.")


class ConfigError(ValueError):
    pass


@dataclass
class DenseNetConfig:
    block_layers: Tuple[int, ...] = (2, 4, 4)
    growth_rate: int = 12
    init_features: int = 24
    compression: float = 0.5
    bottleneck: bool = True
    input_side: int = 64
    stem: str = "tiny"
    bn_momentum: float = 0.1
    bn_epsilon: float = 1e-5

    def __post_init__(self):
        self.block_layers = tuple(int(b) for b in self.block_layers)
        if not self.block_layers or any(b <= 0 for b in self.block_layers):
            raise ConfigError(f"block_layers must be positive counts, got {self.block_layers}")
        if self.growth_rate <= 0 or self.init_features <= 0 or self.input_side <= 0:
            raise ConfigError("growth_rate, init_features and input_side must be positive")
        if not 0 < self.compression <= 1:
            raise ConfigError(f"compression must lie in (0, 1], got {self.compression}")
        if self.stem not in ("full", "tiny"):
            raise ConfigError(f"stem must be 'full' or 'tiny', got {self.stem!r}")

    @classmethod
    def desk(cls) -> "DenseNetConfig":
        return cls()

    @classmethod
    def full(cls) -> "DenseNetConfig":
        return cls(block_layers=(6, 12, 32, 32), growth_rate=32, init_features=64, input_side=224, stem="full")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["block_layers"] = list(self.block_layers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DenseNetConfig":
        return cls(**d)


def conv_layer_count(config: DenseNetConfig) -> int:
    """Weighted layers: stem conv, per-layer convs in blocks, transition convs, classifier."""
    per_layer = 2 if config.bottleneck else 1
    return 1 + per_layer * sum(config.block_layers) + (len(config.block_layers) - 1) + 1


def channel_trace(config: DenseNetConfig) -> List[Tuple[str, int]]:
    """(stage name, channels) after the stem, every block and every transition."""
    c = config.init_features
    trace = [("stem", c)]
    for i, n in enumerate(config.block_layers, start=1):
        c += n * config.growth_rate
        trace.append((f"block{i}", c))
        if i < len(config.block_layers):
            c = int(c * config.compression)
            trace.append((f"transition{i}", c))
    return trace


def spatial_trace(config: DenseNetConfig) -> List[Tuple[str, int]]:
    s = config.input_side
    out = []
    if config.stem == "full":
        s = ops.out_size(s, 7, 2, 3)
        out.append(("stem.conv", s))
        s = ops.out_size(s, 3, 2, 1)
        out.append(("stem.pool", s))
    else:
        out.append(("stem.conv", s))
    for i in range(1, len(config.block_layers)):
        s = s // 2
        out.append((f"transition{i}", s))
    return out


def final_channels(config: DenseNetConfig) -> int:
    return channel_trace(config)[-1][1]


class ModelParams:
    """Named parameter tensors plus batch-norm running statistics for one configuration."""

    def __init__(self, config: DenseNetConfig):
        self.config = config
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        self.buffers: "OrderedDict[str, Tensor]" = OrderedDict()

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def named_tensors(self) -> List[Tuple[str, Tensor]]:
        """Parameters then buffers, in construction order (the checkpoint order)."""
        return list(self.params.items()) + list(self.buffers.items())

    def trainable(self) -> List[Tuple[str, Tensor]]:
        return [(k, t) for k, t in self.params.items() if t.requires_grad]

    def count(self, trainable_only: bool = False) -> int:
        return sum(t.data.size for t in self.params.values() if t.requires_grad or not trainable_only)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def digest(self, names: Optional[Iterable[str]] = None) -> str:
        h = hashlib.sha256()
        chosen = set(names) if names is not None else None
        for k, t in self.named_tensors():
            if chosen is None or k in chosen:
                h.update(k.encode())
                h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()

    def encoder_names(self) -> List[str]:
        return [k for k, _ in self.named_tensors() if not k.startswith(HEAD_PREFIXES)]

    def is_frozen(self, norm: str) -> bool:
        return not self.params[norm + ".weight"].requires_grad


def _he(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def build(config: DenseNetConfig, seed: int = 0, precision: str = "single") -> ModelParams:
    """Fresh parameters: He-normal convs/classifier, BN gamma=1 beta=0, zero bias."""
    for stage, size in spatial_trace(config):
        if size < 1:
            raise ConfigError(f"input_side {config.input_side} gives non-positive feature map at {stage}")
    if config.stem == "tiny" and config.input_side < 3:
        raise ConfigError("input_side too small for the 3x3 stem")
    dtype = np.float64 if precision == "double" else np.float32
    rng = np.random.default_rng(seed)
    m = ModelParams(config)

    def conv(name, f, c, k):
        m.params[name] = Tensor(_he(rng, (f, c, k, k), c * k * k, dtype), requires_grad=True)

    def norm(name, c):
        m.params[name + ".weight"] = Tensor(np.ones(c, dtype), requires_grad=True)
        m.params[name + ".bias"] = Tensor(np.zeros(c, dtype), requires_grad=True)
        m.buffers[name + ".running_mean"] = Tensor(np.zeros(c, dtype))
        m.buffers[name + ".running_var"] = Tensor(np.ones(c, dtype))

    k0 = config.init_features
    g = config.growth_rate
    if config.stem == "full":
        conv("stem.conv.weight", k0, 3, 7)
        norm("stem.norm", k0)
    else:
        conv("stem.conv.weight", k0, 3, 3)
    c = k0
    for b, n_layers in enumerate(config.block_layers, start=1):
        for j in range(1, n_layers + 1):
            p = f"block{b}.layer{j}"
            norm(p + ".norm1", c)
            if config.bottleneck:
                conv(p + ".conv1.weight", 4 * g, c, 1)
                norm(p + ".norm2", 4 * g)
                conv(p + ".conv2.weight", g, 4 * g, 3)
            else:
                conv(p + ".conv1.weight", g, c, 3)
            c += g
        if b < len(config.block_layers):
            out_c = int(c * config.compression)
            norm(f"transition{b}.norm", c)
            conv(f"transition{b}.conv.weight", out_c, c, 1)
            c = out_c
    norm("final_norm", c)
    m.params["classifier.weight"] = Tensor(_he(rng, (1, c), c, dtype), requires_grad=True)
    m.params["classifier.bias"] = Tensor(np.zeros(1, dtype), requires_grad=True)
    return m


def set_trainable(model: ModelParams, scope: str) -> None:
    """``head_only`` trains classifier + final BN; ``all`` trains everything.

    Frozen batch-norm layers run on their running statistics and do not update them.
    """
    if scope not in ("head_only", "all"):
        raise ValueError(f"scope must be 'head_only' or 'all', got {scope!r}")
    for name, t in model.params.items():
        t.requires_grad = scope == "all" or name.startswith(HEAD_PREFIXES)


_LAYOUT = "CNHW"  # channel-major inside the encoder; see ops module docstring


def _bn_relu(model: ModelParams, name: str, x: Tensor, mode: str) -> Tensor:
    cfg = model.config
    bn_mode = "eval" if mode == "eval" or model.is_frozen(name) else "train"
    y = ops.batch_norm2d(
        x,
        model.params[name + ".weight"],
        model.params[name + ".bias"],
        model.buffers[name + ".running_mean"],
        model.buffers[name + ".running_var"],
        mode=bn_mode,
        momentum=cfg.bn_momentum,
        epsilon=cfg.bn_epsilon,
        layout=_LAYOUT,
    )
    return ops.relu(y)


def _encode(model: ModelParams, x: Tensor, mode: str, trace: Optional[dict] = None, ablate=()) -> Tensor:
    """Encoder on an NCHW batch; returns the final activated features in CNHW order."""
    cfg = model.config
    p = model.params
    L = _LAYOUT
    x = ops.to_cnhw(x)
    if cfg.stem == "full":
        h = ops.conv2d(x, p["stem.conv.weight"], stride=2, padding=3, layout=L)
        h = _bn_relu(model, "stem.norm", h, mode)
        h = ops.max_pool2d(h, 3, 2, padding=1)
    else:
        h = ops.conv2d(x, p["stem.conv.weight"], stride=1, padding=1, layout=L)
    for b, n_layers in enumerate(cfg.block_layers, start=1):
        feats = [h]
        for j in range(1, n_layers + 1):
            name = f"block{b}.layer{j}"
            inp = ops.concat_channels(feats, layout=L)
            if trace is not None:
                trace[name] = inp.data.transpose(1, 0, 2, 3)
            y = _bn_relu(model, name + ".norm1", inp, mode)
            if cfg.bottleneck:
                y = ops.conv2d(y, p[name + ".conv1.weight"], layout=L)
                y = _bn_relu(model, name + ".norm2", y, mode)
                y = ops.conv2d(y, p[name + ".conv2.weight"], padding=1, layout=L)
            else:
                y = ops.conv2d(y, p[name + ".conv1.weight"], padding=1, layout=L)
            if name in ablate:
                y = ops.mul(y, Tensor(np.zeros(y.shape, dtype=y.dtype)))
            feats.append(y)
        h = ops.concat_channels(feats, layout=L)
        if b < len(cfg.block_layers):
            t = f"transition{b}"
            h = _bn_relu(model, t + ".norm", h, mode)
            h = ops.conv2d(h, p[t + ".conv.weight"], layout=L)
            h = ops.avg_pool2d(h, 2, 2)
    return _bn_relu(model, "final_norm", h, mode)


def _check_input(model: ModelParams, x: Tensor) -> None:
    s = model.config.input_side
    if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] != s or x.shape[3] != s:
        raise ValueError(f"expected input [N,3,{s},{s}], got {list(x.shape)}")


def feature_forward_logits(model: ModelParams, x, mode: str = "eval", trace=None, ablate=()):
    """(final pre-pool features, logits [N,1], probabilities [N,1])."""
    if not isinstance(x, Tensor):
        x = Tensor(x, dtype=next(iter(model.params.values())).dtype)
    _check_input(model, x)
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    feats = _encode(model, x, mode, trace, ablate)
    c, n = feats.shape[:2]
    pooled = ops.permute(ops.reshape(ops.global_avg_pool2d(feats), (c, n)), (1, 0))
    logits = ops.linear(pooled, model.params["classifier.weight"], model.params["classifier.bias"])
    return ops.to_nchw(feats), logits, ops.sigmoid(logits)


def feature_forward(model: ModelParams, x, mode: str = "eval"):
    feats, _, prob = feature_forward_logits(model, x, mode)
    return feats, prob


def forward(model: ModelParams, x, mode: str = "eval") -> Tensor:
    """Abnormality probability [N,1] for a batch of [N,3,S,S] inputs."""
    return feature_forward_logits(model, x, mode)[2]

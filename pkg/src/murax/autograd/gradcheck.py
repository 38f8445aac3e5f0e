"""Finite-difference verification of tape gradients."""

from __future__ import annotations

from typing import Callable, Dict, List, Sequence

import numpy as np

from . import ops
from .tensor import Tape, Tensor, TensorError


def _scalarize(out: Tensor, seed: int = 0) -> Tensor:
    if out.data.size == 1:
        return ops.reshape(out, ())
    # fixed random projection so every output component is exercised
    proj = np.random.default_rng(seed).standard_normal(out.shape)
    return ops.sum_all(ops.mul(out, Tensor(proj, dtype=out.dtype)))


def grad_check(op_closure: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Max relative error between tape and central-difference gradients.

    ``op_closure(*inputs)`` must return a Tensor; non-scalar outputs are
    reduced through a fixed random projection.  Only inputs flagged
    ``requires_grad`` are checked.  Per component the error is
    ``|a - n| / max(1e-8, |a| + |n|)``.
    """
    if eps <= 0:
        raise TensorError("grad_check: eps must be positive")
    for t in inputs:
        if t.requires_grad and t.dtype != np.float64:
            raise TensorError("grad_check: checked inputs must be double precision")
    for t in inputs:
        t.grad = None
    with Tape() as tape:
        loss = _scalarize(op_closure(*inputs))
    if loss.requires_grad:
        tape.backward(loss)

    def value() -> float:
        return float(_scalarize(op_closure(*inputs)).data)

    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = value()
            flat[i] = orig - eps
            f_minus = value()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2 * eps)
            a = float(analytic.reshape(-1)[i])
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, err)
    return worst


def _rand(rng, *shape, low=None, requires_grad=True) -> Tensor:
    if low is None:
        data = rng.standard_normal(shape)
    else:
        # magnitudes in [low, low + 1) with random sign: keeps away from kinks
        data = (low + rng.random(shape)) * rng.choice([-1.0, 1.0], size=shape)
    return Tensor(data, requires_grad=requires_grad, dtype="double")


def _bn_closure(mode):
    def f(x, g, b):
        c = x.shape[1]
        rm = Tensor(np.full(c, 0.1), dtype="double")
        rv = Tensor(np.full(c, 1.5), dtype="double")
        return ops.batch_norm2d(x, g, b, rm, rv, mode=mode)

    return f


def standard_cases(seed: int) -> Dict[str, tuple]:
    """Differentiable-op cases used by the gradient suite: name -> (closure, inputs)."""
    rng = np.random.default_rng(seed)
    target = Tensor(rng.integers(0, 2, size=(5, 1)).astype(np.float64), dtype="double")
    prob_data = 0.1 + 0.8 * rng.random((5, 1))
    return {
        "conv2d_3x3_pad1": (
            lambda x, w, b: ops.conv2d(x, w, b, stride=1, padding=1),
            [_rand(rng, 2, 3, 5, 5), _rand(rng, 4, 3, 3, 3), _rand(rng, 4)],
        ),
        "conv2d_3x3_stride2": (
            lambda x, w: ops.conv2d(x, w, None, stride=2, padding=1),
            [_rand(rng, 1, 2, 6, 6), _rand(rng, 3, 2, 3, 3)],
        ),
        "conv2d_1x1": (
            lambda x, w: ops.conv2d(x, w),
            [_rand(rng, 2, 4, 3, 3), _rand(rng, 5, 4, 1, 1)],
        ),
        "conv2d_3x3_cnhw": (
            lambda x, w, b: ops.conv2d(x, w, b, padding=1, layout="CNHW"),
            [_rand(rng, 3, 2, 4, 5), _rand(rng, 2, 3, 3, 3), _rand(rng, 2)],
        ),
        "conv2d_1x1_cnhw": (
            lambda x, w: ops.conv2d(x, w, layout="CNHW"),
            [_rand(rng, 4, 2, 3, 3), _rand(rng, 3, 4, 1, 1)],
        ),
        "batch_norm2d_train": (_bn_closure("train"), [_rand(rng, 3, 2, 3, 3), _rand(rng, 2), _rand(rng, 2)]),
        "batch_norm2d_eval": (_bn_closure("eval"), [_rand(rng, 2, 2, 3, 3), _rand(rng, 2), _rand(rng, 2)]),
        "relu": (ops.relu, [_rand(rng, 4, 5, low=0.1)]),
        "sigmoid": (ops.sigmoid, [_rand(rng, 4, 5)]),
        "max_pool2d": (lambda x: ops.max_pool2d(x, 2, 2), [_rand(rng, 2, 2, 4, 4)]),
        "max_pool2d_3x3_s2_p1": (lambda x: ops.max_pool2d(x, 3, 2, 1), [_rand(rng, 1, 2, 5, 5)]),
        "avg_pool2d": (lambda x: ops.avg_pool2d(x, 2, 2), [_rand(rng, 2, 2, 4, 4)]),
        "avg_pool2d_overlap": (lambda x: ops.avg_pool2d(x, 3, 1), [_rand(rng, 1, 2, 4, 4)]),
        "global_avg_pool2d": (ops.global_avg_pool2d, [_rand(rng, 2, 3, 3, 4)]),
        "concat_channels": (
            lambda a, b: ops.concat_channels([a, b]),
            [_rand(rng, 2, 3, 2, 2), _rand(rng, 2, 2, 2, 2)],
        ),
        "concat_channels_cnhw": (
            lambda a, b: ops.concat_channels([a, b], layout="CNHW"),
            [_rand(rng, 3, 2, 2, 2), _rand(rng, 1, 2, 2, 2)],
        ),
        "permute": (lambda x: ops.permute(x, (2, 0, 3, 1)), [_rand(rng, 2, 3, 2, 4)]),
        "slice_channels": (lambda x: ops.slice_channels(x, 1, 3), [_rand(rng, 2, 4, 2, 2)]),
        "linear": (ops.linear, [_rand(rng, 4, 3), _rand(rng, 2, 3), _rand(rng, 2)]),
        "weighted_bce": (
            lambda p: ops.weighted_bce(p, target, pos_weight=0.7, neg_weight=1.3),
            [Tensor(prob_data, requires_grad=True, dtype="double")],
        ),
        "mul_sum": (lambda a, b: ops.sum_all(ops.mul(a, b)), [_rand(rng, 3, 2), _rand(rng, 3, 2)]),
        "add": (ops.add, [_rand(rng, 3, 4), _rand(rng, 3, 4)]),
        "reshape_flatten": (lambda x: ops.flatten(ops.reshape(x, (3, 2, 4))), [_rand(rng, 6, 4)]),
    }


def run_suite(seeds: Sequence[int] = range(10), eps: float = 1e-5) -> List[tuple]:
    """Run every standard case over ``seeds``; returns (name, seed, error) rows."""
    rows = []
    for seed in seeds:
        for name, (fn, inputs) in standard_cases(seed).items():
            rows.append((name, seed, grad_check(fn, inputs, eps)))
    return rows

"""Differentiable operations on :class:`Tensor`.

Image tensors are NCHW at the public surface.  Convolution, batch norm and
channel concatenation also accept ``layout="CNHW"`` (channel-major), which
keeps each channel's N·H·W values contiguous; the model runs in that layout
and the NCHW entry points route through a recorded permutation.  Pooling
only touches the two trailing spatial axes and is layout-agnostic.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, TensorError, check_precision, tracking

PROB_EPS = 1e-7
LAYOUTS = ("NCHW", "CNHW")
_SWAP = (1, 0, 2, 3)


def _wrap(value: np.ndarray) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = value
    out.grad = None
    out.requires_grad = False
    out._tape = None
    return out


def _needs(*inputs):
    return tuple(t is not None and t.requires_grad for t in inputs)


def _check_layout(layout: str) -> None:
    if layout not in LAYOUTS:
        raise TensorError(f"unknown layout {layout!r}; expected one of {LAYOUTS}")


def out_size(size: int, k: int, stride: int, padding: int = 0) -> int:
    """Output length of a sliding window: floor((size + 2p - k) / s) + 1."""
    return (size + 2 * padding - k) // stride + 1


# ---------------------------------------------------------------- shape ops


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    out = _wrap(np.ascontiguousarray(x.data.transpose(axes)))
    tape = tracking(x)
    if tape is not None:
        inverse = tuple(int(i) for i in np.argsort(axes))
        tape.record(out, (x,), lambda g: (np.ascontiguousarray(g.transpose(inverse)),))
    return out


def to_cnhw(x: Tensor) -> Tensor:
    """NCHW -> channel-major CNHW (the same swap inverts itself)."""
    return permute(x, _SWAP)


to_nchw = to_cnhw


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = _wrap(x.data.reshape(shape))
    tape = tracking(x)
    if tape is not None:
        src = x.shape
        tape.record(out, (x,), lambda g: (g.reshape(src),))
    return out


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    check_precision(a, b)
    if a.shape != b.shape:
        raise TensorError(f"add: shape mismatch {a.shape} vs {b.shape}")
    out = _wrap(a.data + b.data)
    tape = tracking(a, b)
    if tape is not None:
        tape.record(out, (a, b), lambda g: (g, g))
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    check_precision(a, b)
    if a.shape != b.shape:
        raise TensorError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    out = _wrap(a.data * b.data)
    tape = tracking(a, b)
    if tape is not None:
        ad, bd = a.data, b.data
        tape.record(out, (a, b), lambda g: (g * bd, g * ad))
    return out


def sum_all(x: Tensor) -> Tensor:
    out = _wrap(np.asarray(x.data.sum(), dtype=x.dtype).reshape(()))
    tape = tracking(x)
    if tape is not None:
        shape, dtype = x.shape, x.dtype
        tape.record(out, (x,), lambda g: (np.full(shape, g, dtype=dtype),))
    return out


def relu(x: Tensor) -> Tensor:
    y = np.maximum(x.data, 0)
    out = _wrap(y)
    tape = tracking(x)
    if tape is not None:
        mask = y > 0  # subgradient 0 at exactly 0
        tape.record(out, (x,), lambda g: (g * mask,))
    return out


def sigmoid(x: Tensor) -> Tensor:
    v = x.data
    e = np.exp(-np.abs(v))
    s = np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    out = _wrap(s)
    tape = tracking(x)
    if tape is not None:
        tape.record(out, (x,), lambda g: (g * s * (1 - s),))
    return out


def elementwise(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise TensorError(f"unknown elementwise kind {kind!r}")


# ---------------------------------------------------------------- convolution
# the cores take channel-major arrays x[C, N, H, W]


def _conv_pointwise(xd, wd, need_x, need_w):
    c, n, h, w = xd.shape
    f = wd.shape[0]
    wm = wd.reshape(f, c)
    cols = xd.reshape(c, n * h * w)
    y = (wm @ cols).reshape(f, n, h, w)

    def backward(g):
        g2 = g.reshape(f, -1)
        gw = (g2 @ cols.T).reshape(wd.shape) if need_w else None
        gx = (wm.T @ g2).reshape(xd.shape) if need_x else None
        return gx, gw

    return y, backward


def _conv_shifted(xd, wd, padding, need_x, need_w):
    """Stride-1 k×k convolution as one GEMM over the flattened padded batch plus k² shifted adds.

    Output (n, y, u) takes tap (i, j) from flat position
    n·Hp·Wp + (y+i)·Wp + (u+j).  Rows y >= Ho and columns u >= Wo are
    discarded afterwards, so whatever they read across row or image
    boundaries never reaches the result.
    """
    c, n, h, w = xd.shape
    f, _, k, _ = wd.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    ho, wo = hp - k + 1, wp - k + 1
    plane = n * hp * wp
    offsets = [i * wp + j for i in range(k) for j in range(k)]
    tail = offsets[-1]
    flat = np.zeros((c, plane + tail), dtype=xd.dtype)
    flat[:, :plane].reshape(c, n, hp, wp)[:, :, padding : padding + h, padding : padding + w] = xd
    wk = np.ascontiguousarray(wd.transpose(2, 3, 0, 1)).reshape(k * k * f, c)
    big = wk @ flat
    acc = big[:f, :plane].copy()
    for idx in range(1, k * k):
        off = offsets[idx]
        acc += big[idx * f : (idx + 1) * f, off : off + plane]
    y = np.ascontiguousarray(acc.reshape(f, n, hp, wp)[:, :, :ho, :wo])

    def backward(g):
        gl = np.zeros((f, n, hp, wp), dtype=g.dtype)
        gl[:, :, :ho, :wo] = g
        gl = gl.reshape(f, plane)
        gx = gw = None
        if need_w:
            gbig = np.zeros((k * k * f, plane + tail), dtype=g.dtype)
            for idx, off in enumerate(offsets):
                gbig[idx * f : (idx + 1) * f, off : off + plane] = gl
            gw = (gbig @ flat.T).reshape(k, k, f, c).transpose(2, 3, 0, 1)
        if need_x:
            # transpose of the forward: one GEMM, then k² shifted adds
            wt = wd.transpose(2, 3, 1, 0).reshape(k * k * c, f)
            back = wt @ gl
            gcol = np.zeros((c, plane + tail), dtype=g.dtype)
            for idx, off in enumerate(offsets):
                gcol[:, off : off + plane] += back[idx * c : (idx + 1) * c]
            gx = gcol[:, :plane].reshape(c, n, hp, wp)[:, :, padding : padding + h, padding : padding + w]
        return gx, gw

    return y, backward


def _conv_im2col(xd, wd, stride, padding, need_x, need_w):
    c, n, h, w = xd.shape
    f, _, kh, kw = wd.shape
    ho, wo = out_size(h, kh, stride, padding), out_size(w, kw, stride, padding)
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    cols = win.transpose(0, 4, 5, 1, 2, 3).reshape(c * kh * kw, n * ho * wo)
    wm = wd.reshape(f, c * kh * kw)
    y = (wm @ cols).reshape(f, n, ho, wo)

    def backward(g):
        g2 = g.reshape(f, -1)
        gx = gw = None
        if need_w:
            gw = (g2 @ cols.T).reshape(wd.shape)
        if need_x:
            gcols = (wm.T @ g2).reshape(c, kh, kw, n, ho, wo)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, i, j]
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        return gx, gw

    return y, backward


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
    layout: str = "NCHW",
) -> Tensor:
    """2-D cross-correlation of ``x`` [N,C,H,W] with ``weight`` [F,C,kh,kw] -> [N,F,H',W']."""
    _check_layout(layout)
    check_precision(x, weight, bias)
    if x.ndim != 4 or weight.ndim != 4:
        raise TensorError(f"conv2d: expected 4-D input and weight, got {x.shape} and {weight.shape}")
    if layout == "NCHW":
        n, c, h, w = x.shape
    else:
        c, n, h, w = x.shape
    f, cw, kh, kw = weight.shape
    if c != cw:
        raise TensorError(f"conv2d: input has C={c} channels but weight expects C={cw}")
    if stride < 1 or padding < 0:
        raise TensorError(f"conv2d: invalid stride={stride} padding={padding}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise TensorError(
            f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}"
        )
    if bias is not None and bias.shape != (f,):
        raise TensorError(f"conv2d: bias shape {bias.shape} does not match F={f}")
    if layout == "NCHW":
        return to_nchw(conv2d(to_cnhw(x), weight, bias, stride, padding, layout="CNHW"))

    need_x, need_w, need_b = _needs(x, weight, bias)
    if kh == 1 and kw == 1 and stride == 1 and padding == 0:
        y, core_backward = _conv_pointwise(x.data, weight.data, need_x, need_w)
    elif stride == 1 and kh == kw:
        y, core_backward = _conv_shifted(x.data, weight.data, padding, need_x, need_w)
    else:
        y, core_backward = _conv_im2col(x.data, weight.data, stride, padding, need_x, need_w)
    if bias is not None:
        y += bias.data[:, None, None, None]
    out = _wrap(y)

    tape = tracking(x, weight, bias)
    if tape is not None:

        def backward(g):
            gx, gw = core_backward(g) if (need_x or need_w) else (None, None)
            gb = g.reshape(g.shape[0], -1).sum(axis=1) if need_b else None
            return gx, gw, gb

        tape.record(out, (x, weight, bias) if bias is not None else (x, weight), backward)
    return out


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map ``x @ weight.T + bias`` for x [N,D], weight [K,D]."""
    check_precision(x, weight, bias)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise TensorError(f"linear: inner dims disagree, x {x.shape} vs weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise TensorError(f"linear: bias shape {bias.shape} does not match K={weight.shape[0]}")
    y = x.data @ weight.data.T
    if bias is not None:
        y = y + bias.data
    out = _wrap(y)
    tape = tracking(x, weight, bias)
    if tape is not None:
        need_x, need_w, need_b = _needs(x, weight, bias)
        xd, wd = x.data, weight.data

        def backward(g):
            return (
                g @ wd if need_x else None,
                g.T @ xd if need_w else None,
                g.sum(axis=0) if need_b else None,
            )

        tape.record(out, (x, weight, bias) if bias is not None else (x, weight), backward)
    return out


# ---------------------------------------------------------------- batch norm


def batch_norm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
    mode: str = "train",
    momentum: float = 0.1,
    epsilon: float = 1e-5,
    layout: str = "NCHW",
) -> Tensor:
    """Per-channel batch normalization.

    Train mode normalizes with the biased batch variance and folds the
    unbiased variance into ``running_var`` (in place) by exponential moving
    average.  Eval mode uses the running statistics and leaves them alone.
    """
    _check_layout(layout)
    check_precision(x, gamma, beta)
    if epsilon <= 0:
        raise TensorError("batch_norm2d: epsilon must be positive")
    if x.ndim != 4:
        raise TensorError(f"batch_norm2d: expected 4-D input, got {x.shape}")
    if mode not in ("train", "eval"):
        raise TensorError(f"batch_norm2d: unknown mode {mode!r}")
    c = x.shape[1] if layout == "NCHW" else x.shape[0]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise TensorError(f"batch_norm2d: affine params {gamma.shape}/{beta.shape} vs C={c}")
    if running_mean.shape != (c,) or running_var.shape != (c,):
        raise TensorError(f"batch_norm2d: running stats {running_mean.shape}/{running_var.shape} vs C={c}")
    m = x.data.size // c
    if mode == "train" and m < 2:
        raise TensorError("batch_norm2d: train mode needs N*H*W >= 2 per channel (variance undefined)")
    if layout == "NCHW":
        y = batch_norm2d(to_cnhw(x), gamma, beta, running_mean, running_var, mode, momentum, epsilon, "CNHW")
        return to_nchw(y)

    xd = x.data
    dtype = xd.dtype
    xr = xd.reshape(c, m)
    if mode == "train":
        mean = xr.sum(axis=1) / m
        xc = xr - mean[:, None]
        var = np.einsum("cm,cm->c", xc, xc) / m
        running_mean.data[...] = (1 - momentum) * running_mean.data + momentum * mean
        running_var.data[...] = (1 - momentum) * running_var.data + momentum * var * (m / (m - 1))
    else:
        mean = running_mean.data.astype(dtype, copy=False)
        var = running_var.data.astype(dtype, copy=False)
        xc = None
    inv = (1.0 / np.sqrt(var + epsilon)).astype(dtype, copy=False)
    scale = (gamma.data * inv).astype(dtype, copy=False)
    if xc is not None:
        y = xc * scale[:, None]
        y += beta.data[:, None]
    else:
        y = xr * scale[:, None]
        y += (beta.data - mean * scale)[:, None]
    out = _wrap(y.reshape(xd.shape))

    tape = tracking(x, gamma, beta)
    if tape is not None:
        need_x, need_g, need_b = _needs(x, gamma, beta)

        def backward(g):
            g = g.reshape(c, m)
            centred = xc if xc is not None else xr - mean[:, None]
            xhat = centred * inv[:, None]
            gbeta = g.sum(axis=1)
            ggamma = np.einsum("cm,cm->c", g, xhat)
            gx = None
            if need_x:
                if mode == "train":
                    t = xhat * (ggamma / m)[:, None]
                    t += (gbeta / m)[:, None]
                    gx = g - t
                    gx *= scale[:, None]
                else:
                    gx = g * scale[:, None]
                gx = gx.reshape(xd.shape)
            return gx, (ggamma if need_g else None), (gbeta if need_b else None)

        tape.record(out, (x, gamma, beta), backward)
    return out


# ---------------------------------------------------------------- pooling


def _pool_windows(x: np.ndarray, k: int, stride: int, padding: int, fill: float):
    h, w = x.shape[2:]
    ho, wo = out_size(h, k, stride, padding), out_size(w, k, stride, padding)
    xp = x
    if padding:
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=fill)
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    return win, xp.shape, ho, wo


def _check_pool(name, x, k, stride, padding):
    if x.ndim != 4:
        raise TensorError(f"{name}: expected 4-D input, got {x.shape}")
    h, w = x.shape[2:]
    if k < 1 or stride < 1 or padding < 0:
        raise TensorError(f"{name}: kernel and stride must be positive, padding non-negative")
    if k > h + 2 * padding or k > w + 2 * padding:
        raise TensorError(f"{name}: kernel {k} larger than input {h}x{w}")


def max_pool2d(x: Tensor, k: int, stride: int, padding: int = 0) -> Tensor:
    _check_pool("max_pool2d", x, k, stride, padding)
    a, b, h, w = x.shape
    win, pshape, ho, wo = _pool_windows(x.data, k, stride, padding, -np.inf)
    flat = win.reshape(a, b, ho, wo, k * k)
    arg = flat.argmax(axis=-1)
    out = _wrap(np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0])
    tape = tracking(x)
    if tape is not None:

        def backward(g):
            gxp = np.zeros(pshape, dtype=g.dtype)
            di, dj = np.divmod(arg, k)
            rows = np.arange(ho)[None, None, :, None] * stride + di
            cols = np.arange(wo)[None, None, None, :] * stride + dj
            ia = np.arange(a)[:, None, None, None]
            ib = np.arange(b)[None, :, None, None]
            np.add.at(gxp, (ia, ib, rows, cols), g)
            if padding:
                gxp = gxp[:, :, padding : padding + h, padding : padding + w]
            return (gxp,)

        tape.record(out, (x,), backward)
    return out


def avg_pool2d(x: Tensor, k: int, stride: int, padding: int = 0) -> Tensor:
    """Average pooling; zero padding counts toward the k×k divisor."""
    _check_pool("avg_pool2d", x, k, stride, padding)
    a, b, h, w = x.shape
    ho, wo = out_size(h, k, stride, padding), out_size(w, k, stride, padding)
    tiled = k == stride and padding == 0
    if tiled:
        xd = x.data[:, :, : ho * k, : wo * k]
        y = xd.reshape(a, b, ho, k, wo, k).mean(axis=(3, 5))
    else:
        win, pshape, ho, wo = _pool_windows(x.data, k, stride, padding, 0.0)
        y = win.mean(axis=(-2, -1))
    out = _wrap(np.ascontiguousarray(y, dtype=x.dtype))
    tape = tracking(x)
    if tape is not None:
        scale = 1.0 / (k * k)

        def backward(g):
            gs = (g * scale).astype(g.dtype, copy=False)
            if tiled:
                gx = np.zeros(x.shape, dtype=g.dtype)
                gx[:, :, : ho * k, : wo * k] = np.broadcast_to(
                    gs[:, :, :, None, :, None], (a, b, ho, k, wo, k)
                ).reshape(a, b, ho * k, wo * k)
                return (gx,)
            gxp = np.zeros(pshape, dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gs
            if padding:
                gxp = gxp[:, :, padding : padding + h, padding : padding + w]
            return (gxp,)

        tape.record(out, (x,), backward)
    return out


def global_avg_pool2d(x: Tensor) -> Tensor:
    """Mean over the two spatial axes, keeping them as size 1."""
    if x.ndim != 4:
        raise TensorError(f"global_avg_pool2d: expected 4-D input, got {x.shape}")
    h, w = x.shape[2:]
    out = _wrap(x.data.mean(axis=(2, 3), keepdims=True))
    tape = tracking(x)
    if tape is not None:
        scale = 1.0 / (h * w)

        def backward(g):
            return (np.broadcast_to(g * scale, x.shape).astype(x.dtype),)

        tape.record(out, (x,), backward)
    return out


def pool2d(x: Tensor, kind: str, k: int = 2, stride: int = 2, padding: int = 0) -> Tensor:
    if kind == "max":
        return max_pool2d(x, k, stride, padding)
    if kind == "avg":
        return avg_pool2d(x, k, stride, padding)
    if kind == "global_avg":
        return global_avg_pool2d(x)
    raise TensorError(f"unknown pool kind {kind!r}")


# ---------------------------------------------------------------- channels


def concat_channels(xs: Sequence[Tensor], layout: str = "NCHW") -> Tensor:
    """Concatenate image tensors along the channel axis in argument order."""
    _check_layout(layout)
    xs = tuple(xs)
    if not xs:
        raise TensorError("concat_channels: empty input list")
    check_precision(*xs)
    axis = 1 if layout == "NCHW" else 0
    ref = list(xs[0].shape)
    for t in xs:
        other = list(t.shape)
        if t.ndim != 4 or other[:axis] + other[axis + 1 :] != ref[:axis] + ref[axis + 1 :]:
            raise TensorError(f"concat_channels: mismatched dims {xs[0].shape} vs {t.shape}")
    out = _wrap(np.concatenate([t.data for t in xs], axis=axis))
    tape = tracking(*xs)
    if tape is not None:
        bounds = np.cumsum([0] + [t.shape[axis] for t in xs])
        needs = _needs(*xs)

        def backward(g):
            parts = []
            for i in range(len(xs)):
                if not needs[i]:
                    parts.append(None)
                elif axis == 0:
                    parts.append(g[bounds[i] : bounds[i + 1]])
                else:
                    parts.append(g[:, bounds[i] : bounds[i + 1]])
            return tuple(parts)

        tape.record(out, xs, backward)
    return out


def slice_channels(x: Tensor, start: int, stop: int, layout: str = "NCHW") -> Tensor:
    _check_layout(layout)
    index = (slice(None), slice(start, stop)) if layout == "NCHW" else (slice(start, stop),)
    out = _wrap(np.ascontiguousarray(x.data[index]))
    tape = tracking(x)
    if tape is not None:

        def backward(g):
            gx = np.zeros(x.shape, dtype=g.dtype)
            gx[index] = g
            return (gx,)

        tape.record(out, (x,), backward)
    return out


# ---------------------------------------------------------------- loss


def weighted_bce(
    prob: Tensor,
    target: Tensor,
    pos_weight: float = 1.0,
    neg_weight: float = 1.0,
    eps: float = PROB_EPS,
) -> Tensor:
    """Class-weighted binary cross-entropy averaged over the batch.

    mean of -[pos_weight·t·ln p + neg_weight·(1-t)·ln(1-p)] with p clamped to [eps, 1-eps].
    """
    check_precision(prob, target)
    if prob.shape != target.shape:
        raise TensorError(f"weighted_bce: prob {prob.shape} vs target {target.shape}")
    t = target.data
    if not np.all((t == 0) | (t == 1)):
        raise TensorError("weighted_bce: target values must be 0 or 1")
    if pos_weight <= 0 or neg_weight <= 0:
        raise TensorError("weighted_bce: class weights must be positive")
    p = np.clip(prob.data, eps, 1 - eps)
    n = p.shape[0]
    terms = pos_weight * t * np.log(p) + neg_weight * (1 - t) * np.log1p(-p)
    out = _wrap(np.asarray(-terms.sum() / n, dtype=prob.dtype).reshape(()))
    tape = tracking(prob)
    if tape is not None:
        inside = (prob.data >= eps) & (prob.data <= 1 - eps)

        def backward(g):
            d = -(pos_weight * t / p - neg_weight * (1 - t) / (1 - p)) / n
            return (g * d * inside, None)

        tape.record(out, (prob, target), backward)
    return out

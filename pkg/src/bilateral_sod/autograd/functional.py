"""Differentiable operations on :class:`Tensor`.

Each op computes its forward value with numpy and returns a closure mapping the
upstream gradient to one gradient per input. Reductions use a fixed loop order,
so results are bit-reproducible for a fixed input.
"""

from __future__ import annotations

import builtins
import math
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor, make_result

PROB_EPS = 1e-7


# --------------------------------------------------------------------------- helpers
def _lift(value, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value), dtype=dtype)


def broadcast_shape(a: Sequence[int], b: Sequence[int]) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(tuple(a), tuple(b))
    except ValueError:
        raise ShapeError(f"shapes {tuple(a)} and {tuple(b)} are not broadcast-compatible") from None


def unbroadcast(grad: np.ndarray, shape: Sequence[int]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    shape = tuple(shape)
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _binary(a, b):
    if not isinstance(a, Tensor) and isinstance(b, Tensor):
        a = _lift(a, b)
    a = _lift(a)
    b = _lift(b, a)
    broadcast_shape(a.shape, b.shape)
    return a, b


# ----------------------------------------------------------------------- elementwise
def add(a, b) -> Tensor:
    a, b = _binary(a, b)
    sa, sb = a.shape, b.shape
    return make_result(a.data + b.data, (a, b),
                       lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _binary(a, b)
    sa, sb = a.shape, b.shape
    return make_result(a.data - b.data, (a, b),
                       lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _binary(a, b)
    ad, bd = a.data, b.data

    def backward(g):
        ga = unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result(ad * bd, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _binary(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        ga = unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), backward, "div")


def neg(a: Tensor) -> Tensor:
    return make_result(-a.data, (a,), lambda g: (-g,), "neg")


def invert(a: Tensor) -> Tensor:
    """Pixel-wise complement ``1 - a``."""
    return make_result(1.0 - a.data, (a,), lambda g: (-g,), "invert")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return make_result(np.log(ad), (a,), lambda g: (g / ad,), "log")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: (g * out,), "exp")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return make_result(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_result(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,), "relu")


def sigmoid_array(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


def sigmoid(a: Tensor) -> Tensor:
    out = sigmoid_array(a.data)
    return make_result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def clamp(a: Tensor, low: float, high: float) -> Tensor:
    """Clip into ``[low, high]``; gradient passes inside the interval, zero outside."""
    ad = a.data
    inside = (ad >= low) & (ad <= high)
    return make_result(np.clip(ad, low, high), (a,), lambda g: (g * inside,), "clamp")


# ------------------------------------------------------------------------ reductions
def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(shape))

    def backward(g):
        return (np.broadcast_to(g.reshape(kept), shape).copy(),)

    return make_result(a.data.sum(axis=axes, keepdims=keepdims), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    if count == 0:
        raise ShapeError("mean over a zero-size axis")
    shape = a.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(shape))

    def backward(g):
        return (np.broadcast_to(g.reshape(kept) / count, shape).copy(),)

    return make_result(a.data.mean(axis=axes, keepdims=keepdims), (a,), backward, "mean")


def max(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:  # noqa: A001
    """Maximum along one axis; ties route the gradient to the first maximal entry."""
    axis = axis % a.ndim
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis)
    shape = a.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        gk = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(full, np.expand_dims(idx, axis), gk, axis=axis)
        return (full,)

    return make_result(out if keepdims else out.squeeze(axis), (a,), backward, "max")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (a,), backward, "softmax")


# -------------------------------------------------------------------- linear algebra
def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result(ad @ bd, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` over the last axis; ``weight`` is (out, in)."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input features {x.shape[-1]} != weight in-features {weight.shape[1]}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gx = g @ wd if x.requires_grad else None
        g2 = g.reshape(-1, g.shape[-1])
        gw = g2.T @ xd.reshape(-1, xd.shape[-1]) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return make_result(out, parents, backward, "linear")


# ------------------------------------------------------------------- data movement
def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {src} into {shape}") from None
    return make_result(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return make_result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def getitem(a: Tensor, index) -> Tensor:
    shape = a.shape
    fancy = any(isinstance(i, (list, np.ndarray, Tensor)) for i in (index if isinstance(index, tuple) else (index,)))

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        if fancy:
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return make_result(a.data[index], (a,), backward, "getitem")


def take(a: Tensor, indices: np.ndarray, axis: int = 0) -> Tensor:
    """Gather slices of ``a`` along ``axis``; repeated indices accumulate gradient."""
    indices = np.asarray(indices)
    axis = axis % a.ndim
    shape = a.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        moved = np.moveaxis(full, axis, 0)
        gm = np.moveaxis(g, list(range(axis, axis + indices.ndim)), list(range(indices.ndim)))
        np.add.at(moved, indices, gm)
        return (full,)

    return make_result(np.take(a.data, indices, axis=axis), (a,), backward, "take")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    ref = tensors[0].shape
    axis = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != axis):
            raise ShapeError(f"concat along axis {axis}: incompatible shapes {ref} and {t.shape}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward, "concat")


def pad(a: Tensor, widths: Sequence[tuple[int, int]], mode: str = "edge") -> Tensor:
    """Pad every axis by ``(before, after)``; ``mode`` is ``edge`` or ``constant`` (zeros)."""
    widths = [tuple(int(v) for v in w) for w in widths]
    if len(widths) != a.ndim:
        raise ShapeError(f"pad widths for {len(widths)} axes, tensor has {a.ndim}")
    if mode not in ("edge", "constant"):
        raise ValueError(f"unknown pad mode {mode!r}")
    shape = a.shape

    def backward(g):
        for axis, (before, after) in enumerate(widths):
            if before == 0 and after == 0:
                continue
            n = shape[axis]
            core = np.take(g, np.arange(before, before + n), axis=axis)
            if mode == "edge":
                core = core.copy()
                lead = [slice(None)] * g.ndim
                if before:
                    lead[axis] = slice(0, before)
                    first = [slice(None)] * g.ndim
                    first[axis] = slice(0, 1)
                    core[tuple(first)] += g[tuple(lead)].sum(axis=axis, keepdims=True)
                if after:
                    lead[axis] = slice(before + n, None)
                    last = [slice(None)] * g.ndim
                    last[axis] = slice(n - 1, n)
                    core[tuple(last)] += g[tuple(lead)].sum(axis=axis, keepdims=True)
            g = core
        return (g,)

    if all(w == (0, 0) for w in widths):
        return a
    return make_result(np.pad(a.data, widths, mode=mode), (a,), backward, "pad")


def roll(a: Tensor, shifts: Sequence[int], axes: Sequence[int]) -> Tensor:
    shifts, axes = tuple(shifts), tuple(axes)
    back = tuple(-s for s in shifts)
    return make_result(np.roll(a.data, shifts, axis=axes), (a,), lambda g: (np.roll(g, back, axis=axes),), "roll")


# ---------------------------------------------------------------------- convolution
def conv_output_size(size: int, kernel: int, stride: int, pad: int, dilation: int) -> int:
    return (size + 2 * pad - dilation * (kernel - 1) - 1) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0, dilation: int = 1) -> Tensor:
    """2-D cross-correlation over NCHW input with zero padding, stride and dilation."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape} and {weight.shape}")
    if stride < 1 or dilation < 1 or padding < 0:
        raise ValueError(f"invalid conv geometry stride={stride} dilation={dilation} padding={padding}")
    n, c, h, w = x.shape
    oc, ic, kh, kw = weight.shape
    if c != ic:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, kernel expects {ic}")
    ho = conv_output_size(h, kh, stride, padding, dilation)
    wo = conv_output_size(w, kw, stride, padding, dilation)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output would be {ho}x{wo} for input {h}x{w}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    hspan = stride * (ho - 1) + 1
    wspan = stride * (wo - 1) + 1
    taps = [(i, j, (slice(None), slice(None),
                    slice(i * dilation, i * dilation + hspan, stride),
                    slice(j * dilation, j * dilation + wspan, stride)))
            for i in range(kh) for j in range(kw)]

    # cols: (C, kh, kw, N, Ho, Wo) flattened to (C*kh*kw, N*Ho*Wo)
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=xp.dtype)
    for i, j, sl in taps:
        cols[:, i, j] = xp[sl].transpose(1, 0, 2, 3)
    cols = cols.reshape(c * kh * kw, n * ho * wo)
    w2 = weight.data.reshape(oc, -1)
    out = (w2 @ cols).reshape(oc, n, ho, wo).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data.reshape(1, oc, 1, 1)
    out = np.ascontiguousarray(out)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(oc, -1)
        gw = (g2 @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (w2.T @ g2).reshape(c, kh, kw, n, ho, wo)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i, j, sl in taps:
                gxp[sl] += dcols[:, i, j].transpose(1, 0, 2, 3)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return make_result(out, parents, backward, "conv2d")


# -------------------------------------------------------------------- normalization
def batch_norm(x: Tensor, weight: Tensor, bias: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization of NCHW input.

    In training mode the batch statistics normalize the input and the running
    buffers are updated in place (unbiased variance, as the running estimate).
    """
    if x.ndim != 4:
        raise ShapeError(f"batch_norm expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    count = n * h * w
    if count == 0:
        raise ShapeError("batch_norm over a zero-size reduction axis")
    axes = (0, 2, 3)
    xd = x.data
    if training:
        mu = xd.mean(axis=axes, keepdims=True)
        centered = xd - mu
        var = (centered * centered).mean(axis=axes, keepdims=True)
        unbiased = var * (count / (count - 1)) if count > 1 else var
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.reshape(c)
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased.reshape(c)
    else:
        centered = xd - running_mean.reshape(1, c, 1, 1)
        var = running_var.reshape(1, c, 1, 1)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    wd = weight.data.reshape(1, c, 1, 1)
    out = xhat * wd + bias.data.reshape(1, c, 1, 1)

    def backward(g):
        dxhat = g * wd
        if training:
            s1 = dxhat.sum(axis=axes, keepdims=True)
            s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
            gx = inv / count * (count * dxhat - s1 - xhat * s2)
        else:
            gx = dxhat * inv
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return make_result(out.astype(xd.dtype, copy=False), (x, weight, bias), backward, "batch_norm")


def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize over the last axis, then apply a per-feature affine map."""
    d = x.shape[-1]
    if d == 0:
        raise ShapeError("layer_norm over a zero-size feature axis")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    centered = xd - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * weight.data + bias.data

    def backward(g):
        dxhat = g * weight.data
        s1 = dxhat.sum(axis=-1, keepdims=True)
        s2 = (dxhat * xhat).sum(axis=-1, keepdims=True)
        gx = inv / d * (d * dxhat - s1 - xhat * s2)
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return make_result(out, (x, weight, bias), backward, "layer_norm")


# ----------------------------------------------------------------------- resampling
@lru_cache(maxsize=256)
def bilinear_matrix(in_size: int, out_size: int) -> np.ndarray:
    """Interpolation matrix (out_size, in_size) with half-pixel centres."""
    scale = in_size / out_size
    mat = np.zeros((out_size, in_size), dtype=np.float64)
    for o in range(out_size):
        src = builtins.max((o + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(math.floor(src)), in_size - 1)
        i1 = min(i0 + 1, in_size - 1)
        frac = src - i0
        mat[o, i0] += 1.0 - frac
        mat[o, i1] += frac
    mat.setflags(write=False)
    return mat


def resize_bilinear(x: Tensor, size: tuple[int, int]) -> Tensor:
    """Bilinear resize of the two trailing axes to ``size`` (align-corners off)."""
    h, w = x.shape[-2:]
    ho, wo = int(size[0]), int(size[1])
    if ho < 1 or wo < 1:
        raise ShapeError(f"resize target {size} must be positive")
    if (ho, wo) == (h, w):
        return x
    mh = bilinear_matrix(h, ho).astype(x.dtype)
    mw = bilinear_matrix(w, wo).astype(x.dtype)
    out = mh @ (x.data @ mw.T)

    def backward(g):
        return ((mh.T @ g) @ mw,)

    return make_result(out, (x,), backward, "resize_bilinear")


def upsample(x: Tensor, factor: int) -> Tensor:
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    h, w = x.shape[-2:]
    return resize_bilinear(x, (h * factor, w * factor))


def _pad_to_multiple(x: Tensor, window: int) -> Tensor:
    h, w = x.shape[-2:]
    ph, pw = (-h) % window, (-w) % window
    if ph == 0 and pw == 0:
        return x
    widths = [(0, 0)] * (x.ndim - 2) + [(0, ph), (0, pw)]
    return pad(x, widths, mode="edge")


def avg_pool2d(x: Tensor, window: int) -> Tensor:
    """Non-overlapping average pooling; ragged borders are edge-padded first."""
    if window < 1:
        raise ValueError(f"pool window must be >= 1, got {window}")
    xp = _pad_to_multiple(x, window)
    n, c, h, w = xp.shape
    return mean(reshape(xp, (n, c, h // window, window, w // window, window)), axis=(3, 5))


def max_pool2d(x: Tensor, window: int) -> Tensor:
    if window < 1:
        raise ValueError(f"pool window must be >= 1, got {window}")
    xp = _pad_to_multiple(x, window)
    n, c, h, w = xp.shape
    blocks = transpose(reshape(xp, (n, c, h // window, window, w // window, window)), (0, 1, 2, 4, 3, 5))
    return max(reshape(blocks, (n, c, h // window, w // window, window * window)), axis=-1)


def global_avg_pool2d(x: Tensor) -> Tensor:
    return mean(x, axis=(2, 3), keepdims=True)


# --------------------------------------------------------------------- token windows
def window_partition(x: Tensor, window: int) -> Tensor:
    """(B, H, W, C) grid -> (B * nWindows, window*window, C); pads bottom/right by edge replication."""
    b, h, w, c = x.shape
    ph, pw = (-h) % window, (-w) % window
    if ph or pw:
        x = pad(x, [(0, 0), (0, ph), (0, pw), (0, 0)], mode="edge")
    hp, wp = h + ph, w + pw
    x = reshape(x, (b, hp // window, window, wp // window, window, c))
    x = transpose(x, (0, 1, 3, 2, 4, 5))
    return reshape(x, (-1, window * window, c))


def window_merge(windows: Tensor, window: int, height: int, width: int) -> Tensor:
    """Inverse of :func:`window_partition`, cropping any padding away."""
    hp, wp = height + (-height) % window, width + (-width) % window
    nh, nw = hp // window, wp // window
    c = windows.shape[-1]
    b = windows.shape[0] // (nh * nw)
    x = reshape(windows, (b, nh, nw, window, window, c))
    x = transpose(x, (0, 1, 3, 2, 4, 5))
    x = reshape(x, (b, hp, wp, c))
    if hp != height or wp != width:
        x = x[:, :height, :width, :]
    return x


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int,
              bias: Optional[Tensor] = None, mask: Optional[np.ndarray] = None) -> Tensor:
    """Multi-head scaled dot-product attention over (B, L, D) token tensors.

    ``bias`` is (heads, L, L) and is added to every batch element; ``mask`` is a
    constant (G, L, L) additive mask whose leading axis cycles over the batch.
    """
    bsz, length, dim = q.shape
    if dim % heads:
        raise ShapeError(f"token dim {dim} is not divisible by {heads} heads")
    hd = dim // heads

    def split(t):
        return transpose(reshape(t, (bsz, t.shape[1], heads, hd)), (0, 2, 1, 3))

    qh, kh, vh = split(q), split(k), split(v)
    scores = matmul(qh, transpose(kh, (0, 1, 3, 2))) * (1.0 / math.sqrt(hd))
    if bias is not None:
        scores = scores + reshape(bias, (1, heads, length, k.shape[1]))
    if mask is not None:
        groups = mask.shape[0]
        scores = reshape(scores, (bsz // groups, groups, heads, length, k.shape[1]))
        scores = scores + Tensor(mask[None, :, None], dtype=q.dtype)
        scores = reshape(scores, (bsz, heads, length, k.shape[1]))
    weights = softmax(scores, axis=-1)
    out = matmul(weights, vh)
    return reshape(transpose(out, (0, 2, 1, 3)), (bsz, length, dim))


# --------------------------------------------------------------------- probabilities
def probabilities(logits: Tensor, eps: float = PROB_EPS) -> Tensor:
    """Sigmoid followed by the clamp to ``[eps, 1 - eps]`` that keeps ``log`` finite."""
    return clamp(sigmoid(logits), eps, 1.0 - eps)

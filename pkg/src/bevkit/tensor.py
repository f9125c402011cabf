"""Dense tensor operations with analytic gradients.

Tensors are plain numpy arrays.  float32 is the canonical storage type; every
operation accumulates in float64 and rounds the result back to float32,
unless the caller passes float64 inputs, in which case float64 is kept (the
finite-difference oracle relies on that to stay well above rounding noise).

Differentiable operations come in pairs: ``op(...)`` returns the value and
``op_vjp(...)`` returns ``(value, pullback)`` where ``pullback(grad_out)``
maps the upstream gradient to a dict of gradients keyed by argument name.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConsistencyError, OracleError, ParameterError, ShapeError

Pullback = Callable[[np.ndarray], dict]


@dataclass
class GradPair:
    """A value together with gradients w.r.t. named inputs."""

    value: np.ndarray | float
    grads: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass(frozen=True)
class PoolIndices:
    """Argmax positions recorded by :func:`maxpool2d_with_indices`.

    ``flat`` has the pooled shape (Ho, Wo, C) and stores, for every output
    element, the row-major spatial index ``r * W + c`` into the input.
    """

    flat: np.ndarray
    input_shape: tuple[int, int, int]


def out_dtype(*arrays) -> np.dtype:
    for a in arrays:
        if a is not None and np.asarray(a).dtype == np.float64:
            return np.dtype(np.float64)
    return np.dtype(np.float32)


def _f64(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float64)


def as_tensor(data, shape=None) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float32)
    if shape is not None:
        arr = arr.reshape(shape)
    return arr


# ---------------------------------------------------------------- matmul

def matmul_vjp(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    dt = out_dtype(a, b)
    a64, b64 = _f64(a), _f64(b)
    value = (a64 @ b64).astype(dt)

    def pullback(g):
        g = _f64(g)
        return {"a": (g @ b64.T).astype(dt), "b": (a64.T @ g).astype(dt)}

    return value, pullback


def matmul(a, b):
    return matmul_vjp(a, b)[0]


# ---------------------------------------------------------------- softmax

def _softmax64(x64):
    z = x64 - x64.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_lastdim_vjp(x):
    x = np.asarray(x)
    if x.ndim == 0 or x.shape[-1] < 1:
        raise ShapeError("softmax needs a nonempty last axis")
    dt = out_dtype(x)
    y64 = _softmax64(_f64(x))

    def pullback(g):
        g = _f64(g)
        gx = y64 * (g - (g * y64).sum(axis=-1, keepdims=True))
        return {"x": gx.astype(dt)}

    return y64.astype(dt), pullback


def softmax_lastdim(x):
    return softmax_lastdim_vjp(x)[0]


def log_softmax64(x) -> np.ndarray:
    x64 = _f64(x)
    z = x64 - x64.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


# ---------------------------------------------------------------- conv2d

def conv2d_output_shape(in_shape, kernel_shape, stride=1, padding=0):
    """Output (H, W, Cout) of a conv over an (H, W, Cin) input."""
    h, w, cin = in_shape
    kh, kw, kcin, cout = kernel_shape
    if stride < 1 or padding < 0:
        raise ParameterError(f"invalid stride {stride} / padding {padding}")
    if kcin != cin:
        raise ShapeError(f"kernel expects {kcin} input channels, got {cin}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ParameterError("kernel larger than padded input")
    return ((h + 2 * padding - kh) // stride + 1, (w + 2 * padding - kw) // stride + 1, cout)


def conv2d_vjp(x, weight, bias=None, stride=1, padding=0):
    """2-D cross-correlation over an (H, W, Cin) input.

    ``weight`` has shape (kh, kw, Cin, Cout); ``bias`` is (Cout,) or None.
    """
    x = np.asarray(x)
    weight = np.asarray(weight)
    if x.ndim != 3 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects HxWxC input and 4-d kernel, got {x.shape}, {weight.shape}")
    ho, wo, cout = conv2d_output_shape(x.shape, weight.shape, stride, padding)
    if bias is not None and np.shape(bias) != (cout,):
        raise ShapeError(f"bias shape {np.shape(bias)} != ({cout},)")
    kh, kw, cin, _ = weight.shape
    dt = out_dtype(x, weight, bias)

    xp = np.pad(_f64(x), ((padding, padding), (padding, padding), (0, 0)))
    win = sliding_window_view(xp, (kh, kw), axis=(0, 1))[::stride, ::stride]
    # win: (Ho, Wo, Cin, kh, kw) -> columns ordered (kh, kw, Cin) to match the kernel
    cols = win.transpose(0, 1, 3, 4, 2).reshape(ho * wo, kh * kw * cin)
    wmat = _f64(weight).reshape(kh * kw * cin, cout)
    out = cols @ wmat
    if bias is not None:
        out += _f64(bias)
    value = out.reshape(ho, wo, cout).astype(dt)

    def pullback(g):
        g2 = _f64(g).reshape(ho * wo, cout)
        grads = {"weight": (cols.T @ g2).reshape(weight.shape).astype(dt)}
        if bias is not None:
            grads["bias"] = g2.sum(axis=0).astype(dt)
        gcols = (g2 @ wmat.T).reshape(ho, wo, kh, kw, cin)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, :, i, j]
        gx = gxp[padding : padding + x.shape[0], padding : padding + x.shape[1]]
        grads["x"] = gx.astype(dt)
        return grads

    return value, pullback


def conv2d(x, weight, bias=None, stride=1, padding=0):
    return conv2d_vjp(x, weight, bias, stride, padding)[0]


# ---------------------------------------------------------------- pooling

def maxpool2d_with_indices(x, window=2, stride=2):
    """Max pool with argmax bookkeeping; ties go to the first row-major element."""
    value, idx, _ = maxpool2d_vjp(x, window, stride)
    return value, idx


def maxpool2d_vjp(x, window=2, stride=2):
    x = np.asarray(x)
    if x.ndim != 3:
        raise ShapeError(f"maxpool expects HxWxC, got {x.shape}")
    if window < 1 or stride < 1:
        raise ParameterError("pool window and stride must be positive")
    h, w, c = x.shape
    if h % stride or w % stride or h < window or w < window:
        raise ShapeError(f"spatial extents {h}x{w} not divisible by stride {stride}")
    dt = out_dtype(x)
    win = sliding_window_view(x, (window, window), axis=(0, 1))[::stride, ::stride]
    ho, wo = win.shape[:2]
    flatwin = win.reshape(ho, wo, c, window * window)
    arg = flatwin.argmax(axis=-1)
    value = np.take_along_axis(flatwin, arg[..., None], axis=-1)[..., 0].astype(dt)
    di, dj = np.divmod(arg, window)
    rows = np.arange(ho)[:, None, None] * stride + di
    cols = np.arange(wo)[None, :, None] * stride + dj
    idx = PoolIndices(flat=(rows * w + cols).astype(np.int64), input_shape=(h, w, c))

    def pullback(g):
        return {"x": _scatter_to_input(_f64(g), idx).astype(dt)}

    return value, idx, pullback


def _scatter_to_input(values, idx: PoolIndices):
    h, w, c = idx.input_shape
    out = np.zeros((h * w, c), dtype=np.float64)
    chan = np.broadcast_to(np.arange(c), idx.flat.shape)
    np.add.at(out, (idx.flat.ravel(), chan.ravel()), values.ravel())
    return out.reshape(h, w, c)


def _check_indices(y, idx: PoolIndices):
    if not isinstance(idx, PoolIndices):
        raise ConsistencyError("unpool needs PoolIndices from maxpool2d_with_indices")
    if np.shape(y) != idx.flat.shape:
        raise ConsistencyError(f"unpool input {np.shape(y)} does not match indices {idx.flat.shape}")
    h, w, _ = idx.input_shape
    if idx.flat.size and (idx.flat.min() < 0 or idx.flat.max() >= h * w):
        raise ConsistencyError("pool indices out of range")


def maxunpool2d_vjp(y, idx: PoolIndices):
    _check_indices(y, idx)
    dt = out_dtype(y)
    value = _scatter_to_input(_f64(y), idx).astype(dt)
    h, w, c = idx.input_shape
    chan = np.broadcast_to(np.arange(c), idx.flat.shape)

    def pullback(g):
        g = _f64(g).reshape(h * w, c)
        return {"y": g[idx.flat, chan].astype(dt)}

    return value, pullback


def maxunpool2d(y, idx: PoolIndices):
    return maxunpool2d_vjp(y, idx)[0]


# ---------------------------------------------------------------- elementwise

def affine_norm_vjp(x, scale, shift):
    """Per-channel ``x * scale + shift`` over the last axis (inference-mode batch norm)."""
    x = np.asarray(x)
    scale = np.asarray(scale)
    shift = np.asarray(shift)
    c = x.shape[-1] if x.ndim else None
    if scale.shape != (c,) or shift.shape != (c,):
        raise ShapeError(f"affine_norm channel mismatch: {x.shape} vs {scale.shape}/{shift.shape}")
    dt = out_dtype(x, scale, shift)
    x64, s64 = _f64(x), _f64(scale)
    value = (x64 * s64 + _f64(shift)).astype(dt)
    axes = tuple(range(x.ndim - 1))

    def pullback(g):
        g = _f64(g)
        return {
            "x": (g * s64).astype(dt),
            "scale": (g * x64).sum(axis=axes).astype(dt),
            "shift": g.sum(axis=axes).astype(dt),
        }

    return value, pullback


def affine_norm(x, scale, shift):
    return affine_norm_vjp(x, scale, shift)[0]


def relu_vjp(x):
    x = np.asarray(x)
    mask = x > 0
    dt = out_dtype(x)

    def pullback(g):
        return {"x": np.where(mask, _f64(g), 0.0).astype(dt)}

    return np.where(mask, x, 0).astype(dt), pullback


def relu(x):
    return relu_vjp(x)[0]


def concat_channels_vjp(*parts):
    """Concatenate along the last axis; spatial extents must agree exactly."""
    parts = [np.asarray(p) for p in parts]
    lead = parts[0].shape[:-1]
    for p in parts[1:]:
        if p.shape[:-1] != lead:
            raise ShapeError(f"cannot concatenate {parts[0].shape} with {p.shape}")
    dt = out_dtype(*parts)
    value = np.concatenate([p.astype(dt) for p in parts], axis=-1)
    splits = np.cumsum([p.shape[-1] for p in parts])[:-1]

    def pullback(g):
        return {i: piece.astype(dt) for i, piece in enumerate(np.split(np.asarray(g), splits, axis=-1))}

    return value, pullback


# ---------------------------------------------------------------- oracle

def finite_diff_grad(f, x, step=1e-3):
    """Central-difference gradient of a scalar function ``f`` at ``x``.

    Evaluated in float64 regardless of the input dtype.
    """
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(f(x))
        flat[i] = orig - step
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise OracleError(f"non-finite function value near element {i}")
        gflat[i] = (fp - fm) / (2 * step)
    return grad

"""Differentiable kernels on :class:`~mmformer.tensor.Tensor`.

Every function computes its forward result with numpy and attaches the exact
vector-Jacobian product. Reductions use numpy's fixed pairwise summation and
loops visit kernel offsets in a fixed order, so results are reproducible
bit-for-bit for identical inputs.
"""
from __future__ import annotations

from itertools import product
from typing import Optional, Sequence

import numpy as np
from scipy import special

from .tensor import DEFAULT_DTYPE, Tensor, make_result

_SQRT_2PI = np.sqrt(2.0 * np.pi)


def _lift(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype), dtype=dtype)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    out = a.data + b.data
    return make_result(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    out = a.data - b.data
    return make_result(out, (a, b), lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=a.dtype)
        return make_result(a.data * c, (a,), lambda g: (g * c,), "scale")
    out = a.data * b.data

    def _backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), _backward, "mul")


def square(x: Tensor) -> Tensor:
    return make_result(x.data * x.data, (x,), lambda g: (2.0 * x.data * g,), "square")


def relu(x: Tensor) -> Tensor:
    keep = x.data > 0
    return make_result(np.where(keep, x.data, 0).astype(x.dtype), (x,), lambda g: (g * keep,), "relu")


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF written through erf."""
    cdf = 0.5 * (1.0 + special.erf(x.data / np.sqrt(2.0)))
    cdf = cdf.astype(x.dtype)

    def _backward(g):
        pdf = np.exp(-0.5 * x.data * x.data) / _SQRT_2PI
        return (g * (cdf + x.data * pdf),)

    return make_result(x.data * cdf, (x,), _backward, "gelu")


def sigmoid(x: Tensor) -> Tensor:
    s = special.expit(x.data).astype(x.dtype)
    return make_result(s, (x,), lambda g: (g * s * (1 - s),), "sigmoid")


# -- reductions and shape ------------------------------------------------------

def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    out = np.asarray(x.data.sum(axis=axis), dtype=x.dtype)

    def _backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return make_result(out, (x,), _backward, "sum")


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum(x, axis), 1.0 / n)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = x.data.reshape(shape)
    return make_result(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return make_result(out, (x,), lambda g: (g.transpose(inverse),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != ax):
            raise ValueError(f"concat: incompatible shapes {ref} and {t.shape} along axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def _backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return make_result(out, tensors, _backward, "concat")


def flatten_spatial(x: Tensor) -> Tensor:
    """``[N, C, D, H, W] -> [N, D*H*W, C]`` with row-major voxel order."""
    n, c = x.shape[:2]
    return transpose(reshape(x, (n, c, -1)), (0, 2, 1))


def unflatten_spatial(tokens: Tensor, spatial: Sequence[int]) -> Tensor:
    """Inverse of :func:`flatten_spatial`."""
    n, s, c = tokens.shape
    if int(np.prod(spatial)) != s:
        raise ValueError(f"cannot fold {s} tokens into spatial shape {tuple(spatial)}")
    return reshape(transpose(tokens, (0, 2, 1)), (n, c, *spatial))


# -- dense algebra -------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes (identical batch dims)."""
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def _backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            gb = _unbroadcast(gb, b.shape)
        return ga, gb

    return make_result(out, (a, b), _backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map over the last axis: ``x @ weight + bias``, weight ``[Din, Dout]``."""
    din, dout = weight.shape
    if x.shape[-1] != din:
        raise ValueError(f"linear: input has {x.shape[-1]} features, weight expects {din}")
    x2 = x.data.reshape(-1, din)
    out = x2 @ weight.data
    if bias is not None:
        out = out + bias.data
    out = out.reshape(*x.shape[:-1], dout)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def _backward(g):
        g2 = g.reshape(-1, dout)
        gx = (g2 @ weight.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return make_result(out, parents, _backward, "linear")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def _backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return make_result(s, (x,), _backward, "softmax")


# -- normalization -------------------------------------------------------------

def _normalize_last(x: np.ndarray, eps: float):
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    return centered * inv, inv


def _normalize_last_backward(gxhat: np.ndarray, xhat: np.ndarray, inv: np.ndarray) -> np.ndarray:
    m1 = gxhat.mean(axis=-1, keepdims=True)
    m2 = (gxhat * xhat).mean(axis=-1, keepdims=True)
    return inv * (gxhat - m1 - xhat * m2)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ValueError("layer_norm: affine parameters must match the last axis")
    xhat, inv = _normalize_last(x.data, eps)
    out = xhat * gamma.data + beta.data
    red = tuple(range(x.ndim - 1))

    def _backward(g):
        gx = _normalize_last_backward(g * gamma.data, xhat, inv) if x.requires_grad else None
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return make_result(out, (x, gamma, beta), _backward, "layer_norm")


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    n, c = x.shape[:2]
    if c % groups:
        raise ValueError(f"group_norm: {c} channels not divisible into {groups} groups")
    grouped = x.data.reshape(n, groups, -1)
    xhat_g, inv = _normalize_last(grouped, eps)
    xhat = xhat_g.reshape(x.shape)
    bshape = (1, c) + (1,) * (x.ndim - 2)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
    red = (0,) + tuple(range(2, x.ndim))

    def _backward(g):
        gx = None
        if x.requires_grad:
            gxhat = (g * gamma.data.reshape(bshape)).reshape(n, groups, -1)
            gx = _normalize_last_backward(gxhat, xhat_g, inv).reshape(x.shape)
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return make_result(out, (x, gamma, beta), _backward, "group_norm")


# -- convolutions --------------------------------------------------------------

def conv_output_extent(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv3d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """3D cross-correlation with zero padding.

    ``x`` is ``[N, Cin, D, H, W]`` and ``weight`` is ``[Cout, Cin, k, k, k]``.
    """
    if x.ndim != 5 or weight.ndim != 5:
        raise ValueError("conv3d expects 5D input and weight")
    n, cin, d, h, w = x.shape
    cout, cw, kd, kh, kw = weight.shape
    if cw != cin:
        raise ValueError(f"conv3d: input has {cin} channels, weight expects {cw}")
    if stride < 1:
        raise ValueError("conv3d: stride must be positive")
    od, oh, ow = (conv_output_extent(e, k, stride, padding) for e, k in zip((d, h, w), (kd, kh, kw)))
    if min(od, oh, ow) <= 0:
        raise ValueError(f"conv3d: non-positive output extent for input {x.shape}")
    p, s = padding, stride
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p), (p, p))) if p else x.data
    wd = weight.data
    # per-offset [Cout, Cin] slices must be contiguous to stay on the BLAS path
    wk = np.ascontiguousarray(wd.transpose(2, 3, 4, 0, 1))
    wk_t = np.ascontiguousarray(wd.transpose(2, 3, 4, 1, 0))
    dtype = np.result_type(x.data, wd)
    offsets = list(product(range(kd), range(kh), range(kw)))
    nvox = od * oh * ow

    def window(i, a, b, c):
        return xp[i, :, a:a + s * (od - 1) + 1:s, b:b + s * (oh - 1) + 1:s, c:c + s * (ow - 1) + 1:s]

    use_cols = cin * len(offsets) <= 64
    out = np.zeros((n, cout, nvox), dtype=dtype)
    for i in range(n):
        if use_cols:
            cols = np.empty((cin, len(offsets), nvox), dtype=xp.dtype)
            for j, (a, b, c) in enumerate(offsets):
                cols[:, j] = window(i, a, b, c).reshape(cin, nvox)
            out[i] = wd.reshape(cout, -1) @ cols.reshape(-1, nvox)
        else:
            acc = out[i]
            for a, b, c in offsets:
                acc += wk[a, b, c] @ window(i, a, b, c).reshape(cin, nvox)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(n, cout, od, oh, ow)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def _backward(g):
        g3 = g.reshape(n, cout, nvox)
        gwk = np.zeros(wk.shape, dtype=dtype) if weight.requires_grad else None
        gxp = np.zeros(xp.shape, dtype=dtype) if x.requires_grad else None
        for i in range(n):
            for a, b, c in offsets:
                if gwk is not None:
                    gwk[a, b, c] += g3[i] @ window(i, a, b, c).reshape(cin, nvox).T
                if gxp is not None:
                    gxp[i, :, a:a + s * (od - 1) + 1:s, b:b + s * (oh - 1) + 1:s, c:c + s * (ow - 1) + 1:s] += (
                        wk_t[a, b, c] @ g3[i]
                    ).reshape(cin, od, oh, ow)
        gw = None if gwk is None else np.ascontiguousarray(gwk.transpose(3, 4, 0, 1, 2))
        gx = None
        if gxp is not None:
            gx = gxp[:, :, p:p + d, p:p + h, p:p + w] if p else gxp
        if bias is None:
            return gx, gw
        return gx, gw, g3.sum(axis=(0, 2))

    return make_result(out, parents, _backward, "conv3d")


def transposed_conv3d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 2) -> Tensor:
    """Kernel-2 / stride-2 transposed convolution; doubles every spatial extent.

    ``weight`` is ``[Cin, Cout, 2, 2, 2]``. The stride equals the kernel, so
    each input voxel writes a disjoint 2x2x2 output tile.
    """
    n, cin, d, h, w = x.shape
    cw, cout, kd, kh, kw = weight.shape
    if cw != cin:
        raise ValueError(f"transposed_conv3d: input has {cin} channels, weight expects {cw}")
    if stride != 2 or (kd, kh, kw) != (2, 2, 2):
        raise ValueError("transposed_conv3d supports kernel 2 with stride 2 only")
    x3 = x.data.reshape(n, cin, -1)
    w2 = weight.data.reshape(cin, cout * 8)
    tiles = np.einsum("ck,ncv->nkv", w2, x3, optimize=True)  # [n, cout*8, d*h*w]
    out = tiles.reshape(n, cout, 2, 2, 2, d, h, w).transpose(0, 1, 5, 2, 6, 3, 7, 4)
    out = np.ascontiguousarray(out).reshape(n, cout, 2 * d, 2 * h, 2 * w)
    if bias is not None:
        out += bias.data[None, :, None, None, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def _backward(g):
        gt = g.reshape(n, cout, d, 2, h, 2, w, 2).transpose(0, 1, 3, 5, 7, 2, 4, 6).reshape(n, cout * 8, -1)
        gx = np.einsum("ck,nkv->ncv", w2, gt, optimize=True).reshape(x.shape) if x.requires_grad else None
        gw = np.einsum("ncv,nkv->ck", x3, gt, optimize=True).reshape(weight.shape) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3, 4))

    return make_result(out, parents, _backward, "transposed_conv3d")


def interpolation_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Linear resampling weights (``n_out x n_in``), half-pixel centers.

    Source coordinate of output ``j`` is ``(j + 0.5) * n_in / n_out - 0.5``
    clamped to ``[0, n_in - 1]`` (the align_corners=False convention).
    """
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    mat = np.zeros((n_out, n_in), dtype=dtype)
    rows = np.arange(n_out)
    np.add.at(mat, (rows, lo), 1.0 - frac)
    np.add.at(mat, (rows, hi), frac)
    return mat


def trilinear_interpolate(x: Tensor, size: Sequence[int]) -> Tensor:
    """Resize the three trailing axes of ``[N, C, D, H, W]`` to ``size``."""
    size = tuple(int(v) for v in size)
    if len(size) != 3 or min(size) < 1:
        raise ValueError(f"trilinear_interpolate: bad target size {size}")
    if size == x.shape[2:]:
        return make_result(x.data.copy(), (x,), lambda g: (g,), "trilinear_interpolate")
    mats = [interpolation_matrix(n_in, n_out, x.dtype) for n_in, n_out in zip(x.shape[2:], size)]

    def apply(arr, matrices):
        for axis, m in zip((2, 3, 4), matrices):
            arr = np.moveaxis(np.tensordot(m, arr, axes=([1], [axis])), 0, axis)
        return arr

    out = np.ascontiguousarray(apply(x.data, mats))
    return make_result(out, (x,), lambda g: (np.ascontiguousarray(apply(g, [m.T for m in mats])),), "trilinear_interpolate")

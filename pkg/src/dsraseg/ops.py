"""Differentiable image ops: convolution, bilinear resize, channel softmax."""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, make


def _conv_out(extent: int, k: int, stride: int, padding: int) -> int:
    return (extent + 2 * padding - k) // stride + 1


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """Cross-correlation of an NCHW input with a (Cout, Cin, kh, kw) kernel."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and weight, got {x.shape}, {weight.shape}")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ValueError(f"conv2d channel mismatch: input has {cin}, weight expects {wcin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d kernel extents must be odd, got {kh}x{kw}")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"conv2d bias shape {bias.shape} != ({cout},)")
    oh, ow = _conv_out(h, kh, stride, padding), _conv_out(w, kw, stride, padding)
    if oh <= 0 or ow <= 0:
        raise ValueError(f"conv2d output extent {oh}x{ow} is not positive")

    xd, wd = x.data, weight.data
    if kh == 1 and kw == 1 and stride == 1 and padding == 0:
        cols = None
        out = np.tensordot(wd[:, :, 0, 0], xd, axes=([1], [1])).transpose(1, 0, 2, 3)
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
        cols = win[:, :, ::stride, ::stride][:, :, :oh, :ow]
        out = np.tensordot(cols, wd, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def backward(g: np.ndarray):
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        if cols is None:
            gw = np.tensordot(g, xd, axes=([0, 2, 3], [0, 2, 3]))[:, :, None, None]
            gx = np.tensordot(g, wd[:, :, 0, 0], axes=([1], [0])).transpose(0, 3, 1, 2)
            return gx, gw, gb
        gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
        gcols = np.tensordot(g, wd, axes=([1], [0]))  # N, oh, ow, Cin, kh, kw
        gxp = np.zeros((n, cin, h + 2 * padding, w + 2 * padding))
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += gcols[
                    :, :, :, :, i, j
                ].transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding : padding + h, padding : padding + w]
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make(out, inputs, backward)


def bilinear_coords(src: int, dst: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sample positions for resizing one axis from ``src`` to ``dst`` samples.

    Half-pixel centres, corners not aligned:
    ``pos = (d + 0.5) * src / dst - 0.5`` clamped to ``[0, src - 1]``.
    Returns the lower index, upper index and fractional offset per output sample.
    """
    pos = (np.arange(dst) + 0.5) * (src / dst) - 0.5
    pos = np.clip(pos, 0.0, src - 1)
    i0 = np.floor(pos).astype(np.intp)
    i1 = np.minimum(i0 + 1, src - 1)
    return i0, i1, pos - i0


def _interp_matrix(src: int, dst: int) -> np.ndarray:
    i0, i1, f = bilinear_coords(src, dst)
    m = np.zeros((dst, src))
    rows = np.arange(dst)
    np.add.at(m, (rows, i0), 1.0 - f)
    np.add.at(m, (rows, i1), f)
    return m


def _lerp_axis(a: np.ndarray, axis: int, dst: int) -> np.ndarray:
    src = a.shape[axis]
    if src == dst:
        return a
    i0, i1, f = bilinear_coords(src, dst)
    shape = [1] * a.ndim
    shape[axis] = dst
    lo = np.take(a, i0, axis=axis)
    hi = np.take(a, i1, axis=axis)
    # lo + f*(hi - lo) keeps constant regions exact
    return lo + f.reshape(shape) * (hi - lo)


def resize_array(a: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of the last two axes of a plain array."""
    return _lerp_axis(_lerp_axis(a, a.ndim - 2, out_h), a.ndim - 1, out_w)


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    if out_h < 1 or out_w < 1:
        raise ValueError(f"bilinear_resize target {out_h}x{out_w} must be >= 1")
    n, c, h, w = x.shape
    if (h, w) == (out_h, out_w):
        return make(x.data.copy(), (x,), lambda g: (g,))
    out = resize_array(x.data, out_h, out_w)

    def backward(g: np.ndarray):
        gx = g
        if out_w != w:
            gx = np.tensordot(gx, _interp_matrix(w, out_w), axes=([3], [0]))
        if out_h != h:
            gx = np.moveaxis(np.tensordot(gx, _interp_matrix(h, out_h), axes=([2], [0])), 3, 2)
        return (gx,)

    return make(out, (x,), backward)


def softmax_channels(x: Tensor, axis: str = "channel") -> Tensor:
    """Softmax over the channel axis per pixel (``axis="spatial"``: over H*W per channel)."""
    if axis == "channel":
        axes: tuple[int, ...] = (1,)
    elif axis == "spatial":
        axes = (2, 3)
    else:
        raise ValueError(f"unknown softmax axis {axis!r}")
    z = x.data - x.data.max(axis=axes, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axes, keepdims=True)
    return make(y, (x,), lambda g: (y * (g - (g * y).sum(axis=axes, keepdims=True)),))


def resize_nearest(labels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbour resize of the last two axes (half-pixel centres); for label maps."""
    h, w = labels.shape[-2:]
    if (h, w) == (out_h, out_w):
        return labels
    rows = np.minimum(((np.arange(out_h) + 0.5) * (h / out_h)).astype(np.intp), h - 1)
    cols = np.minimum(((np.arange(out_w) + 0.5) * (w / out_w)).astype(np.intp), w - 1)
    return labels[..., rows[:, None], cols[None, :]]

"""Spatial kernels: convolution, max pooling and bilinear resampling.

Forward passes are written as pure array helpers so the autodiff wrappers
can reuse them for replay, and so the data-loading code can resize plain
arrays with the exact same arithmetic.
"""
from __future__ import annotations

import numpy as np

from ..errors import ShapeError
from .core import Tensor, _apply, _coerce


def _conv2d_forward(x: np.ndarray, k: np.ndarray, b: np.ndarray,
                    stride: int, padding: int, dilation: int):
    h, w, cin = x.shape
    kh, kw, _, cout = k.shape
    eff_h = dilation * (kh - 1) + 1
    eff_w = dilation * (kw - 1) + 1
    oh = (h + 2 * padding - eff_h) // stride + 1
    ow = (w + 2 * padding - eff_w) // stride + 1
    if oh < 1 or ow < 1:
        raise ValueError(
            f"conv2d: kernel {kh}x{kw} (dilation {dilation}) does not fit input {h}x{w} with padding {padding}"
        )
    xp = np.pad(x, ((padding, padding), (padding, padding), (0, 0))) if padding else x
    cols = np.empty((oh, ow, kh * kw * cin), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            rs, cs = i * dilation, j * dilation
            cols[:, :, (i * kw + j) * cin:(i * kw + j + 1) * cin] = \
                xp[rs:rs + (oh - 1) * stride + 1:stride, cs:cs + (ow - 1) * stride + 1:stride]
    out = cols.reshape(oh * ow, -1) @ k.reshape(-1, cout) + b
    return out.reshape(oh, ow, cout), cols, xp.shape


def conv2d(x, kernel, bias, stride: int = 1, padding: int = 0, dilation: int = 1) -> Tensor:
    """Cross-correlation of an [H, W, Cin] tensor with a [kh, kw, Cin, Cout] kernel."""
    x, kernel, bias = _coerce(x), _coerce(kernel), _coerce(bias)
    if x.data.ndim != 3 or kernel.data.ndim != 4 or bias.data.ndim != 1:
        raise ShapeError(
            f"conv2d: expected ranks 3/4/1, got {x.data.shape}/{kernel.data.shape}/{bias.data.shape}"
        )
    kh, kw, kcin, cout = kernel.data.shape
    if x.data.shape[2] != kcin:
        raise ShapeError(f"conv2d: input has {x.data.shape[2]} channels, kernel expects {kcin}")
    if bias.data.shape[0] != cout:
        raise ShapeError(f"conv2d: bias has {bias.data.shape[0]} entries, kernel produces {cout}")
    if stride < 1 or dilation < 1:
        raise ValueError("conv2d: stride and dilation must be positive")
    if padding < 0:
        raise ValueError("conv2d: padding must be non-negative")

    out, cols, padded_shape = _conv2d_forward(x.data, kernel.data, bias.data, stride, padding, dilation)
    oh, ow, _ = out.shape
    h, w, cin = x.data.shape
    k2 = kernel.data.reshape(-1, cout)

    def bwd(g):
        g2 = g.reshape(oh * ow, cout)
        gb = g2.sum(axis=0)
        gk = (cols.reshape(oh * ow, -1).T @ g2).reshape(kernel.data.shape)
        gcols = (g2 @ k2.T).reshape(oh, ow, kh * kw * cin)
        gxp = np.zeros(padded_shape)
        for i in range(kh):
            for j in range(kw):
                rs, cs = i * dilation, j * dilation
                gxp[rs:rs + (oh - 1) * stride + 1:stride, cs:cs + (ow - 1) * stride + 1:stride] += \
                    gcols[:, :, (i * kw + j) * cin:(i * kw + j + 1) * cin]
        gx = gxp[padding:padding + h, padding:padding + w] if padding else gxp
        return gx, gk, gb

    return _apply(
        "conv2d",
        (x, kernel, bias),
        out,
        lambda xa, ka, ba: _conv2d_forward(xa, ka, ba, stride, padding, dilation)[0],
        bwd,
    )


def _maxpool2d_windows(x: np.ndarray, window: int, stride: int):
    h, w, c = x.shape
    oh = (h - window) // stride + 1
    ow = (w - window) // stride + 1
    win = np.empty((oh, ow, c, window * window), dtype=x.dtype)
    for i in range(window):
        for j in range(window):
            win[..., i * window + j] = \
                x[i:i + (oh - 1) * stride + 1:stride, j:j + (ow - 1) * stride + 1:stride]
    return win, oh, ow


def _maxpool2d_forward(x: np.ndarray, window: int, stride: int):
    win, oh, ow = _maxpool2d_windows(x, window, stride)
    flat = win.argmax(axis=-1)
    out = np.take_along_axis(win, flat[..., None], axis=-1)[..., 0]
    return out, flat, oh, ow


def maxpool2d(x, window: int, stride: int) -> Tensor:
    """Windowed max over an [H, W, C] tensor. Ties resolve to the first cell."""
    x = _coerce(x)
    if x.data.ndim != 3:
        raise ShapeError(f"maxpool2d expects a rank-3 tensor, got {x.data.shape}")
    if window < 1 or stride < 1:
        raise ValueError("maxpool2d: window and stride must be positive")
    h, w, c = x.data.shape
    if h < window or w < window:
        raise ValueError(f"maxpool2d: window {window} larger than input {h}x{w}")

    out, flat, oh, ow = _maxpool2d_forward(x.data, window, stride)
    in_shape = x.data.shape

    def bwd(g):
        rows = (np.arange(oh) * stride)[:, None, None] + flat // window
        cols = (np.arange(ow) * stride)[None, :, None] + flat % window
        chans = np.broadcast_to(np.arange(c)[None, None, :], flat.shape)
        gx = np.zeros(in_shape)
        np.add.at(gx, (rows, cols, chans), g)
        return (gx,)

    return _apply(
        "maxpool2d",
        (x,),
        out,
        lambda xa: _maxpool2d_forward(xa, window, stride)[0],
        bwd,
    )


def _axis_samples(positions: np.ndarray, extent: int):
    pos = np.clip(positions, 0.0, extent - 1.0)
    i0 = np.floor(pos).astype(np.intp)
    np.clip(i0, 0, extent - 1, out=i0)
    i1 = np.minimum(i0 + 1, extent - 1)
    return i0, i1, pos - i0


def _bilinear_sample_forward(x: np.ndarray, row_pos: np.ndarray, col_pos: np.ndarray):
    h, w, _ = x.shape
    r0, r1, fr = _axis_samples(row_pos, h)
    c0, c1, fc = _axis_samples(col_pos, w)
    wr = fr[:, None, None]
    wc = fc[None, :, None]
    top = (1.0 - wc) * x[np.ix_(r0, c0)] + wc * x[np.ix_(r0, c1)]
    bot = (1.0 - wc) * x[np.ix_(r1, c0)] + wc * x[np.ix_(r1, c1)]
    return (1.0 - wr) * top + wr * bot


def _bilinear_sample_op(x: Tensor, row_pos: np.ndarray, col_pos: np.ndarray, name: str) -> Tensor:
    h, w, _ = x.data.shape
    r0, r1, fr = _axis_samples(row_pos, h)
    c0, c1, fc = _axis_samples(col_pos, w)
    out = _bilinear_sample_forward(x.data, row_pos, col_pos)
    in_shape = x.data.shape

    def bwd(g):
        wr = fr[:, None, None]
        wc = fc[None, :, None]
        gx = np.zeros(in_shape)
        np.add.at(gx, (r0[:, None], c0[None, :]), (1.0 - wr) * (1.0 - wc) * g)
        np.add.at(gx, (r0[:, None], c1[None, :]), (1.0 - wr) * wc * g)
        np.add.at(gx, (r1[:, None], c0[None, :]), wr * (1.0 - wc) * g)
        np.add.at(gx, (r1[:, None], c1[None, :]), wr * wc * g)
        return (gx,)

    return _apply(
        name,
        (x,),
        out,
        lambda xa: _bilinear_sample_forward(xa, row_pos, col_pos),
        bwd,
    )


def _resize_positions(in_extent: int, out_extent: int) -> np.ndarray:
    # align-corners: first/last samples land exactly on the first/last pixel
    return np.linspace(0.0, in_extent - 1.0, out_extent)


def bilinear_resize_array(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Align-corners bilinear resize of a raw [H, W, C] array."""
    return _bilinear_sample_forward(x, _resize_positions(x.shape[0], out_h),
                                    _resize_positions(x.shape[1], out_w))


def bilinear_resize(x, out_h: int, out_w: int) -> Tensor:
    """Align-corners bilinear resize of an [H, W, C] tensor."""
    x = _coerce(x)
    if x.data.ndim != 3:
        raise ShapeError(f"bilinear_resize expects a rank-3 tensor, got {x.data.shape}")
    if out_h < 1 or out_w < 1:
        raise ValueError("bilinear_resize: output extents must be positive")
    return _bilinear_sample_op(
        x,
        _resize_positions(x.data.shape[0], out_h),
        _resize_positions(x.data.shape[1], out_w),
        "bilinear_resize",
    )


def bilinear_crop(x, row_start: float, row_stop: float, col_start: float, col_stop: float,
                  out_h: int, out_w: int) -> Tensor:
    """Bilinear-sample a half-open float window of an [H, W, C] tensor.

    The window [start, stop) covers pixel centers start .. stop-1, so a
    window spanning the whole tensor reproduces ``bilinear_resize`` and a
    full-size output is an exact crop.
    """
    x = _coerce(x)
    if out_h < 1 or out_w < 1:
        raise ValueError("bilinear_crop: output extents must be positive")
    row_last = max(row_stop - 1.0, row_start)
    col_last = max(col_stop - 1.0, col_start)
    rows = np.linspace(row_start, row_last, out_h)
    cols = np.linspace(col_start, col_last, out_w)
    return _bilinear_sample_op(x, rows, cols, "bilinear_crop")

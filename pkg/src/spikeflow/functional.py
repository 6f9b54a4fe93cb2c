"""Differentiable image operators: convolutions, pooling, warping, spikes.

The ``*_array`` kernels work on plain numpy arrays and are reused by the event
simulator and the instrumented op counter; the Tensor-level wrappers register
their gradient rules on the active tape.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, ShapeError
from .tensor import Tensor, as_tensor, make_result


def _windows(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv_output_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv2d_array(x: np.ndarray, w: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    kh, kw = w.shape[2:]
    win = _windows(x, kh, kw, stride, padding)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d_weight_grad(x: np.ndarray, g: np.ndarray, kshape: tuple[int, int], stride: int, padding: int) -> np.ndarray:
    win = _windows(x, kshape[0], kshape[1], stride, padding)
    return np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))


def conv2d_input_adjoint(g: np.ndarray, w: np.ndarray, stride: int, padding: int, out_hw: tuple[int, int]) -> np.ndarray:
    """Adjoint of :func:`conv2d_array` w.r.t. its input (a col2im scatter)."""
    b, _, ho, wo = g.shape
    cin, kh, kw = w.shape[1:]
    h, wd = out_hw
    hp = max(h + 2 * padding, (ho - 1) * stride + kh)
    wp = max(wd + 2 * padding, (wo - 1) * stride + kw)
    buf = np.zeros((b, cin, hp, wp))
    cols = np.tensordot(w, g, axes=([0], [1]))  # [cin, kh, kw, b, ho, wo]
    for i in range(kh):
        for j in range(kw):
            buf[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += (
                cols[:, i, j].transpose(1, 0, 2, 3)
            )
    return np.ascontiguousarray(buf[:, :, padding:padding + h, padding:padding + wd])


def _check_conv(x: Tensor, w: Tensor, stride: int, padding: int, name: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{name}: input must be 4-D [B,C,H,W], got shape {x.shape}")
    if w.ndim != 4:
        raise ShapeError(f"{name}: weight must be 4-D, got shape {w.shape}")
    if stride < 1 or padding < 0:
        raise ContractError(f"{name}: need stride >= 1 and padding >= 0")


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` [B,Cin,H,W] with ``w`` [Cout,Cin,kh,kw]."""
    x, w = as_tensor(x), as_tensor(w)
    _check_conv(x, w, stride, padding, "conv2d")
    if w.shape[1] != x.shape[1]:
        raise ShapeError(f"conv2d: channel axis mismatch, input C={x.shape[1]} vs weight Cin={w.shape[1]}")
    kh, kw = w.shape[2:]
    if kh % 2 == 0 or kw % 2 == 0:
        raise ContractError(f"conv2d: kernel extents must be odd, got {kh}x{kw}")
    h, wd = x.shape[2:]
    ho, wo = conv_output_size(h, kh, stride, padding), conv_output_size(wd, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: empty output along height/width for input {h}x{wd}, kernel {kh}x{kw}")
    xd, wdt = x.data, w.data

    def bw(g):
        return (
            conv2d_input_adjoint(g, wdt, stride, padding, (h, wd)),
            conv2d_weight_grad(xd, g, (kh, kw), stride, padding),
        )

    return make_result("conv2d", conv2d_array(xd, wdt, stride, padding), (x, w), bw)


def conv_transpose2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0, output_padding: int = 0) -> Tensor:
    """Transposed convolution; ``w`` is [Cin,Cout,kh,kw].

    Output extent is ``(H-1)*stride - 2*padding + k + output_padding``; the
    operator is the exact adjoint of :func:`conv2d` with the same geometry.
    """
    x, w = as_tensor(x), as_tensor(w)
    _check_conv(x, w, stride, padding, "conv_transpose2d")
    if w.shape[0] != x.shape[1]:
        raise ShapeError(
            f"conv_transpose2d: channel axis mismatch, input C={x.shape[1]} vs weight Cin={w.shape[0]}"
        )
    if output_padding < 0 or output_padding >= stride:
        raise ContractError("conv_transpose2d: output_padding must be smaller than stride")
    kh, kw = w.shape[2:]
    h, wd = x.shape[2:]
    ho = (h - 1) * stride - 2 * padding + kh + output_padding
    wo = (wd - 1) * stride - 2 * padding + kw + output_padding
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv_transpose2d: empty output along height/width for input {h}x{wd}")
    xd, wdt = x.data, w.data

    def bw(g):
        return (
            conv2d_array(g, wdt, stride, padding),
            conv2d_weight_grad(g, xd, (kh, kw), stride, padding),
        )

    return make_result("conv_transpose2d", conv2d_input_adjoint(xd, wdt, stride, padding, (ho, wo)), (x, w), bw)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    return x + b.reshape(1, -1, 1, 1)


def avg_pool2d_array(x: np.ndarray) -> np.ndarray:
    b, c, h, w = x.shape
    return x.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def avg_pool2d(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2."""
    x = as_tensor(x)
    h, w = x.shape[2:]
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2d: height/width must be even, got {h}x{w}")

    def bw(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25,)

    return make_result("avg_pool2d", avg_pool2d_array(x.data), (x,), bw)


def _bilinear_parts(h: int, w: int, cx: np.ndarray, cy: np.ndarray):
    xc = np.clip(cx, 0.0, w - 1.0)
    yc = np.clip(cy, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(xc).astype(np.int64), max(w - 2, 0))
    y0 = np.minimum(np.floor(yc).astype(np.int64), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    return x0, x1, y0, y1, xc - x0, yc - y0


def bilinear_sample_array(img: np.ndarray, cx: np.ndarray, cy: np.ndarray) -> np.ndarray:
    """Sample ``img`` [B,C,H,W] at pixel coordinates ``cx``/``cy`` [B,H',W'] with border clamping."""
    h, w = img.shape[2:]
    x0, x1, y0, y1, wx, wy = _bilinear_parts(h, w, cx, cy)
    bi = np.arange(img.shape[0])[:, None, None]
    i00 = np.moveaxis(img[bi, :, y0, x0], -1, 1)
    i01 = np.moveaxis(img[bi, :, y0, x1], -1, 1)
    i10 = np.moveaxis(img[bi, :, y1, x0], -1, 1)
    i11 = np.moveaxis(img[bi, :, y1, x1], -1, 1)
    wx, wy = wx[:, None], wy[:, None]
    return (1 - wy) * ((1 - wx) * i00 + wx * i01) + wy * ((1 - wx) * i10 + wx * i11)


def bilinear_sample(image: Tensor, coords_x: Tensor, coords_y: Tensor) -> Tensor:
    """Differentiable bilinear lookup; out-of-range coordinates clamp to the border."""
    image, coords_x, coords_y = as_tensor(image), as_tensor(coords_x), as_tensor(coords_y)
    if image.ndim != 4:
        raise ShapeError(f"bilinear_sample: image must be [B,C,H,W], got {image.shape}")
    if coords_x.shape != coords_y.shape or coords_x.ndim != 3 or coords_x.shape[0] != image.shape[0]:
        raise ShapeError(
            f"bilinear_sample: coords must both be [B,H,W] with B={image.shape[0]}, "
            f"got {coords_x.shape} and {coords_y.shape}"
        )
    img, cx, cy = image.data, coords_x.data, coords_y.data
    b, c, h, w = img.shape
    x0, x1, y0, y1, wx, wy = _bilinear_parts(h, w, cx, cy)
    bi = np.arange(b)[:, None, None]
    i00 = np.moveaxis(img[bi, :, y0, x0], -1, 1)
    i01 = np.moveaxis(img[bi, :, y0, x1], -1, 1)
    i10 = np.moveaxis(img[bi, :, y1, x0], -1, 1)
    i11 = np.moveaxis(img[bi, :, y1, x1], -1, 1)
    wx4, wy4 = wx[:, None], wy[:, None]
    out = (1 - wy4) * ((1 - wx4) * i00 + wx4 * i01) + wy4 * ((1 - wx4) * i10 + wx4 * i11)
    inside_x = (cx >= 0) & (cx <= w - 1)
    inside_y = (cy >= 0) & (cy <= h - 1)

    def bw(g):
        g_img = np.zeros(b * c * h * w)
        base = (np.arange(b)[:, None] * c + np.arange(c)[None, :]) * (h * w)  # [b, c]
        base = base[:, :, None, None]
        for yy, xx, wgt in (
            (y0, x0, (1 - wy) * (1 - wx)),
            (y0, x1, (1 - wy) * wx),
            (y1, x0, wy * (1 - wx)),
            (y1, x1, wy * wx),
        ):
            idx = base + (yy * w + xx)[:, None]
            g_img += np.bincount(idx.ravel(), weights=(g * wgt[:, None]).ravel(), minlength=g_img.size)
        dx = (1 - wy4) * (i01 - i00) + wy4 * (i11 - i10)
        dy = (1 - wx4) * (i10 - i00) + wx4 * (i11 - i01)
        g_cx = (g * dx).sum(axis=1) * inside_x
        g_cy = (g * dy).sum(axis=1) * inside_y
        return g_img.reshape(b, c, h, w), g_cx, g_cy

    return make_result("bilinear_sample", out, (image, coords_x, coords_y), bw)


def spike(membrane: Tensor, threshold: float) -> Tensor:
    """Heaviside firing ``membrane > threshold``.

    Backward uses the integrate-and-fire surrogate: ``d spike / d membrane =
    1/threshold`` where the neuron fired and 0 elsewhere.
    """
    membrane = as_tensor(membrane)
    if threshold <= 0:
        raise ContractError("firing threshold must be positive")
    fired = (membrane.data > threshold).astype(np.float64)
    gate = fired / threshold
    return make_result("spike", fired, (membrane,), lambda g: (g * gate,))

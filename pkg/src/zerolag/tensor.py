"""Small numeric kernel: convolution, bilinear sampling, resizing and pointwise ops.

Every tensor is a plain ``numpy.ndarray`` laid out as (channels, height, width).
Single precision is the working dtype; double precision is used by the gradient
tests. Each forward op has an explicit ``*_grad`` counterpart, and composites
(blocks, the network, the loss) chain them by hand.

FLOPs convention: one multiply-accumulate counts as one FLOP.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are inconsistent; the message names the dimension."""


class NonFiniteError(FloatingPointError):
    pass


@dataclass(frozen=True)
class ConvSpec:
    kernel: int
    cin: int
    cout: int
    stride: int = 1
    bias: bool = True

    def __post_init__(self):
        if self.kernel not in (1, 3):
            raise ValueError(f"kernel must be 1 or 3, got {self.kernel}")
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")
        if self.cin < 1 or self.cout < 1:
            raise ValueError("channel counts must be positive")

    def out_size(self, h: int, w: int) -> tuple[int, int]:
        return (h - 1) // self.stride + 1, (w - 1) // self.stride + 1

    def flops(self, h_out: int, w_out: int) -> int:
        return self.kernel * self.kernel * self.cin * self.cout * h_out * w_out

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.cout, self.cin, self.kernel, self.kernel)


# --- FLOP instrumentation ---------------------------------------------------

class FlopCounter:
    def __init__(self):
        self.flops = 0
        self.calls = 0


_active_counters: list[FlopCounter] = []
_counter_lock = threading.Lock()


@contextmanager
def count_flops():
    """Count conv FLOPs executed by :func:`conv2d` inside the ``with`` block."""
    counter = FlopCounter()
    with _counter_lock:
        _active_counters.append(counter)
    try:
        yield counter
    finally:
        with _counter_lock:
            _active_counters.remove(counter)


def _record(flops: int) -> None:
    if not _active_counters:
        return
    with _counter_lock:
        for counter in _active_counters:
            counter.flops += flops
            counter.calls += 1


# --- convolution ------------------------------------------------------------

def _check_image(x: np.ndarray, name: str = "input") -> None:
    if x.ndim != 3:
        raise ShapeError(f"{name}: expected (C, H, W), got {x.ndim} dims {x.shape}")


def _im2col(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    c, h, w = x.shape
    if k == 1 and stride == 1:
        return x.reshape(c, h * w)
    p = k // 2
    ho, wo = (h - 1) // stride + 1, (w - 1) // stride + 1
    if p:
        xp = np.zeros((c, h + 2 * p, w + 2 * p), dtype=x.dtype)
        xp[:, p:p + h, p:p + w] = x
    else:
        xp = x
    cols = np.empty((c, k, k, ho, wo), dtype=x.dtype)
    for dy in range(k):
        for dx in range(k):
            cols[:, dy, dx] = xp[:, dy:dy + stride * (ho - 1) + 1:stride,
                                 dx:dx + stride * (wo - 1) + 1:stride]
    return cols.reshape(c * k * k, ho * wo)


def _col2im(cols: np.ndarray, shape: tuple[int, int, int], k: int, stride: int) -> np.ndarray:
    c, h, w = shape
    if k == 1 and stride == 1:
        return cols.reshape(c, h, w)
    p = k // 2
    ho, wo = (h - 1) // stride + 1, (w - 1) // stride + 1
    cols = cols.reshape(c, k, k, ho, wo)
    out = np.zeros((c, h + 2 * p, w + 2 * p), dtype=cols.dtype)
    for dy in range(k):
        for dx in range(k):
            out[:, dy:dy + stride * (ho - 1) + 1:stride,
                dx:dx + stride * (wo - 1) + 1:stride] += cols[:, dy, dx]
    return out[:, p:p + h, p:p + w]


def _check_conv(x, spec: ConvSpec, weights, bias=None):
    _check_image(x)
    if x.shape[0] != spec.cin:
        raise ShapeError(f"input channels: expected {spec.cin}, got {x.shape[0]}")
    if weights.shape != spec.weight_shape:
        raise ShapeError(f"weights: expected shape {spec.weight_shape}, got {weights.shape}")
    if bias is not None and bias.shape != (spec.cout,):
        raise ShapeError(f"bias: expected shape ({spec.cout},), got {bias.shape}")


def conv2d(x: np.ndarray, spec: ConvSpec, weights: np.ndarray, bias: np.ndarray | None = None,
           *, return_cols: bool = False):
    """Same-padded 2-D convolution (cross-correlation, as in every DL framework).

    With ``return_cols=True`` also returns the unfolded input, which
    :func:`conv2d_grad` can reuse instead of unfolding again.
    """
    _check_conv(x, spec, weights, bias)
    ho, wo = spec.out_size(x.shape[1], x.shape[2])
    cols = _im2col(x, spec.kernel, spec.stride)
    y = weights.reshape(spec.cout, -1) @ cols
    if bias is not None:
        y += bias[:, None]
    _record(spec.flops(ho, wo))
    y = y.reshape(spec.cout, ho, wo)
    return (y, cols) if return_cols else y


def conv2d_grad(x: np.ndarray, spec: ConvSpec, weights: np.ndarray, upstream: np.ndarray,
                cols: np.ndarray | None = None, *, need_input_grad: bool = True):
    """Gradients of :func:`conv2d` w.r.t. input, weights and bias."""
    _check_conv(x, spec, weights)
    ho, wo = spec.out_size(x.shape[1], x.shape[2])
    if upstream.shape != (spec.cout, ho, wo):
        raise ShapeError(f"upstream gradient: expected {(spec.cout, ho, wo)}, got {upstream.shape}")
    if cols is None:
        cols = _im2col(x, spec.kernel, spec.stride)
    g = upstream.reshape(spec.cout, -1)
    w2 = weights.reshape(spec.cout, -1)
    grad_w = (cols @ g.T).T.reshape(spec.weight_shape)
    grad_b = g.sum(axis=1)
    grad_x = None
    if need_input_grad:
        if spec.stride == 1 and spec.kernel == 3:
            # correlation of the upstream gradient with the flipped kernel; unfolding the
            # upstream is cheaper than scattering columns back with _col2im
            flipped = weights[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(spec.cin, -1)
            grad_x = (flipped @ _im2col(upstream, 3, 1)).reshape(x.shape)
        else:
            grad_x = _col2im(w2.T @ g, x.shape, spec.kernel, spec.stride)
    return grad_x, grad_w, grad_b


# --- bilinear sampling ------------------------------------------------------

def _sample_coords(flow: np.ndarray, h: int, w: int):
    xs = np.arange(w, dtype=flow.dtype)[None, :] + flow[0]
    ys = np.arange(h, dtype=flow.dtype)[:, None] + flow[1]
    in_x = (xs >= 0) & (xs <= w - 1)
    in_y = (ys >= 0) & (ys <= h - 1)
    sx = np.clip(xs, 0, w - 1)
    sy = np.clip(ys, 0, h - 1)
    x0 = np.floor(sx).astype(np.intp)
    y0 = np.floor(sy).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    return sx - x0, sy - y0, x0, x1, y0, y1, in_x, in_y


def _check_flow(x: np.ndarray, flow: np.ndarray) -> None:
    _check_image(x)
    if flow.ndim != 3 or flow.shape[0] != 2:
        raise ShapeError(f"flow channels: expected 2, got shape {flow.shape}")
    if flow.shape[1:] != x.shape[1:]:
        raise ShapeError(f"flow spatial size {flow.shape[1:]} != input spatial size {x.shape[1:]}")
    if not np.isfinite(flow).all():
        raise NonFiniteError("flow contains non-finite values")


def bilinear_sample(x: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """Backward-warp ``x``: ``out[:, y, x] = x[:, y + dy, x + dx]`` with bilinear weights.

    Flow is in pixels, channel 0 horizontal, channel 1 vertical. Sample positions
    outside the image are clamped to the border.
    """
    _check_flow(x, flow)
    c, h, w = x.shape
    wx, wy, x0, x1, y0, y1, _, _ = _sample_coords(flow, h, w)
    flat = x.reshape(c, h * w)
    v00 = flat[:, y0 * w + x0]
    v01 = flat[:, y0 * w + x1]
    v10 = flat[:, y1 * w + x0]
    v11 = flat[:, y1 * w + x1]
    top = v00 + (v01 - v00) * wx
    bot = v10 + (v11 - v10) * wx
    return (top + (bot - top) * wy).reshape(c, h, w)


def bilinear_sample_grad(x: np.ndarray, flow: np.ndarray, upstream: np.ndarray,
                         *, need_input_grad: bool = True):
    """Gradients of :func:`bilinear_sample` w.r.t. the input and the flow.

    The flow gradient is one-sided at integer sample positions and zero where
    the position was clamped.
    """
    _check_flow(x, flow)
    if upstream.shape != x.shape:
        raise ShapeError(f"upstream gradient: expected {x.shape}, got {upstream.shape}")
    c, h, w = x.shape
    wx, wy, x0, x1, y0, y1, in_x, in_y = _sample_coords(flow, h, w)
    flat = x.reshape(c, h * w)
    i00, i01, i10, i11 = y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1
    v00, v01, v10, v11 = flat[:, i00], flat[:, i01], flat[:, i10], flat[:, i11]
    g = upstream.reshape(c, h, w)

    dx = ((v01 - v00) * (1 - wy) + (v11 - v10) * wy) * g
    dy = ((v10 - v00) * (1 - wx) + (v11 - v01) * wx) * g
    grad_flow = np.stack([dx.sum(axis=0) * in_x, dy.sum(axis=0) * in_y]).astype(x.dtype, copy=False)

    grad_x = None
    if need_input_grad:
        n = h * w
        offsets = (np.arange(c) * n)[:, None, None]
        idx = np.concatenate([(i00 + offsets).ravel(), (i01 + offsets).ravel(),
                              (i10 + offsets).ravel(), (i11 + offsets).ravel()])
        wts = np.concatenate([(g * ((1 - wx) * (1 - wy))).ravel(), (g * (wx * (1 - wy))).ravel(),
                              (g * ((1 - wx) * wy)).ravel(), (g * (wx * wy)).ravel()])
        grad_x = np.bincount(idx, weights=wts, minlength=c * n).astype(x.dtype).reshape(c, h, w)
    return grad_x, grad_flow


# --- resizing ---------------------------------------------------------------

def _as_factor(factor) -> Fraction:
    f = Fraction(factor).limit_denominator(16)
    if f not in (Fraction(1, 2), Fraction(2)):
        raise ValueError(f"unsupported resize factor {factor}; only 1/2 and 2 are supported")
    return f


@lru_cache(maxsize=64)
def _resize_matrix(n: int, factor: Fraction, dtype_name: str) -> np.ndarray:
    # align_corners=False: source = (i + 0.5) / factor - 0.5, clamped at 0.
    if factor == 2:
        m = np.zeros((2 * n, n))
        for i in range(2 * n):
            src = max((i + 0.5) / 2 - 0.5, 0.0)
            i0 = int(np.floor(src))
            i1 = min(i0 + 1, n - 1)
            t = src - i0
            m[i, i0] += 1 - t
            m[i, i1] += t
    else:
        if n % 2:
            raise ShapeError(f"downsampling needs an even extent, got {n}")
        m = np.zeros((n // 2, n))
        for i in range(n // 2):
            m[i, 2 * i] = m[i, 2 * i + 1] = 0.5
    m = m.astype(dtype_name)
    m.setflags(write=False)
    return m


def resize_bilinear(x: np.ndarray, factor) -> np.ndarray:
    """Bilinear resize by 1/2 or 2 (align-corners-false convention)."""
    _check_image(x)
    f = _as_factor(factor)
    mh = _resize_matrix(x.shape[1], f, x.dtype.name)
    mw = _resize_matrix(x.shape[2], f, x.dtype.name)
    return mh @ (x @ mw.T)


def resize_bilinear_grad(upstream: np.ndarray, factor, in_shape) -> np.ndarray:
    f = _as_factor(factor)
    c, h, w = in_shape
    mh = _resize_matrix(h, f, upstream.dtype.name)
    mw = _resize_matrix(w, f, upstream.dtype.name)
    if upstream.shape != (c, mh.shape[0], mw.shape[0]):
        raise ShapeError(f"upstream gradient: expected {(c, mh.shape[0], mw.shape[0])}, got {upstream.shape}")
    return (mh.T @ upstream) @ mw


# --- pointwise and channel ops ---------------------------------------------

def concat_channels(parts) -> np.ndarray:
    parts = list(parts)
    sizes = {p.shape[1:] for p in parts}
    if len(sizes) != 1:
        raise ShapeError(f"concat: spatial sizes differ {sorted(sizes)}")
    return np.concatenate(parts, axis=0)


def split_channels(x: np.ndarray, sizes) -> list[np.ndarray]:
    sizes = list(sizes)
    if sum(sizes) != x.shape[0]:
        raise ShapeError(f"split: sizes {sizes} do not tile {x.shape[0]} channels")
    return np.split(x, np.cumsum(sizes)[:-1], axis=0)


def prelu(x: np.ndarray, slope: np.ndarray) -> np.ndarray:
    """``x`` where positive, ``slope * x`` otherwise; one slope per channel."""
    if slope.shape != (x.shape[0],):
        raise ShapeError(f"prelu slope: expected ({x.shape[0]},), got {slope.shape}")
    return np.where(x > 0, x, slope[:, None, None] * x)


def prelu_grad(x: np.ndarray, slope: np.ndarray, upstream: np.ndarray):
    neg = x <= 0
    grad_x = np.where(neg, slope[:, None, None] * upstream, upstream)
    grad_slope = (upstream * x * neg).sum(axis=(1, 2))
    return grad_x, grad_slope


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (np.tanh(0.5 * x) + 1)


def blend(a: np.ndarray, b: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """``mask * a + (1 - mask) * b`` with a single-channel mask broadcast over channels."""
    if a.shape != b.shape:
        raise ShapeError(f"blend operands differ: {a.shape} vs {b.shape}")
    if mask.shape != (1,) + a.shape[1:]:
        raise ShapeError(f"mask: expected {(1,) + a.shape[1:]}, got {mask.shape}")
    return mask * a + (1 - mask) * b

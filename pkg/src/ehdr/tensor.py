"""Dense float32 tensor primitives.

Tensors are plain ``numpy.ndarray`` objects of dtype float32, laid out
N x C x H x W for image-like data and (rows, cols) for matrices. Every
function here is pure: inputs are never mutated and identical inputs give
bit-identical outputs.

``conv2d`` is the fast path used by the network; ``conv2d_oracle`` is a
direct-summation reference kept deliberately naive so it can be used to
check the fast path.
"""

from __future__ import annotations

import contextlib
import contextvars
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible with an operation."""


# ---------------------------------------------------------------------------
# multiply-accumulate instrumentation


@dataclass
class OpCounter:
    macs: int = 0


_active_counter: contextvars.ContextVar[OpCounter | None] = contextvars.ContextVar(
    "ehdr_op_counter", default=None
)


@contextlib.contextmanager
def count_macs():
    """Count scalar multiply-accumulates executed by matmul/conv primitives.

    >>> with count_macs() as c:
    ...     _ = matmul(np.ones((2, 3), np.float32), np.ones((3, 4), np.float32))
    >>> c.macs
    24
    """
    counter = OpCounter()
    token = _active_counter.set(counter)
    try:
        yield counter
    finally:
        _active_counter.reset(token)


def _tally(n: int) -> None:
    counter = _active_counter.get()
    if counter is not None:
        counter.macs += int(n)


# ---------------------------------------------------------------------------
# convolution


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        a, b = v
        return int(a), int(b)
    return int(v), int(v)


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of a 2-D convolution. Padding is zero-fill."""

    out_channels: int
    in_channels: int
    kernel: tuple[int, int] = (3, 3)
    stride: tuple[int, int] = (1, 1)
    dilation: tuple[int, int] = (1, 1)
    groups: int = 1
    padding: tuple[int, int] = (0, 0)

    def __post_init__(self):
        for name in ("kernel", "stride", "dilation", "padding"):
            object.__setattr__(self, name, _pair(getattr(self, name)))
        if self.out_channels < 1 or self.in_channels < 1 or self.groups < 1:
            raise ShapeError(f"channel counts and groups must be >= 1: {self}")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ShapeError(
                f"groups={self.groups} must divide in_channels={self.in_channels} "
                f"and out_channels={self.out_channels}"
            )
        if min(self.kernel + self.stride + self.dilation) < 1:
            raise ShapeError(f"kernel, stride and dilation must be >= 1: {self}")
        if min(self.padding) < 0:
            raise ShapeError(f"padding must be >= 0: {self}")

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels // self.groups) + self.kernel

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        (kh, kw), (sh, sw) = self.kernel, self.stride
        (dh, dw), (ph, pw) = self.dilation, self.padding
        oh = (h + 2 * ph - dh * (kh - 1) - 1) // sh + 1
        ow = (w + 2 * pw - dw * (kw - 1) - 1) // sw + 1
        return oh, ow


def _check_conv_args(x, weights, bias, spec):
    if x.ndim != 4:
        raise ShapeError(f"conv input must be N x C x H x W, got shape {x.shape}")
    if x.shape[1] != spec.in_channels:
        raise ShapeError(
            f"input has {x.shape[1]} channels, spec expects {spec.in_channels}"
        )
    if tuple(weights.shape) != spec.weight_shape:
        raise ShapeError(
            f"weights shaped {tuple(weights.shape)}, spec expects {spec.weight_shape}"
        )
    if bias is not None and tuple(bias.shape) != (spec.out_channels,):
        raise ShapeError(f"bias shaped {tuple(bias.shape)}, expected ({spec.out_channels},)")
    oh, ow = spec.output_size(x.shape[2], x.shape[3])
    if oh < 1 or ow < 1:
        raise ShapeError(f"input {x.shape[2:]} too small for {spec}")
    return oh, ow


def conv2d(x: np.ndarray, weights: np.ndarray, bias: np.ndarray | None, spec: ConvSpec) -> np.ndarray:
    """Grouped, dilated, strided 2-D convolution (cross-correlation).

    Accumulates one kernel tap at a time so no im2col buffer is allocated.
    """
    oh, ow = _check_conv_args(x, weights, bias, spec)
    n, c, _, _ = x.shape
    g = spec.groups
    cg, og = c // g, spec.out_channels // g
    (kh, kw), (sh, sw) = spec.kernel, spec.stride
    (dh, dw), (ph, pw) = spec.dilation, spec.padding

    xp = np.pad(np.asarray(x, DTYPE), ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    xg = xp.reshape(n, g, cg, xp.shape[2], xp.shape[3])
    wg = np.asarray(weights, DTYPE).reshape(g, og, cg, kh, kw)
    out = np.zeros((n, g, og, oh * ow), DTYPE)
    for i in range(kh):
        r0 = i * dh
        for j in range(kw):
            c0 = j * dw
            tap = xg[:, :, :, r0 : r0 + sh * (oh - 1) + 1 : sh, c0 : c0 + sw * (ow - 1) + 1 : sw]
            tap = tap.reshape(n, g, cg, oh * ow)
            if cg == 1:
                out += wg[:, :, 0, i, j, None] * tap
            else:
                out += np.matmul(wg[:, :, :, i, j], tap)
    out = out.reshape(n, spec.out_channels, oh, ow)
    if bias is not None:
        out += np.asarray(bias, DTYPE)[None, :, None, None]
    _tally(n * oh * ow * spec.out_channels * cg * kh * kw)
    return out


def conv2d_oracle(x: np.ndarray, weights: np.ndarray, bias: np.ndarray | None, spec: ConvSpec) -> np.ndarray:
    """Reference convolution by direct summation over every kernel tap.

    Pure Python loops with float64 accumulation. Each executed multiply is
    counted when a ``count_macs`` context is active, including taps that land
    in the zero padding.
    """
    oh, ow = _check_conv_args(x, weights, bias, spec)
    n, c, h, w = x.shape
    g = spec.groups
    cg, og = c // g, spec.out_channels // g
    (kh, kw), (sh, sw) = spec.kernel, spec.stride
    (dh, dw), (ph, pw) = spec.dilation, spec.padding

    # explicit zero-padded copy so every tap is a real multiply
    hp, wp = h + 2 * ph, w + 2 * pw
    src = np.asarray(x, np.float64).tolist()
    padded = [[[[0.0] * wp for _ in range(hp)] for _ in range(c)] for _ in range(n)]
    for b in range(n):
        for ch in range(c):
            for y in range(h):
                padded[b][ch][y + ph][pw : pw + w] = src[b][ch][y]
    wt = np.asarray(weights, np.float64).tolist()
    bs = [0.0] * spec.out_channels if bias is None else np.asarray(bias, np.float64).tolist()

    out = np.zeros((n, spec.out_channels, oh, ow), np.float64)
    multiplies = 0
    for b in range(n):
        for o in range(spec.out_channels):
            grp = o // og
            for y in range(oh):
                for xo in range(ow):
                    acc = 0.0
                    for ci in range(cg):
                        plane = padded[b][grp * cg + ci]
                        kern = wt[o][ci]
                        for ky in range(kh):
                            row = plane[y * sh + ky * dh]
                            for kx in range(kw):
                                acc += kern[ky][kx] * row[xo * sw + kx * dw]
                                multiplies += 1
                    out[b, o, y, xo] = acc + bs[o]
    _tally(multiplies)
    return out.astype(DTYPE)


# ---------------------------------------------------------------------------
# dense algebra and nonlinearities


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul takes 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    _tally(a.shape[0] * a.shape[1] * b.shape[1])
    return np.matmul(np.asarray(a, DTYPE), np.asarray(b, DTYPE))


def softmax_rows(x: np.ndarray) -> np.ndarray:
    if x.ndim != 2:
        raise ShapeError(f"softmax_rows takes a 2-D array, got {x.shape}")
    e = np.array(x, DTYPE)
    peak = e.max(axis=1, keepdims=True)
    # a NaN or +inf anywhere in a row surfaces in its max
    if not np.all(np.isfinite(peak)):
        raise FloatingPointError("softmax_rows received non-finite input")
    e -= peak
    np.exp(e, out=e)
    e /= e.sum(axis=1, keepdims=True)
    return e


_SQRT_HALF = DTYPE(1.0 / math.sqrt(2.0))


def gelu(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, DTYPE)
    return x * DTYPE(0.5) * (DTYPE(1.0) + erf(x * _SQRT_HALF))


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, DTYPE)
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, DTYPE(1.0) / (DTYPE(1.0) + e), e / (DTYPE(1.0) + e)).astype(DTYPE)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(np.asarray(x, DTYPE), DTYPE(0.0))


ACTIVATIONS = {
    "gelu": gelu,
    "tanh": lambda x: np.tanh(np.asarray(x, DTYPE)),
    "sigmoid": sigmoid,
    "relu": relu,
}


def activation(x: np.ndarray, kind: str) -> np.ndarray:
    try:
        fn = ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; expected one of {sorted(ACTIVATIONS)}") from None
    return fn(x)


# ---------------------------------------------------------------------------
# resampling, padding, layout


def _bilinear_taps(n_in: int, n_out: int):
    # half-pixel centres, edge-clamped
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = (src - i0).astype(DTYPE)
    return i0, i1, frac


def resize_bilinear(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"output size must be >= 1, got {out_h}x{out_w}")
    x = np.asarray(x, DTYPE)
    h, w = x.shape[-2:]
    r0, r1, fy = _bilinear_taps(h, out_h)
    c0, c1, fx = _bilinear_taps(w, out_w)
    rows = x[..., r0, :] * (DTYPE(1) - fy)[:, None] + x[..., r1, :] * fy[:, None]
    return rows[..., c0] * (DTYPE(1) - fx) + rows[..., c1] * fx


def pad_reflect(x: np.ndarray, ph, pw) -> np.ndarray:
    """Mirror-pad the last two axes without repeating the edge sample.

    ``ph``/``pw`` are either a symmetric amount or a ``(before, after)`` pair.
    """
    x = np.asarray(x, DTYPE)
    (top, bottom), (left, right) = _pair(ph), _pair(pw)
    h, w = x.shape[-2:]
    if min(top, bottom, left, right) < 0:
        raise ShapeError("pad amounts must be non-negative")
    if max(top, bottom) >= h or max(left, right) >= w:
        raise ShapeError(f"reflect pad ({ph}, {pw}) too large for extent {h}x{w}")
    widths = [(0, 0)] * (x.ndim - 2) + [(top, bottom), (left, right)]
    return np.pad(x, widths, mode="reflect")


def crop(x: np.ndarray, top: int, left: int, height: int, width: int) -> np.ndarray:
    h, w = x.shape[-2:]
    if top < 0 or left < 0 or top + height > h or left + width > w:
        raise ShapeError(f"crop window ({top},{left},{height},{width}) outside {h}x{w}")
    return x[..., top : top + height, left : left + width]


def concat_channels(*maps: np.ndarray) -> np.ndarray:
    if not maps:
        raise ShapeError("concat_channels needs at least one tensor")
    n, _, h, w = maps[0].shape
    for m in maps[1:]:
        if m.ndim != 4 or (m.shape[0], m.shape[2], m.shape[3]) != (n, h, w):
            raise ShapeError(f"cannot concat {maps[0].shape} with {m.shape}")
    return np.concatenate(maps, axis=1)


def _same_shape(a, b, op):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes differ {a.shape} vs {b.shape}")


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _same_shape(a, b, "add")
    return a + b


def sub(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _same_shape(a, b, "sub")
    return a - b


def mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _same_shape(a, b, "mul")
    return a * b


def grid_to_tokens(x: np.ndarray) -> np.ndarray:
    """1 x C x h x w map -> (h*w) x C token matrix, row-major over the grid."""
    if x.ndim != 4 or x.shape[0] != 1:
        raise ShapeError(f"expected a single 1 x C x h x w map, got {x.shape}")
    c = x.shape[1]
    return np.ascontiguousarray(x.reshape(c, -1).T)


def tokens_to_grid(tokens: np.ndarray, h: int, w: int) -> np.ndarray:
    if tokens.ndim != 2 or tokens.shape[0] != h * w:
        raise ShapeError(f"{tokens.shape[0] if tokens.ndim == 2 else tokens.shape} tokens do not fill a {h}x{w} grid")
    return np.ascontiguousarray(tokens.T).reshape(1, tokens.shape[1], h, w)

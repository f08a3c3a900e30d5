"""Network building blocks: DyT, SE, IRE, E-MSDC, MSA, LCE, the context-aware
transformer block, and intersection-aware fusion (IAAF).

Every block is a pure function of ``(input, params)``. Parameter containers
are plain dataclasses of float32 arrays; conv weights are shaped
``(out, in/groups, kh, kw)`` and linear weights ``(out, in)``.

Token tensors are ``(n_tokens, C)`` matrices laid out row-major over an
``h x w`` grid; feature maps are ``1 x C x H x W``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import (
    DTYPE,
    ConvSpec,
    ShapeError,
    concat_channels,
    conv2d,
    gelu,
    grid_to_tokens,
    matmul,
    relu,
    sigmoid,
    softmax_rows,
    tokens_to_grid,
)

EMSDC_DILATIONS = (1, 3, 5)
EMSDC_GROUPS = 4


def linear(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """Row-wise affine map ``x @ weight.T + bias`` over a 2-D matrix."""
    out = matmul(x, np.ascontiguousarray(weight.T))
    if bias is not None:
        out = out + bias
    return out


def conv_spec_for(weight: np.ndarray, *, stride=1, dilation=1, groups=1, padding=None) -> ConvSpec:
    """Build the ConvSpec implied by a weight array (``same`` padding by default)."""
    o, ig, kh, kw = weight.shape
    if padding is None:
        padding = (dilation * (kh - 1) // 2, dilation * (kw - 1) // 2)
    return ConvSpec(o, ig * groups, (kh, kw), stride, dilation, groups, padding)


def conv(x, weight, bias, **kw):
    return conv2d(x, weight, bias, conv_spec_for(weight, **kw))


# ---------------------------------------------------------------------------
# Dynamic Tanh


@dataclass
class DyTParams:
    alpha: np.ndarray  # shape (1,)
    gamma: np.ndarray
    beta: np.ndarray


def dyt_forward(x: np.ndarray, p: DyTParams) -> np.ndarray:
    """``gamma_c * tanh(alpha * x) + beta_c`` with no cross-element statistics.

    The channel axis is the last axis for token matrices and axis 1 for
    feature maps.
    """
    x = np.asarray(x, DTYPE)
    axis = -1 if x.ndim == 2 else 1
    c = x.shape[axis]
    if p.gamma.shape != (c,) or p.beta.shape != (c,):
        raise ShapeError(f"DyT expects {c} channels, got gamma {p.gamma.shape}, beta {p.beta.shape}")
    shape = [1] * x.ndim
    shape[axis] = c
    alpha = DTYPE(np.asarray(p.alpha).reshape(-1)[0])
    return p.gamma.reshape(shape) * np.tanh(alpha * x) + p.beta.reshape(shape)


# ---------------------------------------------------------------------------
# Squeeze-and-excitation


@dataclass
class SEParams:
    reduce_w: np.ndarray  # (C/r, C)
    reduce_b: np.ndarray
    expand_w: np.ndarray  # (C, C/r)
    expand_b: np.ndarray

    @property
    def channels(self) -> int:
        return self.reduce_w.shape[1]

    @property
    def reduction(self) -> int:
        return self.channels // self.reduce_w.shape[0]


def se_gate(x: np.ndarray, p: SEParams) -> np.ndarray:
    """Per-channel gate in (0, 1) for an ``N x C x H x W`` map, shaped ``N x C``."""
    if x.ndim != 4 or x.shape[1] != p.channels:
        raise ShapeError(f"SE over {p.channels} channels cannot take input {x.shape}")
    if p.expand_w.shape != (p.channels, p.reduce_w.shape[0]):
        raise ShapeError("SE reduce/expand weights disagree")
    pooled = x.mean(axis=(2, 3), dtype=DTYPE)
    hidden = relu(linear(pooled, p.reduce_w, p.reduce_b))
    return sigmoid(linear(hidden, p.expand_w, p.expand_b))


def se_forward(x: np.ndarray, p: SEParams) -> np.ndarray:
    return x * se_gate(x, p)[:, :, None, None]


# ---------------------------------------------------------------------------
# Inverted residual embedding


@dataclass
class IREParams:
    expand_w: np.ndarray  # (E, Cin, 1, 1)
    expand_b: np.ndarray
    dw_w: np.ndarray  # (E, 1, 3, 3)
    dw_b: np.ndarray
    se: SEParams
    project_w: np.ndarray  # (D, E, 1, 1)
    project_b: np.ndarray
    stride: int = 2

    @property
    def expansion_ratio(self) -> int:
        return self.expand_w.shape[0] // self.expand_w.shape[1]


def ire_forward(x: np.ndarray, p: IREParams) -> np.ndarray:
    """1x1 expand -> strided 3x3 depthwise -> SE -> 1x1 project.

    Output spatial size is ``ceil(H / stride) x ceil(W / stride)``.
    """
    if x.ndim != 4 or min(x.shape[2:]) < p.stride:
        raise ShapeError(f"IRE with stride {p.stride} cannot take input {x.shape}")
    e = p.expand_w.shape[0]
    if p.dw_w.shape != (e, 1, 3, 3):
        raise ShapeError(f"depthwise weights {p.dw_w.shape} do not match {e} expanded channels")
    h = conv(x, p.expand_w, p.expand_b)
    h = conv(h, p.dw_w, p.dw_b, stride=p.stride, groups=e, padding=1)
    h = se_forward(h, p.se)
    return conv(h, p.project_w, p.project_b)


# ---------------------------------------------------------------------------
# Enhanced multi-scale dilated convolution


@dataclass
class RPReLUParams:
    shift: np.ndarray
    slope: np.ndarray
    bias: np.ndarray


def rprelu(x: np.ndarray, p: RPReLUParams) -> np.ndarray:
    """PReLU with learnable per-channel input and output shifts."""
    s = (1, -1, 1, 1)
    t = x - p.shift.reshape(s)
    return np.where(t > 0, t, p.slope.reshape(s) * t) + p.bias.reshape(s)


@dataclass
class EMSDCParams:
    branch_w: list  # three (C, C/4, 3, 3) arrays, dilations 1/3/5
    branch_b: list
    merge_w: np.ndarray  # (C, C, 1, 1)
    merge_b: np.ndarray
    activation: str = "gelu"
    rprelu: list | None = None


def emsdc_increment(x: np.ndarray, p: EMSDCParams) -> np.ndarray:
    """The convolutional part of E-MSDC, without the identity term."""
    c = x.shape[1]
    if c % EMSDC_GROUPS:
        raise ShapeError(f"E-MSDC needs channels divisible by {EMSDC_GROUPS}, got {c}")
    if len(p.branch_w) != len(EMSDC_DILATIONS):
        raise ShapeError(f"E-MSDC has exactly {len(EMSDC_DILATIONS)} branches")
    acc = None
    for i, d in enumerate(EMSDC_DILATIONS):
        b = conv(x, p.branch_w[i], p.branch_b[i], dilation=d, groups=EMSDC_GROUPS, padding=d)
        if p.activation == "gelu":
            b = gelu(b)
        elif p.activation == "rprelu":
            b = rprelu(b, p.rprelu[i])
        else:
            raise ValueError(f"unknown E-MSDC activation {p.activation!r}")
        acc = b if acc is None else acc + b
    return conv(acc, p.merge_w, p.merge_b)


def emsdc_forward(x: np.ndarray, p: EMSDCParams) -> np.ndarray:
    return x + emsdc_increment(x, p)


# ---------------------------------------------------------------------------
# attention and local context


@dataclass
class AttentionParams:
    qkv_w: np.ndarray  # (3C, C)
    qkv_b: np.ndarray
    out_w: np.ndarray  # (C, C)
    out_b: np.ndarray
    heads: int

    @property
    def dim(self) -> int:
        return self.out_w.shape[0]


def msa_forward(tokens: np.ndarray, p: AttentionParams) -> np.ndarray:
    """Global multi-head self-attention with scale ``1/sqrt(C/heads)``."""
    if tokens.ndim != 2 or tokens.shape[1] != p.dim:
        raise ShapeError(f"attention of dim {p.dim} cannot take tokens {tokens.shape}")
    c = p.dim
    if c % p.heads:
        raise ShapeError(f"{p.heads} heads do not divide dim {c}")
    d = c // p.heads
    qkv = linear(tokens, p.qkv_w, p.qkv_b)
    q, k, v = qkv[:, :c], qkv[:, c : 2 * c], qkv[:, 2 * c :]
    scale = DTYPE(1.0 / math.sqrt(d))
    heads = []
    for h in range(p.heads):
        sl = slice(h * d, (h + 1) * d)
        scores = matmul(q[:, sl] * scale, np.ascontiguousarray(k[:, sl].T))
        heads.append(matmul(softmax_rows(scores), np.ascontiguousarray(v[:, sl])))
    return linear(np.concatenate(heads, axis=1), p.out_w, p.out_b)


@dataclass
class LCEParams:
    dw_w: np.ndarray  # (C, 1, 3, 3)
    dw_b: np.ndarray
    pw_w: np.ndarray  # (C, C, 1, 1)
    pw_b: np.ndarray
    se: SEParams


def lce_forward(tokens: np.ndarray, grid: tuple[int, int], p: LCEParams) -> np.ndarray:
    """Local context: depthwise 3x3 -> GELU -> pointwise 1x1 -> SE gate, on the token grid."""
    h, w = grid
    x = tokens_to_grid(tokens, h, w)
    c = x.shape[1]
    x = conv(x, p.dw_w, p.dw_b, groups=c, padding=1)
    x = conv(gelu(x), p.pw_w, p.pw_b)
    return grid_to_tokens(se_forward(x, p.se))


@dataclass
class MLPParams:
    fc1_w: np.ndarray  # (mC, C)
    fc1_b: np.ndarray
    fc2_w: np.ndarray  # (C, mC)
    fc2_b: np.ndarray


def mlp_forward(tokens: np.ndarray, p: MLPParams) -> np.ndarray:
    return linear(gelu(linear(tokens, p.fc1_w, p.fc1_b)), p.fc2_w, p.fc2_b)


@dataclass
class CAViTBlockParams:
    dyt1: DyTParams
    attn: AttentionParams
    lce: LCEParams
    dyt2: DyTParams
    mlp: MLPParams
    emsdc: EMSDCParams
    # "input": E-MSDC reads the block input; "z": it reads the post-MLP tokens
    emsdc_attach: str = "input"


def cavit_block_forward(tokens: np.ndarray, grid: tuple[int, int], p: CAViTBlockParams) -> np.ndarray:
    h, w = grid
    if tokens.ndim != 2 or tokens.shape[0] != h * w:
        raise ShapeError(f"{tokens.shape} tokens do not fill a {h}x{w} grid")
    y = tokens + msa_forward(dyt_forward(tokens, p.dyt1), p.attn) + lce_forward(tokens, grid, p.lce)
    z = y + mlp_forward(dyt_forward(y, p.dyt2), p.mlp)
    if p.emsdc_attach == "input":
        src = tokens
    elif p.emsdc_attach == "z":
        src = z
    else:
        raise ValueError(f"unknown E-MSDC attachment {p.emsdc_attach!r}")
    return z + grid_to_tokens(emsdc_increment(tokens_to_grid(src, h, w), p.emsdc))


# ---------------------------------------------------------------------------
# intersection-aware fusion


@dataclass
class IAAFParams:
    pre_w: np.ndarray  # (C, 2C, 3, 3)
    pre_b: np.ndarray
    res0_w: np.ndarray  # (C, C, 3, 3)
    res0_b: np.ndarray
    res1_w: np.ndarray
    res1_b: np.ndarray
    post_w: np.ndarray
    post_b: np.ndarray


def iaaf_intersection(fa: np.ndarray, fb: np.ndarray, p: IAAFParams) -> np.ndarray:
    """Estimate the shared component of two feature maps with a small CNN."""
    if fa.shape != fb.shape:
        raise ShapeError(f"IAAF inputs differ in shape: {fa.shape} vs {fb.shape}")
    h = conv(concat_channels(fa, fb), p.pre_w, p.pre_b)
    h = h + conv(gelu(conv(h, p.res0_w, p.res0_b)), p.res1_w, p.res1_b)
    return conv(h, p.post_w, p.post_b)


def iaaf_fuse(f1: np.ndarray, f2: np.ndarray, p: IAAFParams) -> np.ndarray:
    """``f1 + f2 - intersection(f1, f2)``."""
    if f1.shape != f2.shape:
        raise ShapeError(f"IAAF inputs differ in shape: {f1.shape} vs {f2.shape}")
    return f1 + f2 - iaaf_intersection(f1, f2, p)

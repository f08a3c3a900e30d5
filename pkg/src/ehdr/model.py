"""Full exposure-fusion network: configuration, deterministic initialisation,
and the forward pass from an exposure stack to an RGB image in [0, 1].

Pipeline (``H x W`` input, stride ``s``, base width ``C``, embedding ``D``)::

    3 x RGB -> YCbCr -> per-exposure 3x3 stem (3 -> C)
    F1 = over, F2 = normal, F3 = under
    fused1 = IAAF(F1, F2), fused3 = IAAF(F3, F2)
    main: [fused1, F1, F2, F3, fused3] (5C)   lite: [fused1, F2, fused3] (3C)
    IRE -> D tokens on an (H/s) x (W/s) grid -> num_blocks transformer blocks
    bilinear x s -> 3x3 conv (D -> C) + F2 -> GELU -> 3x3 conv (C -> 3) -> sigmoid
"""

from __future__ import annotations

import time
import zlib
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields

import numpy as np

from . import blocks as B
from .colorspace import coeffs_for, rgb_to_ycbcr
from .tensor import (
    DTYPE,
    ShapeError,
    concat_channels,
    crop,
    gelu,
    grid_to_tokens,
    pad_reflect,
    resize_bilinear,
    sigmoid,
    tokens_to_grid,
)

EXPOSURES = ("over", "normal", "under")


class ConfigError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class ModelConfig:
    variant: str = "main"
    base_channels: int = 16
    embed_dim: int = 32
    num_blocks: int = 3
    heads: int = 4
    ire_stride: int = 2
    mlp_ratio: int = 2
    emsdc_activation: str = "gelu"
    color_mode: str = "paper"
    ire_expansion: int = 6
    se_reduction: int = 4
    emsdc_attach: str = "input"
    dyt_alpha: float = 0.5

    def __post_init__(self):
        self.validate()

    def validate(self):
        checks = [
            (self.variant in ("main", "lite"), f"variant must be main or lite, got {self.variant!r}"),
            (self.emsdc_activation in ("gelu", "rprelu"), f"bad emsdc_activation {self.emsdc_activation!r}"),
            (self.color_mode in ("paper", "bt601"), f"bad color_mode {self.color_mode!r}"),
            (self.emsdc_attach in ("input", "z"), f"bad emsdc_attach {self.emsdc_attach!r}"),
            (self.ire_stride in (1, 2, 4), f"ire_stride must be 1, 2 or 4, got {self.ire_stride}"),
            (self.num_blocks >= 1, "num_blocks must be >= 1"),
            (min(self.base_channels, self.embed_dim, self.heads, self.mlp_ratio, self.ire_expansion, self.se_reduction) >= 1,
             "widths, heads and ratios must be >= 1"),
            (self.embed_dim % self.heads == 0, f"heads={self.heads} must divide embed_dim={self.embed_dim}"),
            (self.embed_dim % B.EMSDC_GROUPS == 0, f"embed_dim must be divisible by {B.EMSDC_GROUPS}"),
            (self.embed_dim % self.se_reduction == 0, "se_reduction must divide embed_dim"),
            (self.expanded_channels % self.se_reduction == 0, "se_reduction must divide the IRE expanded width"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    @property
    def fusion_channels(self) -> int:
        """Channel count entering the embedding: 5C (main) or 3C (lite)."""
        return (5 if self.variant == "main" else 3) * self.base_channels

    @property
    def expanded_channels(self) -> int:
        return self.fusion_channels * self.ire_expansion

    def replace(self, **changes) -> "ModelConfig":
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(changes)
        return ModelConfig(**values)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))


def parse_config(text: str) -> ModelConfig:
    """Parse flat ``key = value`` lines; ``#`` starts a comment. Unknown keys are errors."""
    types = {f.name: type(f.default) for f in fields(ModelConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        try:
            values[key] = types[key](value)
        except ValueError:
            raise ConfigError(f"line {lineno}: {key} expects {types[key].__name__}, got {value!r}") from None
    try:
        return ModelConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path) -> ModelConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


@dataclass
class ExposureStack:
    """Three RGB images (3 x H x W, values in [0, 1]) at increasing exposure."""

    under: np.ndarray
    normal: np.ndarray
    over: np.ndarray
    ev: tuple = (-2.0, 0.0, 2.0)

    def __post_init__(self):
        imgs = {k: np.asarray(getattr(self, k), DTYPE) for k in ("under", "normal", "over")}
        shapes = {k: v.shape for k, v in imgs.items()}
        for k, s in shapes.items():
            if len(s) != 3 or s[0] != 3:
                raise ShapeError(f"{k} image must be 3 x H x W, got {s}")
        if len(set(shapes.values())) != 1:
            raise ShapeError("exposure shapes differ: " + ", ".join(f"{k} {s}" for k, s in shapes.items()))
        for k, v in imgs.items():
            if not np.all(np.isfinite(v)) or v.min() < 0 or v.max() > 1:
                raise ValueError(f"{k} image must hold finite values in [0, 1]")
            setattr(self, k, v)

    @property
    def shape(self) -> tuple[int, int]:
        return self.normal.shape[1:]


# ---------------------------------------------------------------------------
# parameter layout and initialisation


def _conv(name, out, inp, k, groups=1):
    return [(f"{name}.weight", (out, inp // groups, k, k)), (f"{name}.bias", (out,))]


def _linear(name, out, inp):
    return [(f"{name}.weight", (out, inp)), (f"{name}.bias", (out,))]


def _se(name, c, r):
    return _linear(f"{name}.reduce", c // r, c) + _linear(f"{name}.expand", c, c // r)


def _dyt(name, c):
    return [(f"{name}.alpha", (1,)), (f"{name}.gamma", (c,)), (f"{name}.beta", (c,))]


def parameter_layout(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered (name, shape) list of every parameter the network owns."""
    c, d = cfg.base_channels, cfg.embed_dim
    e = cfg.expanded_channels
    layout = []
    for exp in EXPOSURES:
        layout += _conv(f"stem.{exp}.conv0", c, 3, 3)
    for pair in ("over", "under"):
        p = f"iaaf.{pair}"
        layout += _conv(f"{p}.pre", c, 2 * c, 3)
        layout += _conv(f"{p}.res.conv0", c, c, 3) + _conv(f"{p}.res.conv1", c, c, 3)
        layout += _conv(f"{p}.post", c, c, 3)
    layout += _conv("ire.expand", e, cfg.fusion_channels, 1)
    layout += _conv("ire.dw", e, e, 3, groups=e)
    layout += _se("ire.se", e, cfg.se_reduction)
    layout += _conv("ire.project", d, e, 1)
    for i in range(cfg.num_blocks):
        p = f"blocks.{i}"
        layout += _dyt(f"{p}.dyt1", d)
        layout += _linear(f"{p}.attn.qkv", 3 * d, d) + _linear(f"{p}.attn.out", d, d)
        layout += _conv(f"{p}.lce.dw", d, d, 3, groups=d) + _conv(f"{p}.lce.pw", d, d, 1)
        layout += _se(f"{p}.lce.se", d, cfg.se_reduction)
        layout += _dyt(f"{p}.dyt2", d)
        layout += _linear(f"{p}.mlp.fc1", cfg.mlp_ratio * d, d) + _linear(f"{p}.mlp.fc2", d, cfg.mlp_ratio * d)
        for j in range(len(B.EMSDC_DILATIONS)):
            layout += _conv(f"{p}.emsdc.branch{j}", d, d, 3, groups=B.EMSDC_GROUPS)
            if cfg.emsdc_activation == "rprelu":
                layout += [(f"{p}.emsdc.act{j}.{k}", (d,)) for k in ("shift", "slope", "bias")]
        layout += _conv(f"{p}.emsdc.merge", d, d, 1)
    layout += _conv("recon.conv0", c, d, 3) + _conv("recon.conv1", 3, c, 3)
    return layout


ZERO_INIT_PREFIXES = ("recon.conv1.",)
ZERO_INIT_SUFFIXES = (".emsdc.merge.weight", ".emsdc.merge.bias")


def _stream(seed: int, name: str) -> np.random.Generator:
    # Philox is counter-based; each tensor gets its own key so values do not
    # depend on construction order
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(zlib.crc32(name.encode()),))
    return np.random.Generator(np.random.Philox(ss))


def init_parameter(cfg: ModelConfig, name: str, shape: tuple[int, ...], seed: int) -> np.ndarray:
    leaf = name.rsplit(".", 1)[1]
    if name.startswith(ZERO_INIT_PREFIXES) or name.endswith(ZERO_INIT_SUFFIXES):
        return np.zeros(shape, DTYPE)
    if leaf == "alpha":
        return np.full(shape, cfg.dyt_alpha, DTYPE)
    if leaf == "gamma":
        return np.ones(shape, DTYPE)
    if leaf == "slope":
        return np.full(shape, 0.25, DTYPE)
    if len(shape) < 2:
        return np.zeros(shape, DTYPE)
    bound = 1.0 / np.sqrt(np.prod(shape[1:]))
    return _stream(seed, name).uniform(-bound, bound, size=shape).astype(DTYPE)


@dataclass
class Model:
    cfg: ModelConfig
    weights: "OrderedDict[str, np.ndarray]" = field(repr=False)

    def __post_init__(self):
        check_weights(self.cfg, self.weights)

    def _w(self, name):
        return self.weights[name]

    def conv_wb(self, name):
        return self._w(f"{name}.weight"), self._w(f"{name}.bias")

    def se(self, name) -> B.SEParams:
        return B.SEParams(*self.conv_wb(f"{name}.reduce"), *self.conv_wb(f"{name}.expand"))

    def dyt(self, name) -> B.DyTParams:
        return B.DyTParams(self._w(f"{name}.alpha"), self._w(f"{name}.gamma"), self._w(f"{name}.beta"))

    def iaaf(self, pair) -> B.IAAFParams:
        p = f"iaaf.{pair}"
        return B.IAAFParams(
            *self.conv_wb(f"{p}.pre"), *self.conv_wb(f"{p}.res.conv0"),
            *self.conv_wb(f"{p}.res.conv1"), *self.conv_wb(f"{p}.post"),
        )

    def ire(self) -> B.IREParams:
        return B.IREParams(
            *self.conv_wb("ire.expand"), *self.conv_wb("ire.dw"), self.se("ire.se"),
            *self.conv_wb("ire.project"), stride=self.cfg.ire_stride,
        )

    def block(self, i) -> B.CAViTBlockParams:
        p = f"blocks.{i}"
        n = len(B.EMSDC_DILATIONS)
        act = None
        if self.cfg.emsdc_activation == "rprelu":
            act = [B.RPReLUParams(*(self._w(f"{p}.emsdc.act{j}.{k}") for k in ("shift", "slope", "bias"))) for j in range(n)]
        emsdc = B.EMSDCParams(
            [self._w(f"{p}.emsdc.branch{j}.weight") for j in range(n)],
            [self._w(f"{p}.emsdc.branch{j}.bias") for j in range(n)],
            *self.conv_wb(f"{p}.emsdc.merge"),
            activation=self.cfg.emsdc_activation,
            rprelu=act,
        )
        return B.CAViTBlockParams(
            dyt1=self.dyt(f"{p}.dyt1"),
            attn=B.AttentionParams(*self.conv_wb(f"{p}.attn.qkv"), *self.conv_wb(f"{p}.attn.out"), heads=self.cfg.heads),
            lce=B.LCEParams(*self.conv_wb(f"{p}.lce.dw"), *self.conv_wb(f"{p}.lce.pw"), self.se(f"{p}.lce.se")),
            dyt2=self.dyt(f"{p}.dyt2"),
            mlp=B.MLPParams(*self.conv_wb(f"{p}.mlp.fc1"), *self.conv_wb(f"{p}.mlp.fc2")),
            emsdc=emsdc,
            emsdc_attach=self.cfg.emsdc_attach,
        )


def check_weights(cfg: ModelConfig, weights) -> None:
    """Raise ``WeightFormatError`` unless ``weights`` holds exactly the layout of ``cfg``."""
    from .weightfile import WeightFormatError

    expected = OrderedDict(parameter_layout(cfg))
    missing = [k for k in expected if k not in weights]
    extra = [k for k in weights if k not in expected]
    if missing or extra:
        raise WeightFormatError(f"weights do not match config: missing {missing[:3]}, unexpected {extra[:3]}")
    for name, shape in expected.items():
        if tuple(weights[name].shape) != shape:
            raise WeightFormatError(f"{name}: expected shape {shape}, got {tuple(weights[name].shape)}")


def build_model(cfg: ModelConfig, seed: int = 42):
    """Initialise every parameter deterministically from ``seed``.

    Conv and linear weights are uniform in +-1/sqrt(fan_in), biases zero,
    DyT alpha = ``cfg.dyt_alpha`` with gamma = 1, beta = 0. E-MSDC merge
    projections and the final reconstruction conv start at zero, so an
    untrained model outputs a flat 0.5 image.
    """
    cfg.validate()
    ws = OrderedDict((name, init_parameter(cfg, name, shape, seed)) for name, shape in parameter_layout(cfg))
    return Model(cfg, ws), ws


def parameter_count(weights) -> int:
    return sum(int(v.size) for v in weights.values())


# ---------------------------------------------------------------------------
# forward


def _finite(x, stage):
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite values after {stage}")
    return x


class _Timer:
    def __init__(self, sink):
        self.sink = sink
        self.t = time.perf_counter()

    def lap(self, stage):
        now = time.perf_counter()
        if self.sink is not None:
            self.sink[stage] = self.sink.get(stage, 0.0) + (now - self.t)
        self.t = now


def forward(model: Model, stack: ExposureStack, timings: dict | None = None) -> np.ndarray:
    """Fuse an exposure stack into a ``3 x H x W`` image in [0, 1].

    Inputs whose sides are not multiples of the embedding stride are
    reflect-padded on the bottom/right and the result is cropped back.
    ``timings`` (if given) accumulates wall-clock seconds per stage.
    """
    h, w = stack.shape
    s = model.cfg.ire_stride
    pad_h, pad_w = -h % s, -w % s
    imgs = {k: getattr(stack, k)[None] for k in EXPOSURES}
    if pad_h or pad_w:
        imgs = {k: pad_reflect(v, (0, pad_h), (0, pad_w)) for k, v in imgs.items()}
    out = _forward_core(model, imgs, timings)
    return crop(out, 0, 0, h, w)[0]


def _forward_core(model: Model, imgs: dict, timings: dict | None) -> np.ndarray:
    cfg = model.cfg
    timer = _Timer(timings)
    coeffs = coeffs_for(cfg.color_mode)

    feats = {}
    for k in EXPOSURES:
        feats[k] = B.conv(rgb_to_ycbcr(imgs[k], coeffs), *model.conv_wb(f"stem.{k}.conv0"))
    f1, f2, f3 = (_finite(feats[k], f"stem.{k}") for k in EXPOSURES)
    timer.lap("stem")

    fused1 = _finite(B.iaaf_fuse(f1, f2, model.iaaf("over")), "iaaf.over")
    fused3 = _finite(B.iaaf_fuse(f3, f2, model.iaaf("under")), "iaaf.under")
    if cfg.variant == "main":
        x = concat_channels(fused1, f1, f2, f3, fused3)
    else:
        x = concat_channels(fused1, f2, fused3)
    timer.lap("fusion")

    emb = _finite(B.ire_forward(x, model.ire()), "ire")
    gh, gw = emb.shape[2:]
    tokens = grid_to_tokens(emb)
    timer.lap("embedding")

    for i in range(cfg.num_blocks):
        tokens = _finite(B.cavit_block_forward(tokens, (gh, gw), model.block(i)), f"blocks.{i}")
    timer.lap("transformer")

    hp, wp = f2.shape[2:]
    up = resize_bilinear(tokens_to_grid(tokens, gh, gw), hp, wp)
    r = B.conv(up, *model.conv_wb("recon.conv0")) + f2
    r = B.conv(gelu(r), *model.conv_wb("recon.conv1"))
    out = _finite(sigmoid(r), "recon")
    timer.lap("reconstruction")
    return out


def _tile_starts(n: int, tile: int, overlap: int) -> list[int]:
    if n <= tile:
        return [0]
    step = tile - overlap
    starts = list(range(0, n - tile, step))
    starts.append(n - tile)
    return starts


def _ramp(size: int, overlap: int, at_start: bool, at_end: bool) -> np.ndarray:
    u = np.arange(size, dtype=np.float64) + 0.5
    w = np.ones(size)
    if overlap > 0:
        if not at_start:
            w = np.minimum(w, u / overlap)
        if not at_end:
            w = np.minimum(w, (size - u) / overlap)
    return w


def forward_tiled(model: Model, stack: ExposureStack, tile: int = 128, overlap: int = 16,
                  workers: int = 1, timings: dict | None = None) -> np.ndarray:
    """Fuse large images as overlapping ``tile x tile`` patches.

    Neighbouring tiles overlap by at least ``overlap`` pixels and are blended
    with linear ramps. Tiles run concurrently when ``workers > 1``; the blend
    is done afterwards in a fixed order so the result does not depend on
    completion order.
    """
    h, w = stack.shape
    if h <= tile and w <= tile:
        return forward(model, stack, timings)
    th, tw = min(tile, h), min(tile, w)
    ys, xs = _tile_starts(h, th, overlap), _tile_starts(w, tw, overlap)
    boxes = [(y, x) for y in ys for x in xs]

    def run(box):
        y, x = box
        sub = ExposureStack(*(getattr(stack, k)[:, y : y + th, x : x + tw] for k in ("under", "normal", "over")), ev=stack.ev)
        return forward(model, sub, timings if workers == 1 else None)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            outs = list(pool.map(run, boxes))
    else:
        outs = [run(b) for b in boxes]

    canvas = np.zeros((3, h, w), np.float64)
    weight = np.zeros((h, w), np.float64)
    for (y, x), out in zip(boxes, outs):
        wy = _ramp(th, overlap, y == 0, y + th == h)
        wx = _ramp(tw, overlap, x == 0, x + tw == w)
        wt = wy[:, None] * wx[None, :]
        canvas[:, y : y + th, x : x + tw] += wt * out
        weight[y : y + th, x : x + tw] += wt
    return (canvas / weight).astype(DTYPE)

"""PSNR and SSIM in the linear and mu-law compressed domains.

All metrics clamp inputs to [0, 1] and compute in float64. PSNR of identical
images is capped at ``PSNR_CAP`` dB so reports stay finite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError

PSNR_CAP = 99.0


@dataclass(frozen=True)
class MuLawConfig:
    mu: float = 5000.0

    def __post_init__(self):
        if not self.mu > 0:
            raise ValueError(f"mu must be positive, got {self.mu}")


@dataclass(frozen=True)
class SSIMConfig:
    window: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    data_range: float = 1.0
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) <= 0:
            raise ValueError("SSIM exponents must be positive")
        if self.window < 1 or self.sigma <= 0:
            raise ValueError("SSIM window must be >= 1 with positive sigma")

    def kernel(self) -> np.ndarray:
        """Normalised separable Gaussian taps."""
        x = np.arange(self.window, dtype=np.float64) - (self.window - 1) / 2
        g = np.exp(-(x**2) / (2 * self.sigma**2))
        return g / g.sum()


@dataclass(frozen=True)
class MetricReport:
    psnr_l: float
    ssim_l: float
    psnr_mu: float
    ssim_mu: float

    def as_tsv(self) -> str:
        return f"{self.psnr_l:.6f}\t{self.ssim_l:.9f}\t{self.psnr_mu:.6f}\t{self.ssim_mu:.9f}"

    def as_text(self) -> str:
        return (f"PSNR-l  {self.psnr_l:10.4f} dB\nSSIM-l  {self.ssim_l:10.6f}\n"
                f"PSNR-mu {self.psnr_mu:10.4f} dB\nSSIM-mu {self.ssim_mu:10.6f}\n")


def _pair(a, b):
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    return np.clip(a, 0.0, 1.0), np.clip(b, 0.0, 1.0)


def mse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr_from_mse(err: float, max_val: float = 1.0) -> float:
    if max_val <= 0:
        raise ValueError("max_val must be positive")
    if err == 0:
        return PSNR_CAP
    return 10.0 * math.log10(max_val * max_val / err)


def psnr(a, b, max_val: float = 1.0) -> float:
    return psnr_from_mse(mse(a, b), max_val)


def mu_law(x, cfg: MuLawConfig = MuLawConfig()) -> np.ndarray:
    x = np.clip(np.asarray(x, np.float64), 0.0, 1.0)
    return np.log1p(cfg.mu * x) / math.log1p(cfg.mu)


def mu_law_inverse(y, cfg: MuLawConfig = MuLawConfig()) -> np.ndarray:
    y = np.asarray(y, np.float64)
    return np.expm1(y * math.log1p(cfg.mu)) / cfg.mu


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = len(g)
    x = sliding_window_view(x, k, axis=-2) @ g
    return sliding_window_view(x, k, axis=-1) @ g


def _signed_pow(v, p):
    return v if p == 1.0 else np.sign(v) * np.abs(v) ** p


def ssim_map(a: np.ndarray, b: np.ndarray, cfg: SSIMConfig = SSIMConfig()) -> np.ndarray:
    """SSIM at every valid window position of two 2-D images."""
    a, b = _pair(a, b)
    if a.ndim != 2:
        raise ShapeError(f"ssim_map takes 2-D images, got {a.shape}")
    if min(a.shape) < cfg.window:
        raise ShapeError(f"image {a.shape} smaller than the {cfg.window}x{cfg.window} window")
    g = cfg.kernel()
    c1 = (cfg.k1 * cfg.data_range) ** 2
    c2 = (cfg.k2 * cfg.data_range) ** 2
    c3 = c2 / 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = np.maximum(_filter_valid(a * a, g) - mu_a**2, 0.0)
    var_b = np.maximum(_filter_valid(b * b, g) - mu_b**2, 0.0)
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    sd_a, sd_b = np.sqrt(var_a), np.sqrt(var_b)
    lum = (2 * mu_a * mu_b + c1) / (mu_a**2 + mu_b**2 + c1)
    con = (2 * sd_a * sd_b + c2) / (var_a + var_b + c2)
    struct = (cov + c3) / (sd_a * sd_b + c3)
    return _signed_pow(lum, cfg.alpha) * _signed_pow(con, cfg.beta) * _signed_pow(struct, cfg.gamma)


def ssim(a, b, cfg: SSIMConfig = SSIMConfig()) -> float:
    """Mean SSIM. 3-D inputs are treated as channel-first and averaged per channel."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim == 3:
        if a.shape != b.shape:
            raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
        return float(np.mean([ssim_map(a[i], b[i], cfg).mean() for i in range(a.shape[0])]))
    return float(ssim_map(a, b, cfg).mean())


def normalize_reference(ref) -> np.ndarray:
    """Scale an HDR reference by its maximum so it lies in [0, 1]."""
    ref = np.asarray(ref, np.float64)
    peak = ref.max()
    return ref / peak if peak > 0 else ref


def evaluate_pair(fused, reference, mu_cfg: MuLawConfig = MuLawConfig(),
                  ssim_cfg: SSIMConfig = SSIMConfig()) -> MetricReport:
    fused, reference = _pair(fused, reference)
    fm, rm = mu_law(fused, mu_cfg), mu_law(reference, mu_cfg)
    return MetricReport(
        psnr_l=psnr(fused, reference),
        ssim_l=ssim(fused, reference, ssim_cfg),
        psnr_mu=psnr(fm, rm),
        ssim_mu=ssim(fm, rm, ssim_cfg),
    )

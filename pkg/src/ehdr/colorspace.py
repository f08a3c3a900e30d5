"""RGB <-> luminance/chrominance-difference transform used as the input prior.

Chrominance channels are plain differences (B - Y, R - Y) with no offset or
scaling. The default weights (config token ``paper``) use 0.287 for green, so the weights sum
to 0.696 and grey pixels carry a non-zero chroma; ``bt601`` selects the
standard 0.587 weight.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import DTYPE, ShapeError


@dataclass(frozen=True)
class ColorCoeffs:
    wr: float
    wg: float
    wb: float

    def __post_init__(self):
        if min(self.wr, self.wg, self.wb) < 0:
            raise ValueError(f"luminance weights must be non-negative: {self}")


REDUCED_GREEN = ColorCoeffs(0.299, 0.287, 0.11)
BT601 = ColorCoeffs(0.299, 0.587, 0.114)

MODES = {"paper": REDUCED_GREEN, "bt601": BT601}


def coeffs_for(mode: str) -> ColorCoeffs:
    try:
        return MODES[mode]
    except KeyError:
        raise ValueError(f"unknown color mode {mode!r}; expected one of {sorted(MODES)}") from None


def _channels(img):
    img = np.asarray(img, DTYPE)
    if img.ndim < 3 or img.shape[-3] != 3:
        raise ShapeError(f"expected 3 channels on axis -3, got shape {img.shape}")
    return img, img[..., 0, :, :], img[..., 1, :, :], img[..., 2, :, :]


def rgb_to_ycbcr(img: np.ndarray, coeffs: ColorCoeffs = REDUCED_GREEN) -> np.ndarray:
    """Map ``(..., 3, H, W)`` RGB to (Y, Cb, Cr) with Cb = B - Y, Cr = R - Y."""
    img, r, g, b = _channels(img)
    y = DTYPE(coeffs.wr) * r + DTYPE(coeffs.wg) * g + DTYPE(coeffs.wb) * b
    return np.stack([y, b - y, r - y], axis=-3)


def ycbcr_to_rgb(img: np.ndarray, coeffs: ColorCoeffs = REDUCED_GREEN) -> np.ndarray:
    if coeffs.wg == 0:
        raise ValueError("green weight is zero; the transform is not invertible")
    img, y, cb, cr = _channels(img)
    r = cr + y
    b = cb + y
    g = (y - DTYPE(coeffs.wr) * r - DTYPE(coeffs.wb) * b) / DTYPE(coeffs.wg)
    return np.stack([r, g, b], axis=-3)

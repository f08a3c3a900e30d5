"""PFM (float) and PPM P6 (8/16-bit) image files as ``C x H x W`` float32 arrays."""

from __future__ import annotations

import os

import numpy as np

from .tensor import DTYPE


class ImageFormatError(ValueError):
    pass


def write_pfm(path, img: np.ndarray) -> None:
    """Write a 3 x H x W (or 1 x H x W) image as little-endian PFM, bottom row first."""
    img = np.asarray(img, DTYPE)
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise ImageFormatError(f"PFM holds 1 or 3 channels, got shape {img.shape}")
    c, h, w = img.shape
    tag = b"PF" if c == 3 else b"Pf"
    body = np.ascontiguousarray(img.transpose(1, 2, 0)[::-1]).astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(tag + b"\n%d %d\n-1.0\n" % (w, h) + body)


def _header_tokens(buf: bytes, count: int, path):
    """Return ``count`` whitespace-separated header tokens and the data offset."""
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageFormatError(f"{path}: truncated header")
        tokens.append(buf[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    (tag, w, h, scale), off = _header_tokens(buf, 4, path)
    if tag not in (b"PF", b"Pf"):
        raise ImageFormatError(f"{path}: not a PFM file")
    try:
        w, h, scale = int(w), int(h), float(scale)
    except ValueError:
        raise ImageFormatError(f"{path}: malformed PFM header") from None
    if w < 1 or h < 1 or scale == 0:
        raise ImageFormatError(f"{path}: invalid PFM dimensions or scale")
    c = 3 if tag == b"PF" else 1
    n = w * h * c
    data = buf[off : off + 4 * n]
    if len(data) != 4 * n:
        raise ImageFormatError(f"{path}: expected {n} floats, file is truncated")
    arr = np.frombuffer(data, "<f4" if scale < 0 else ">f4").reshape(h, w, c)
    return np.ascontiguousarray(arr[::-1].transpose(2, 0, 1)).astype(DTYPE)


def write_ppm(path, img: np.ndarray, maxval: int = 255) -> None:
    """Quantise a 3 x H x W image in [0, 1] to binary PPM."""
    img = np.asarray(img, np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ImageFormatError(f"PPM holds 3 channels, got shape {img.shape}")
    if not 1 <= maxval <= 65535:
        raise ImageFormatError(f"invalid maxval {maxval}")
    _, h, w = img.shape
    q = np.rint(np.clip(img, 0.0, 1.0) * maxval).transpose(1, 2, 0)
    body = q.astype(np.uint8 if maxval < 256 else ">u2").tobytes()
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n%d\n" % (w, h, maxval) + body)


def read_ppm(path) -> np.ndarray:
    """Read binary PPM into a 3 x H x W float32 array scaled to [0, 1]."""
    with open(path, "rb") as fh:
        buf = fh.read()
    (tag, w, h, maxval), off = _header_tokens(buf, 4, path)
    if tag != b"P6":
        raise ImageFormatError(f"{path}: not a binary PPM (P6) file")
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError:
        raise ImageFormatError(f"{path}: malformed PPM header") from None
    if w < 1 or h < 1 or not 1 <= maxval <= 65535:
        raise ImageFormatError(f"{path}: invalid PPM header values")
    dt = np.dtype(np.uint8 if maxval < 256 else ">u2")
    n = w * h * 3
    data = buf[off : off + n * dt.itemsize]
    if len(data) != n * dt.itemsize:
        raise ImageFormatError(f"{path}: raster truncated")
    arr = np.frombuffer(data, dt).reshape(h, w, 3).transpose(2, 0, 1)
    return (arr.astype(np.float64) / maxval).astype(DTYPE)


def read_image(path) -> np.ndarray:
    """Dispatch on extension: ``.pfm`` or ``.ppm``/``.pnm``."""
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".pfm":
        return read_pfm(path)
    if ext in (".ppm", ".pnm"):
        return read_ppm(path)
    raise ImageFormatError(f"{path}: unsupported extension {ext!r} (expected .pfm or .ppm)")


def write_image(path, img) -> None:
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".pfm":
        write_pfm(path, img)
    elif ext in (".ppm", ".pnm"):
        write_ppm(path, img)
    else:
        raise ImageFormatError(f"{path}: unsupported extension {ext!r} (expected .pfm or .ppm)")

"""Lossy half of a baseline JPEG codec, used as an image corruption.

Pipeline for a channel-first RGB image in [0, 1]:

1. quantise to 8-bit: ``round(clip(v, 0, 1) * 255)``
2. RGB -> YCbCr (JFIF full range) and level shift by -128
3. 4:2:0 chroma subsampling by 2x2 block means (odd edges replicated)
4. pad each plane to a multiple of 8 by edge replication
5. per 8x8 block: orthonormal 2-D DCT-II, ``round(coef / Q)``, times ``Q``,
   inverse DCT
6. upsample chroma by pixel replication, crop, YCbCr -> RGB, round and clip
   to 0..255, divide by 255

``Q`` is the IJG standard luma or chroma table scaled for ``quality``:
``scale = 5000 / q`` for ``q < 50`` else ``200 - 2 q``, entries
``floor((base * scale + 50) / 100)`` clipped to 1..255.  Entropy coding is
lossless and therefore omitted.
"""
from __future__ import annotations

import numpy as np
from scipy import fft

LUMA = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)

CHROMA = np.array([
    [17, 18, 24, 47, 99, 99, 99, 99],
    [18, 21, 26, 66, 99, 99, 99, 99],
    [24, 26, 56, 99, 99, 99, 99, 99],
    [47, 66, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
], dtype=np.float64)


def quant_table(base: np.ndarray, quality: int) -> np.ndarray:
    if not 1 <= quality <= 100:
        raise ValueError(f"quality must be in 1..100, got {quality}")
    scale = 5000 / quality if quality < 50 else 200 - 2 * quality
    return np.clip(np.floor((base * scale + 50) / 100), 1, 255)


def rgb_to_ycbcr(rgb: np.ndarray) -> np.ndarray:
    r, g, b = rgb
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = -0.168736 * r - 0.331264 * g + 0.5 * b + 128
    cr = 0.5 * r - 0.418688 * g - 0.081312 * b + 128
    return np.stack([y, cb, cr])


def ycbcr_to_rgb(ycc: np.ndarray) -> np.ndarray:
    y, cb, cr = ycc[0], ycc[1] - 128, ycc[2] - 128
    r = y + 1.402 * cr
    g = y - 0.344136 * cb - 0.714136 * cr
    b = y + 1.772 * cb
    return np.stack([r, g, b])


def _pad8(p: np.ndarray) -> np.ndarray:
    h, w = p.shape
    return np.pad(p, ((0, -h % 8), (0, -w % 8)), mode="edge")


def _subsample(p: np.ndarray) -> np.ndarray:
    p = np.pad(p, ((0, p.shape[0] % 2), (0, p.shape[1] % 2)), mode="edge")
    return p.reshape(p.shape[0] // 2, 2, p.shape[1] // 2, 2).mean(axis=(1, 3))


def code_plane(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Quantise a level-shifted plane blockwise; returns the decoded plane."""
    h, w = p.shape
    padded = _pad8(p)
    H, W = padded.shape
    blocks = padded.reshape(H // 8, 8, W // 8, 8).transpose(0, 2, 1, 3)
    coef = fft.dctn(blocks, type=2, norm="ortho", axes=(2, 3))
    coef = np.round(coef / q) * q
    rec = fft.idctn(coef, type=2, norm="ortho", axes=(2, 3))
    return rec.transpose(0, 2, 1, 3).reshape(H, W)[:h, :w]


def roundtrip(image, quality: int) -> np.ndarray:
    x = np.asarray(image, dtype=np.float64)
    if x.ndim != 3 or x.shape[0] != 3:
        raise ValueError("jpeg round trip needs a 3 x H x W RGB image")
    _, h, w = x.shape
    rgb = np.round(np.clip(x, 0.0, 1.0) * 255)
    ycc = rgb_to_ycbcr(rgb) - 128
    lq, cq = quant_table(LUMA, quality), quant_table(CHROMA, quality)
    y = code_plane(ycc[0], lq)
    chroma = []
    for c in ycc[1:]:
        sub = code_plane(_subsample(c), cq)
        chroma.append(np.repeat(np.repeat(sub, 2, axis=0), 2, axis=1)[:h, :w])
    out = ycbcr_to_rgb(np.stack([y, *chroma]) + 128)
    return np.clip(np.round(out), 0, 255) / 255.0

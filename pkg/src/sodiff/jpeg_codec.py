"""JPEG-style degradation codec.

Block DCT + quantization with IJG quality scaling. Entropy coding is skipped:
it is lossless, so the decoded pixels are the same as a baseline JPEG round
trip with the same tables (up to the encoder's colour rounding).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

__all__ = [
    "BASE_LUMA",
    "BASE_CHROMA",
    "QuantTableSet",
    "quant_tables",
    "dct_matrix",
    "dct2",
    "idct2",
    "rgb_to_ycbcr",
    "ycbcr_to_rgb",
    "degrade",
]

# Annex K tables, natural (row-major) order.
BASE_LUMA = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.int64,
)

BASE_CHROMA = np.array(
    [
        [17, 18, 24, 47, 99, 99, 99, 99],
        [18, 21, 26, 66, 99, 99, 99, 99],
        [24, 26, 56, 99, 99, 99, 99, 99],
        [47, 66, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
    ],
    dtype=np.int64,
)

SUBSAMPLE_MODES = ("444", "420")


@dataclass(frozen=True)
class QuantTableSet:
    luma: np.ndarray
    chroma: np.ndarray
    qf: int


def _check_qf(qf) -> int:
    if isinstance(qf, bool) or int(qf) != qf:
        raise ValueError(f"quality factor must be an integer, got {qf!r}")
    qf = int(qf)
    if not 1 <= qf <= 100:
        raise ValueError(f"quality factor must be in [1, 100], got {qf}")
    return qf


def _scale_table(base: np.ndarray, scale: int) -> np.ndarray:
    table = (base * scale + 50) // 100
    return np.clip(table, 1, 255)


@lru_cache(maxsize=128)
def _tables(qf: int) -> tuple[np.ndarray, np.ndarray]:
    scale = 5000 // qf if qf < 50 else 200 - 2 * qf
    luma = _scale_table(BASE_LUMA, scale)
    chroma = _scale_table(BASE_CHROMA, scale)
    luma.setflags(write=False)
    chroma.setflags(write=False)
    return luma, chroma


def quant_tables(qf: int) -> QuantTableSet:
    """Luma/chroma quantization tables for an IJG quality factor in [1, 100]."""
    qf = _check_qf(qf)
    luma, chroma = _tables(qf)
    return QuantTableSet(luma=luma, chroma=chroma, qf=qf)


@lru_cache(maxsize=4)
def dct_matrix(n: int = 8) -> np.ndarray:
    """Orthonormal DCT-II basis; rows are frequencies."""
    k = np.arange(n)[:, None]
    x = np.arange(n)[None, :]
    mat = np.cos(math.pi * (2 * x + 1) * k / (2 * n)) * math.sqrt(2.0 / n)
    mat[0] /= math.sqrt(2.0)
    mat.setflags(write=False)
    return mat


def dct2(block: np.ndarray) -> np.ndarray:
    """2D orthonormal DCT-II over the last two axes (any leading batch dims)."""
    c = dct_matrix(block.shape[-1])
    return c @ np.asarray(block, dtype=np.float64) @ c.T


def idct2(coeffs: np.ndarray) -> np.ndarray:
    c = dct_matrix(coeffs.shape[-1])
    return c.T @ np.asarray(coeffs, dtype=np.float64) @ c


# JFIF full-range BT.601, 0..255 scale.
_RGB2YCC = np.array(
    [
        [0.299, 0.587, 0.114],
        [-0.168735892, -0.331264108, 0.5],
        [0.5, -0.418687589, -0.081312411],
    ]
)
_YCC2RGB = np.array(
    [
        [1.0, 0.0, 1.402],
        [1.0, -0.344136286, -0.714136286],
        [1.0, 1.772, 0.0],
    ]
)
_YCC_OFFSET = np.array([0.0, 128.0, 128.0])


def rgb_to_ycbcr(rgb: np.ndarray) -> np.ndarray:
    """H×W×3 RGB on the 0..255 scale to YCbCr on the same scale."""
    return rgb @ _RGB2YCC.T + _YCC_OFFSET


def ycbcr_to_rgb(ycc: np.ndarray) -> np.ndarray:
    return (ycc - _YCC_OFFSET) @ _YCC2RGB.T


def _to_blocks(plane: np.ndarray) -> np.ndarray:
    h, w = plane.shape
    return plane.reshape(h // 8, 8, w // 8, 8).transpose(0, 2, 1, 3)


def _from_blocks(blocks: np.ndarray) -> np.ndarray:
    nh, nw = blocks.shape[:2]
    return blocks.transpose(0, 2, 1, 3).reshape(nh * 8, nw * 8)


def _quantize_plane(plane: np.ndarray, table: np.ndarray) -> np.ndarray:
    coeffs = dct2(_to_blocks(plane - 128.0))
    # np.round is half-to-even; JPEG encoders round half away from zero.
    q = np.sign(coeffs) * np.floor(np.abs(coeffs) / table + 0.5)
    recon = idct2(q * table) + 128.0
    return np.clip(np.round(_from_blocks(recon)), 0.0, 255.0)


def _pad_to(arr: np.ndarray, mult: int) -> np.ndarray:
    h, w = arr.shape[:2]
    ph, pw = (-h) % mult, (-w) % mult
    if ph == 0 and pw == 0:
        return arr
    pad = [(0, ph), (0, pw)] + [(0, 0)] * (arr.ndim - 2)
    return np.pad(arr, pad, mode="edge")


def degrade(image: np.ndarray, qf: int, subsample: str = "444") -> np.ndarray:
    """Compress/decompress an H×W×3 RGB image in [0, 1] at quality ``qf``.

    The input is snapped to 8-bit first, as any real encoder sees it. The
    output is 8-bit valued (multiples of 1/255) and has the input's shape.
    """
    tables = quant_tables(qf)
    subsample = str(subsample).replace(":", "")
    if subsample not in SUBSAMPLE_MODES:
        raise ValueError(f"subsample must be one of {SUBSAMPLE_MODES}, got {subsample!r}")
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected H×W×3 RGB image, got shape {image.shape}")
    h, w = image.shape[:2]

    rgb8 = np.round(np.clip(image, 0.0, 1.0) * 255.0)
    mult = 16 if subsample == "420" else 8
    ycc = np.clip(np.round(rgb_to_ycbcr(_pad_to(rgb8, mult))), 0.0, 255.0)

    y = _quantize_plane(ycc[..., 0], tables.luma)
    chroma = []
    for ch in (1, 2):
        plane = ycc[..., ch]
        if subsample == "420":
            ph, pw = plane.shape
            small = plane.reshape(ph // 2, 2, pw // 2, 2).mean(axis=(1, 3))
            rec = _quantize_plane(small, tables.chroma)
            plane = rec.repeat(2, axis=0).repeat(2, axis=1)
        else:
            plane = _quantize_plane(plane, tables.chroma)
        chroma.append(plane)

    out = ycbcr_to_rgb(np.stack([y, *chroma], axis=-1))
    out = np.clip(np.round(out), 0.0, 255.0) / 255.0
    return out[:h, :w]

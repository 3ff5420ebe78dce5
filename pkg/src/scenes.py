"""Bundled synthetic clean scenes."""
from __future__ import annotations

from typing import Dict

import numpy as np
from scipy import ndimage


def chessboard(size: int = 128, square: int = 16) -> np.ndarray:
    rows, cols = np.indices((size, size))
    board = ((rows // square + cols // square) % 2).astype(np.float32)
    return (0.15 + 0.7 * board)[None]


def ripple_texture(size: int = 128, seed: int = 1) -> np.ndarray:
    """Sum of random oriented sinusoids over a smooth gradient."""

    rng = np.random.default_rng(seed)
    yy, xx = np.indices((size, size), dtype=np.float64) / size
    img = 0.3 * yy + 0.2 * xx
    for _ in range(6):
        angle = rng.uniform(0, np.pi)
        freq = rng.uniform(3, 14)
        phase = rng.uniform(0, 2 * np.pi)
        img += rng.uniform(0.05, 0.15) * np.sin(2 * np.pi * freq * (np.cos(angle) * xx + np.sin(angle) * yy) + phase)
    return _stretch(img)[None]


def blob_texture(size: int = 128, seed: int = 2) -> np.ndarray:
    """Smoothed noise at two scales plus a few hard-edged rectangles."""

    rng = np.random.default_rng(seed)
    coarse = ndimage.gaussian_filter(rng.standard_normal((size, size)), 6)
    fine = ndimage.gaussian_filter(rng.standard_normal((size, size)), 1.5)
    img = _stretch(coarse) + 0.3 * _stretch(fine)
    for _ in range(5):
        top, left = rng.integers(0, size - 24, size=2)
        h, w = rng.integers(8, 24, size=2)
        img[top:top + h, left:left + w] = rng.uniform(0, 1.3)
    return _stretch(img)[None]


def _stretch(img: np.ndarray) -> np.ndarray:
    low, high = float(img.min()), float(img.max())
    return (0.05 + 0.9 * (img - low) / (high - low)).astype(np.float32)


def bundled_scenes(size: int = 128) -> Dict[str, np.ndarray]:
    return {
        "chessboard": chessboard(size),
        "ripples": ripple_texture(size),
        "blobs": blob_texture(size),
    }

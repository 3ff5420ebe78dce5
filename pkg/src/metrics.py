"""Full-reference quality metrics: MSE, PSNR and SSIM."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence

import numpy as np
from scipy import ndimage


SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


class MetricError(ValueError):
    """Raised for mismatched or too-small inputs."""


@dataclass(frozen=True, slots=True)
class QualityReport:
    psnr_db: float
    ssim: float
    mse: float


@dataclass(frozen=True, slots=True)
class SceneReport:
    frames: List[QualityReport]
    mean: QualityReport


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch: {a.shape} vs {b.shape}")


def mse(a: np.ndarray, b: np.ndarray) -> float:
    _check_pair(a, b)
    diff = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return float(np.mean(diff * diff))


def psnr_from_mse(error: float, peak: float = 1.0) -> float:
    if error == 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / error)


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """PSNR in dB; ``math.inf`` for identical images."""
    return psnr_from_mse(mse(a, b), peak)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    coords = np.arange(size, dtype=np.float64) - size // 2
    g = np.exp(-(coords ** 2) / (2 * sigma ** 2))
    window = np.outer(g, g)
    return window / window.sum()


def _ssim_plane(a: np.ndarray, b: np.ndarray, peak: float) -> float:
    window = gaussian_window()
    r = SSIM_WINDOW // 2

    def local_mean(img: np.ndarray) -> np.ndarray:
        # only windows fully inside the image are kept
        return ndimage.correlate(img, window, mode="constant")[r:-r, r:-r]

    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2
    mu_a = local_mean(a)
    mu_b = local_mean(b)
    var_a = local_mean(a * a) - mu_a * mu_a
    var_b = local_mean(b * b) - mu_b * mu_b
    cov = local_mean(a * b) - mu_a * mu_b
    numerator = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    denominator = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(numerator / denominator))


def ssim(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """Mean local SSIM (11x11 Gaussian window, sigma 1.5), averaged over channels."""

    _check_pair(a, b)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.ndim != 3:
        raise MetricError(f"expected [H,W] or [C,H,W] images, got shape {a.shape}")
    if min(a.shape[-2:]) < SSIM_WINDOW:
        raise MetricError(f"image {a.shape[-2:]} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    return float(np.mean([_ssim_plane(pa, pb, peak) for pa, pb in zip(a, b)]))


def quality_report(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> QualityReport:
    error = mse(a, b)
    return QualityReport(psnr_db=psnr_from_mse(error, peak), ssim=ssim(a, b, peak), mse=error)


def evaluate_scene(restored: Sequence[np.ndarray], clean: np.ndarray, peak: float = 1.0) -> SceneReport:
    """Per-frame reports plus arithmetic means over the sequence."""

    if len(restored) == 0:
        raise MetricError("no frames to evaluate")
    frames = [quality_report(frame, clean, peak) for frame in restored]
    mean = QualityReport(
        psnr_db=float(np.mean([r.psnr_db for r in frames])),
        ssim=float(np.mean([r.ssim for r in frames])),
        mse=float(np.mean([r.mse for r in frames])),
    )
    return SceneReport(frames=frames, mean=mean)


def write_report_csv(report: SceneReport, path: Path | str, names: Sequence[str] | None = None) -> None:
    """``frame,psnr_db,ssim,mse`` rows followed by a ``mean`` row."""

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = list(names) if names is not None else [str(i + 1) for i in range(len(report.frames))]
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["frame", "psnr_db", "ssim", "mse"])
        for name, row in zip(names, report.frames, strict=True):
            writer.writerow([name, repr(row.psnr_db), repr(row.ssim), repr(row.mse)])
        writer.writerow(["mean", repr(report.mean.psnr_db), repr(report.mean.ssim), repr(report.mean.mse)])

"""Synthetic turbulence: spatially-variant PSF blur plus sensor noise (y = h x + b)."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np
from scipy import ndimage


logger = logging.getLogger(__name__)

PSF_SUM_TOLERANCE = 1e-9


class SimulationError(ValueError):
    """Raised for invalid PSFs, tilings or sequence requests."""


@dataclass(frozen=True, slots=True)
class PSF:
    """Square, odd-sized, non-negative kernel with unit sum."""

    kernel: np.ndarray

    def __post_init__(self) -> None:
        k = self.kernel
        if k.ndim != 2 or k.shape[0] != k.shape[1] or k.shape[0] % 2 == 0:
            raise SimulationError(f"PSF must be square with odd size, got shape {k.shape}")
        if (k < 0).any():
            raise SimulationError("PSF has negative entries")
        if abs(float(k.sum()) - 1.0) > PSF_SUM_TOLERANCE:
            raise SimulationError(f"PSF sums to {float(k.sum())!r}, expected 1")

    @property
    def size(self) -> int:
        return self.kernel.shape[0]

    @property
    def centroid(self) -> np.ndarray:
        """Mass-weighted (row, col) offset from the centre pixel."""
        return _first_moments(self.kernel) / float(self.kernel.sum())

    @classmethod
    def normalized(cls, kernel: np.ndarray) -> "PSF":
        kernel = np.clip(np.asarray(kernel, dtype=np.float64), 0.0, None)
        total = float(kernel.sum())
        if total <= 0:
            raise SimulationError("PSF has no positive mass")
        return cls(kernel / total)


def delta_psf(size: int = 1) -> PSF:
    kernel = np.zeros((size, size))
    kernel[size // 2, size // 2] = 1.0
    return PSF(kernel)


def _centred_grid(size: int) -> Tuple[np.ndarray, np.ndarray]:
    coords = np.arange(size, dtype=np.float64) - size // 2
    return np.meshgrid(coords, coords, indexing="ij")


def _first_moments(kernel: np.ndarray) -> np.ndarray:
    yy, xx = _centred_grid(kernel.shape[0])
    return np.array([(kernel * yy).sum(), (kernel * xx).sum()])


def _place_centroid(kernel: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Reweight ``kernel`` by ``1 + a*y + b*x`` so its centroid lands on ``target``.

    Falls back to point symmetrization (centroid 0) if the ramp would turn
    the support negative.
    """

    if kernel.shape[0] == 1:
        return kernel
    yy, xx = _centred_grid(kernel.shape[0])
    mass = float(kernel.sum())
    first = _first_moments(kernel)
    if np.allclose(first, target * mass, rtol=0.0, atol=1e-15):
        return kernel
    second = np.array([
        [(kernel * yy * yy).sum(), (kernel * yy * xx).sum()],
        [(kernel * xx * yy).sum(), (kernel * xx * xx).sum()],
    ])
    # centroid of k * (1 + coef . (y, x)) is (first + second @ coef) / (mass + first . coef)
    system = second - np.outer(target, first)
    try:
        coef = np.linalg.solve(system, target * mass - first)
    except np.linalg.LinAlgError:
        coef = None
    if coef is not None:
        ramp = 1.0 + coef[0] * yy + coef[1] * xx
        if (ramp[kernel > 0] > 0).all():
            return kernel * ramp
    logger.debug("Centroid ramp not positive on the support, symmetrizing %dx%d PSF", *kernel.shape)
    return 0.5 * (kernel + kernel[::-1, ::-1])


def generate_psf_bank(count: int = 9, size: int = 15, seed: int = 0) -> List[PSF]:
    """Random mixtures of 2-4 anisotropic Gaussian lobes, centroid on the centre pixel.

    Lobe centres stay within a quarter of the kernel around the middle so
    the mass is mostly captured by the kernel support. The lobes are then
    shifted together so their combined mass sits at the centre, and the
    truncation residue is removed with ``_place_centroid``.
    """

    if size < 3 or size % 2 == 0:
        raise SimulationError(f"PSF size must be odd and >= 3, got {size}")
    rng = np.random.default_rng(seed)
    half = size // 2
    yy, xx = _centred_grid(size)
    points = np.stack([yy, xx], axis=-1)

    bank: List[PSF] = []
    for _ in range(count):
        lobes = []
        for _lobe in range(int(rng.integers(2, 5))):
            centre = rng.uniform(-half / 2, half / 2, size=2)
            sigmas = rng.uniform(0.6, max(0.8, half / 2.5), size=2)
            angle = rng.uniform(0, np.pi)
            rot = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
            cov = rot @ np.diag(sigmas ** 2) @ rot.T
            amplitude = rng.uniform(0.2, 1.0)
            lobes.append((centre, np.linalg.inv(cov), amplitude, amplitude * np.prod(sigmas)))

        masses = np.array([lobe[3] for lobe in lobes])
        shift = np.sum([lobe[0] * m for lobe, m in zip(lobes, masses)], axis=0) / masses.sum()
        kernel = np.zeros((size, size))
        for centre, inv, amplitude, _mass in lobes:
            offset = points - (centre - shift)
            mahal = np.einsum("...i,ij,...j->...", offset, inv, offset)
            kernel += amplitude * np.exp(-0.5 * mahal)
        bank.append(PSF.normalized(_place_centroid(kernel, np.zeros(2))))
    return bank


def resize_psf(psf: PSF, scale: float) -> PSF:
    """Bilinear rescale to ``round(size*scale)`` (forced odd) and renormalize.

    The centroid scales with the kernel, so a centred PSF stays centred.
    """

    if not 0 < scale <= 4:
        raise SimulationError(f"PSF scale must be in (0, 4], got {scale}")
    new_size = int(round(psf.size * scale))
    if new_size % 2 == 0:
        new_size += 1
    if new_size < 1:
        raise SimulationError(f"resized PSF size {new_size} < 1")
    if new_size == psf.size:
        return PSF.normalized(psf.kernel)
    if psf.size == 1:
        return delta_psf(new_size)
    zoom = new_size / psf.size
    resized = ndimage.zoom(psf.kernel, zoom, order=1, mode="constant", cval=0.0)
    if resized.shape != (new_size, new_size):
        raise SimulationError(f"unexpected resized shape {resized.shape}")
    target = psf.centroid * (new_size - 1) / (psf.size - 1)
    return PSF.normalized(_place_centroid(resized, target))


def load_psf_file(path: Path | str) -> PSF:
    """Read ``PSF <size>`` followed by size*size reals; normalized on load."""

    tokens = Path(path).read_text(encoding="utf-8").split()
    if len(tokens) < 2 or tokens[0] != "PSF":
        raise SimulationError(f"{path}: missing 'PSF <size>' header")
    try:
        size = int(tokens[1])
        values = [float(token) for token in tokens[2:]]
    except ValueError as exc:
        raise SimulationError(f"{path}: {exc}") from exc
    if len(values) != size * size:
        raise SimulationError(f"{path}: expected {size * size} values, found {len(values)}")
    return PSF.normalized(np.array(values).reshape(size, size))


def save_psf_file(psf: PSF, path: Path | str) -> None:
    lines = [f"PSF {psf.size}"]
    lines.extend(" ".join(repr(float(v)) for v in row) for row in psf.kernel)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass(frozen=True, slots=True)
class DistortionConfig:
    psf_bank: Tuple[PSF, ...] = field(default_factory=lambda: tuple(generate_psf_bank(9, 15, 0)))
    tile_grid: Tuple[int, int] = (3, 3)
    scale_range: Tuple[float, float] = (0.5, 1.5)
    noise_sigma: float = 0.01
    blend_margin: int = 8
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.psf_bank:
            raise SimulationError("PSF bank is empty")
        if self.tile_grid[0] < 1 or self.tile_grid[1] < 1:
            raise SimulationError(f"tile grid must be >= (1, 1), got {self.tile_grid}")
        low, high = self.scale_range
        if not 0 < low <= high <= 4:
            raise SimulationError(f"scale range must lie in (0, 4], got {self.scale_range}")
        if self.noise_sigma < 0:
            raise SimulationError(f"noise sigma must be >= 0, got {self.noise_sigma}")
        if self.blend_margin < 0:
            raise SimulationError(f"blend margin must be >= 0, got {self.blend_margin}")


def derive_seed(*entropy: int) -> int:
    return int(np.random.SeedSequence(list(entropy)).generate_state(1)[0])


def _as_chw(img: np.ndarray) -> np.ndarray:
    if img.ndim == 2:
        return img[None]
    if img.ndim == 3:
        return img
    raise SimulationError(f"expected [H,W] or [C,H,W] frame, got shape {img.shape}")


def blur(img: np.ndarray, psf: PSF) -> np.ndarray:
    """Plain convolution with reflective borders, per channel."""

    frame = _as_chw(np.asarray(img, dtype=np.float64))
    # correlate with the flipped kernel == convolution
    kernel = psf.kernel[::-1, ::-1]
    out = np.stack([ndimage.correlate(channel, kernel, mode="reflect") for channel in frame])
    return out if img.ndim == 3 else out[0]


def _tile_edges(extent: int, tiles: int) -> np.ndarray:
    return np.round(np.linspace(0, extent, tiles + 1)).astype(int)


def _feather(extent: int, start: int, stop: int, margin: int) -> np.ndarray:
    """1 inside [start, stop), decaying linearly to 0 over ``margin`` pixels outside."""

    pos = np.arange(extent, dtype=np.float64)
    outside = np.maximum(start - pos, 0) + np.maximum(pos - (stop - 1), 0)
    if margin == 0:
        return (outside == 0).astype(np.float64)
    return np.clip(1.0 - outside / (margin + 1), 0.0, 1.0)


def spatially_variant_blur(img: np.ndarray, config: DistortionConfig, frame_seed: int) -> np.ndarray:
    """Blur each tile with a randomly drawn, randomly resized PSF and feather the seams."""

    frame = _as_chw(np.asarray(img, dtype=np.float64))
    height, width = frame.shape[-2:]
    rows, cols = config.tile_grid
    row_edges = _tile_edges(height, rows)
    col_edges = _tile_edges(width, cols)
    min_tile = min(np.diff(row_edges).min(), np.diff(col_edges).min())
    if min_tile < 1:
        raise SimulationError(f"tile grid {config.tile_grid} is degenerate for a {height}x{width} image")
    if rows * cols > 1 and min_tile <= 2 * config.blend_margin:
        raise SimulationError(
            f"tiles of {min_tile}px are too small for a blend margin of {config.blend_margin}px"
        )

    rng = np.random.default_rng([config.seed, frame_seed])
    blurred: List[np.ndarray] = []
    weights: List[np.ndarray] = []
    for r in range(rows):
        w_rows = _feather(height, row_edges[r], row_edges[r + 1], config.blend_margin)
        for c in range(cols):
            psf = config.psf_bank[int(rng.integers(len(config.psf_bank)))]
            scale = float(rng.uniform(*config.scale_range))
            blurred.append(blur(frame, resize_psf(psf, scale)))
            weights.append(np.outer(w_rows, _feather(width, col_edges[c], col_edges[c + 1], config.blend_margin)))

    # x + sum(w_t * (b_t - x)) / sum(w_t): identity PSFs give x back bit for bit
    weight_sum = np.sum(weights, axis=0)
    out = frame.copy()
    for tile_blur, tile_weight in zip(blurred, weights):
        out += (tile_weight / weight_sum) * (tile_blur - frame)
    return out if np.ndim(img) == 3 else out[0]


def add_noise(img: np.ndarray, sigma: float, seed: int) -> np.ndarray:
    """Additive i.i.d. zero-mean Gaussian noise; no clamping."""

    if sigma < 0:
        raise SimulationError(f"noise sigma must be >= 0, got {sigma}")
    img = np.asarray(img, dtype=np.float64)
    if sigma == 0:
        return img.copy()
    return img + np.random.default_rng(seed).normal(0.0, sigma, size=img.shape)


def simulate_frame(x: np.ndarray, config: DistortionConfig, index: int) -> np.ndarray:
    blurred = spatially_variant_blur(x, config, frame_seed=index)
    return add_noise(blurred, config.noise_sigma, derive_seed(config.seed, index, 1))


def simulate_sequence(x: np.ndarray, frames: int, config: DistortionConfig) -> np.ndarray:
    """``frames`` independent distortions of ``x``, stacked on a leading axis."""

    if frames < 1:
        raise SimulationError(f"frames must be >= 1, got {frames}")
    sequence = np.stack([simulate_frame(x, config, index) for index in range(frames)])
    logger.debug("Simulated %d frames of shape %s", frames, sequence.shape[1:])
    return sequence


def frame_average(seq: Sequence[np.ndarray] | np.ndarray, window: int, t: int) -> np.ndarray:
    """Pixel mean of frames ``t-window+1 .. t``."""

    if window < 1:
        raise SimulationError(f"window must be >= 1, got {window}")
    length = len(seq)
    if not 0 <= t < length:
        raise SimulationError(f"frame index {t} outside sequence of {length} frames")
    if t - window + 1 < 0:
        raise SimulationError(f"window {window} at t={t} exceeds the {t + 1} available frames")
    frames = np.asarray(seq[t - window + 1:t + 1], dtype=np.float64)
    if window == 1:
        return frames[0].copy()
    return frames.mean(axis=0)

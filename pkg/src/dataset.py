"""On-disk scene layout and assembly of (distorted, clean) training pairs.

Layout::

    <data>/<scene>/clean.pgm
    <data>/<scene>/distorted_0001.pgm
    <data>/<scene>/distorted_0002.pgm
    ...
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .imageio import SUPPORTED_SUFFIXES, is_image, read_image, write_image
from .turbulence_sim import frame_average


logger = logging.getLogger(__name__)

CLEAN_STEM = "clean"
DISTORTED_PREFIX = "distorted_"


class DatasetError(ValueError):
    """Raised for missing, inconsistent or too-short scenes."""


@dataclass(slots=True)
class Scene:
    name: str
    clean: Optional[np.ndarray]
    frames: np.ndarray  # [T, C, H, W]

    @property
    def channels(self) -> int:
        return int(self.frames.shape[1])


def frame_name(index: int, prefix: str = DISTORTED_PREFIX, suffix: str = ".pgm") -> str:
    """1-based file name, e.g. ``distorted_0001.pgm``."""
    return f"{prefix}{index:04d}{suffix}"


def suffix_for(frame: np.ndarray) -> str:
    return ".pgm" if frame.shape[0] == 1 else ".ppm"


def _find_clean(directory: Path) -> Optional[Path]:
    for suffix in SUPPORTED_SUFFIXES:
        candidate = directory / f"{CLEAN_STEM}{suffix}"
        if candidate.is_file():
            return candidate
    return None


def list_frame_files(directory: Path | str) -> List[Path]:
    """``distorted_*`` images if present, otherwise every image except ``clean``, sorted by name."""

    directory = Path(directory)
    if not directory.is_dir():
        raise DatasetError(f"{directory} is not a directory")
    images = sorted(p for p in directory.iterdir() if is_image(p) and p.stem != CLEAN_STEM)
    distorted = [p for p in images if p.stem.startswith(DISTORTED_PREFIX)]
    return distorted or images


def read_frames(directory: Path | str) -> Tuple[List[Path], np.ndarray]:
    files = list_frame_files(directory)
    if not files:
        raise DatasetError(f"no frames found in {directory}")
    frames = [read_image(p) for p in files]
    shapes = {f.shape for f in frames}
    if len(shapes) != 1:
        raise DatasetError(f"frames in {directory} have differing shapes: {sorted(shapes)}")
    return files, np.stack(frames)


def load_scene(directory: Path | str, *, require_clean: bool = True) -> Scene:
    directory = Path(directory)
    clean_path = _find_clean(directory)
    if clean_path is None and require_clean:
        raise DatasetError(f"scene {directory} has no {CLEAN_STEM}.pgm/.ppm")
    _, frames = read_frames(directory)
    clean = read_image(clean_path) if clean_path is not None else None
    if clean is not None and clean.shape != frames.shape[1:]:
        raise DatasetError(f"scene {directory}: clean shape {clean.shape} != frame shape {frames.shape[1:]}")
    return Scene(name=directory.name, clean=clean, frames=frames)


def list_scenes(data_dir: Path | str, names: Optional[Sequence[str]] = None) -> List[Path]:
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise DatasetError(f"data directory {data_dir} does not exist")
    scenes = sorted(p for p in data_dir.iterdir() if p.is_dir() and _find_clean(p) is not None)
    if names:
        wanted = set(names)
        missing = wanted - {p.name for p in scenes}
        if missing:
            raise DatasetError(f"unknown scenes: {', '.join(sorted(missing))}")
        scenes = [p for p in scenes if p.name in wanted]
    if not scenes:
        raise DatasetError(f"no scenes found in {data_dir}")
    return scenes


def write_scene(out_dir: Path | str, name: str, clean: np.ndarray, frames: Sequence[np.ndarray]) -> Path:
    scene_dir = Path(out_dir) / name
    scene_dir.mkdir(parents=True, exist_ok=True)
    suffix = suffix_for(clean)
    write_image(clean, scene_dir / f"{CLEAN_STEM}{suffix}")
    for index, frame in enumerate(frames, start=1):
        write_image(frame, scene_dir / frame_name(index, suffix=suffix))
    return scene_dir


def first_valid_time(in_frames: int, window: int) -> int:
    return (in_frames - 1) + (window - 1)


def stack_adjacent(seq: np.ndarray, t: int, in_frames: int, window: int) -> np.ndarray:
    """Network input at time ``t``.

    Block ``k`` of ``in_frames`` channel blocks is the ``window``-frame
    average ending at ``t - (in_frames - 1) + k``; with ``in_frames=3`` and
    ``window=5`` the blocks average frames t-6..t-2, t-5..t-1 and t-4..t.
    """

    if in_frames < 1:
        raise DatasetError(f"in_frames must be >= 1, got {in_frames}")
    if t < first_valid_time(in_frames, window) or t >= len(seq):
        raise DatasetError(
            f"t={t} needs {first_valid_time(in_frames, window) + 1} frames of history "
            f"(in_frames={in_frames}, window={window}, sequence length {len(seq)})"
        )
    blocks = [frame_average(seq, window, t - (in_frames - 1) + k) for k in range(in_frames)]
    return np.concatenate(blocks, axis=0)


def centre_block(stacked: np.ndarray, in_frames: int) -> np.ndarray:
    """Channels of the middle frame block of a stacked input or output."""
    channels = stacked.shape[-3] // in_frames
    k = in_frames // 2
    return stacked[..., k * channels:(k + 1) * channels, :, :]


def build_pairs(
    scenes: Sequence[Scene],
    in_frames: int = 1,
    window: int = 1,
    train_frames: Optional[int] = None,
) -> List[Tuple[np.ndarray, np.ndarray]]:
    """(input, target) pairs for every valid time of every scene.

    Only the first ``train_frames`` frames of each scene are used when given.
    """

    pairs: List[Tuple[np.ndarray, np.ndarray]] = []
    need = first_valid_time(in_frames, window) + 1
    for scene in scenes:
        if scene.clean is None:
            raise DatasetError(f"scene {scene.name} has no clean frame")
        frames = scene.frames if train_frames is None else scene.frames[:train_frames]
        if len(frames) < need:
            raise DatasetError(
                f"scene {scene.name} has {len(frames)} usable frames; "
                f"in_frames={in_frames} with window={window} needs at least {need}"
            )
        target = np.concatenate([scene.clean] * in_frames, axis=0).astype(np.float32)
        for t in range(need - 1, len(frames)):
            pairs.append((stack_adjacent(frames, t, in_frames, window).astype(np.float32), target))
    logger.info("Assembled %d training pairs from %d scenes", len(pairs), len(scenes))
    return pairs

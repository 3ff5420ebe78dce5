"""Binary PGM (P5) / PPM (P6) reading and writing, 8-bit only."""
from __future__ import annotations

import re
from pathlib import Path

import numpy as np


SUPPORTED_SUFFIXES = (".pgm", ".ppm")
_TOKEN = re.compile(rb"\s*(#[^\n]*\n\s*)*(\S+)")


class ImageFormatError(ValueError):
    """Base class for unreadable image files."""


class MalformedHeaderError(ImageFormatError):
    pass


class TruncatedPayloadError(ImageFormatError):
    pass


def _parse_header(data: bytes, path: Path) -> tuple[str, int, int, int, int]:
    tokens = []
    offset = 0
    for _ in range(4):
        match = _TOKEN.match(data, offset)
        if match is None:
            raise MalformedHeaderError(f"{path}: incomplete header")
        tokens.append(match.group(2))
        offset = match.end()
    magic = tokens[0].decode("ascii", errors="replace")
    if magic not in ("P5", "P6"):
        raise MalformedHeaderError(f"{path}: unsupported magic {magic!r} (expected P5 or P6)")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise MalformedHeaderError(f"{path}: non-numeric header field") from exc
    if width < 1 or height < 1:
        raise MalformedHeaderError(f"{path}: invalid size {width}x{height}")
    if maxval != 255:
        raise MalformedHeaderError(f"{path}: only 8-bit images (maxval 255) are supported, got {maxval}")
    if offset >= len(data) or not data[offset:offset + 1].isspace():
        raise MalformedHeaderError(f"{path}: missing whitespace after header")
    return magic, width, height, maxval, offset + 1


def read_image(path: Path | str) -> np.ndarray:
    """Return a float32 ``[C, H, W]`` frame with values ``byte / 255``."""

    path = Path(path)
    data = path.read_bytes()
    magic, width, height, _, start = _parse_header(data, path)
    channels = 1 if magic == "P5" else 3
    expected = width * height * channels
    payload = data[start:start + expected]
    if len(payload) < expected:
        raise TruncatedPayloadError(f"{path}: payload has {len(payload)} bytes, expected {expected}")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)
    return (pixels.transpose(2, 0, 1).astype(np.float32) / np.float32(255.0))


def to_bytes(frame: np.ndarray) -> np.ndarray:
    """Clamp to [0, 1], scale by 255 and round half away from zero."""
    scaled = np.clip(np.asarray(frame, dtype=np.float64), 0.0, 1.0) * 255.0
    return np.floor(scaled + 0.5).astype(np.uint8)


def write_image(frame: np.ndarray, path: Path | str) -> None:
    """Write a ``[C, H, W]`` (or ``[H, W]``) frame; 1 channel -> P5, 3 -> P6."""

    path = Path(path)
    frame = np.asarray(frame)
    if frame.ndim == 2:
        frame = frame[None]
    if frame.ndim != 3 or frame.shape[0] not in (1, 3):
        raise ImageFormatError(f"cannot write frame of shape {frame.shape}: need 1 or 3 channels")
    channels, height, width = frame.shape
    magic = "P5" if channels == 1 else "P6"
    body = to_bytes(frame).transpose(1, 2, 0).tobytes()
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(f"{magic}\n{width} {height}\n255\n".encode("ascii") + body)


def is_image(path: Path) -> bool:
    return path.is_file() and path.suffix.lower() in SUPPORTED_SUFFIXES

"""Bit-exact model checkpoint files.

Layout (little-endian)::

    b"ATRM"  u16 version
    u32 depth, kernel, width, in_channels, out_channels
    u8  optimizer-state flag
    per layer: weights [C_out,C_in,n,n] f32, bias f32,
               hidden layers also gamma, beta, running mean, running var (f32)
    if flag: m arrays then v arrays in parameter order (f32), u64 step
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, List, Optional

import numpy as np

from .network import (
    BatchNormParams,
    ConvLayer,
    Model,
    NetworkConfig,
    NetworkConfigError,
    parameter_count,
    trainable_count,
)
from .tensor_core import BNState
from .training import AdamState


MAGIC = b"ATRM"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sH")
_CONFIG = struct.Struct("<5IB")
_STEP = struct.Struct("<Q")
_FLOAT = np.dtype("<f4")

logger = logging.getLogger(__name__)


class CheckpointError(ValueError):
    """Base class for unreadable checkpoint files."""


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


@dataclass(slots=True)
class Checkpoint:
    model: Model
    adam: Optional[AdamState] = None


def _write_array(stream: BinaryIO, array: np.ndarray) -> None:
    stream.write(np.ascontiguousarray(array, dtype=_FLOAT).tobytes())


def save_checkpoint(model: Model, path: Path | str, adam: Optional[AdamState] = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cfg = model.config
    with path.open("wb") as stream:
        stream.write(_HEADER.pack(MAGIC, FORMAT_VERSION))
        stream.write(
            _CONFIG.pack(cfg.depth, cfg.kernel, cfg.width, cfg.in_channels, cfg.out_channels, int(adam is not None))
        )
        for layer in model.layers:
            _write_array(stream, layer.weights)
            _write_array(stream, layer.bias)
            if layer.bn is not None:
                _write_array(stream, layer.bn.gamma)
                _write_array(stream, layer.bn.beta)
                _write_array(stream, layer.bn.state.running_mean)
                _write_array(stream, layer.bn.state.running_var)
        if adam is not None:
            for array in (*adam.m, *adam.v):
                _write_array(stream, array)
            stream.write(_STEP.pack(adam.t))
    logger.info("Checkpoint written to %s (optimizer state: %s)", path, adam is not None)


class _Reader:
    def __init__(self, payload: bytes) -> None:
        self._payload = payload
        self._offset = 0

    def take(self, size: int, what: str) -> bytes:
        end = self._offset + size
        if end > len(self._payload):
            raise TruncatedCheckpointError(
                f"checkpoint truncated while reading {what} "
                f"(need {size} bytes at offset {self._offset}, file has {len(self._payload)})"
            )
        chunk = self._payload[self._offset:end]
        self._offset = end
        return chunk

    def array(self, shape: tuple, what: str) -> np.ndarray:
        count = int(np.prod(shape))
        raw = self.take(count * _FLOAT.itemsize, what)
        return np.frombuffer(raw, dtype=_FLOAT).astype(np.float32).reshape(shape)

    @property
    def remaining(self) -> int:
        return len(self._payload) - self._offset


def load_checkpoint(path: Path | str) -> Checkpoint:
    """Read a checkpoint; raises a ``CheckpointError`` subclass, never a partial model."""

    reader = _Reader(Path(path).read_bytes())
    magic, version = _HEADER.unpack(reader.take(_HEADER.size, "header"))
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r} in {path}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"checkpoint version {version} is not supported (expected {FORMAT_VERSION})")

    depth, kernel, width, c_in, c_out, has_adam = _CONFIG.unpack(reader.take(_CONFIG.size, "config"))
    try:
        config = NetworkConfig(depth=depth, kernel=kernel, width=width, in_channels=c_in, out_channels=c_out)
    except NetworkConfigError as exc:
        raise CheckpointError(f"invalid architecture in {path}: {exc}") from exc

    expected = _FLOAT.itemsize * parameter_count(config)
    if has_adam:
        expected += 2 * _FLOAT.itemsize * trainable_count(config) + _STEP.size
    if reader.remaining < expected:
        raise TruncatedCheckpointError(
            f"checkpoint for depth={depth} width={width} needs {expected} payload bytes, {path} has {reader.remaining}"
        )
    if reader.remaining > expected:
        raise CheckpointError(f"{reader.remaining - expected} unexpected trailing bytes in {path}")

    layers: List[ConvLayer] = []
    for index, (layer_in, layer_out) in enumerate(config.layer_channels()):
        name = f"layer {index + 1}"
        weights = reader.array((layer_out, layer_in, kernel, kernel), f"{name} weights")
        bias = reader.array((layer_out,), f"{name} bias")
        bn = None
        if 0 < index < depth - 1:
            gamma = reader.array((layer_out,), f"{name} gamma")
            beta = reader.array((layer_out,), f"{name} beta")
            mean = reader.array((layer_out,), f"{name} running mean")
            var = reader.array((layer_out,), f"{name} running var")
            bn = BatchNormParams(gamma, beta, BNState(mean, var))
        layers.append(ConvLayer(weights, bias, bn))
    model = Model(config, layers)

    adam = None
    if has_adam:
        shapes = [p.shape for p in model.parameters()]
        m = [reader.array(shape, "adam m") for shape in shapes]
        v = [reader.array(shape, "adam v") for shape in shapes]
        (step,) = _STEP.unpack(reader.take(_STEP.size, "adam step"))
        adam = AdamState(m=m, v=v, t=step)
    return Checkpoint(model=model, adam=adam)

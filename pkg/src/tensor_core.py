"""Differentiable primitives on dense NCHW tensors.

Tensors are plain ``numpy.ndarray`` values. Every primitive keeps the dtype
it is given: float32 is the working precision, float64 is used by the
gradient checks.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Optional, Tuple

import numpy as np


BN_EPSILON = 1e-5
BN_MOMENTUM = 0.9

Mode = Literal["train", "infer"]


class ShapeError(ValueError):
    """Raised when tensor shapes are inconsistent with an operation."""


@dataclass(frozen=True, slots=True)
class ConvSpec:
    """Stride-1 convolution with zero same-padding."""

    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1

    def __post_init__(self) -> None:
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ShapeError(f"kernel must be odd and >= 1, got {self.kernel}")
        if self.stride != 1:
            raise ShapeError(f"only stride 1 is supported, got {self.stride}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ShapeError("channel counts must be positive")

    @property
    def padding(self) -> int:
        return self.kernel // 2

    @classmethod
    def from_weights(cls, weights: np.ndarray) -> "ConvSpec":
        if weights.ndim != 4:
            raise ShapeError(f"weights must be 4-D [C_out,C_in,n,n], got ndim={weights.ndim}")
        c_out, c_in, kh, kw = weights.shape
        if kh != kw:
            raise ShapeError(f"kernel height {kh} != kernel width {kw}")
        return cls(in_channels=c_in, out_channels=c_out, kernel=kh)


@dataclass(frozen=True, slots=True)
class BNState:
    """Running statistics of one batch-normalization layer."""

    running_mean: np.ndarray
    running_var: np.ndarray

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32) -> "BNState":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


@dataclass(slots=True)
class BNCache:
    x_hat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray


def is_valid(x: np.ndarray) -> bool:
    """True when every element is finite."""
    return bool(np.isfinite(x).all())


def _as_batch(x: np.ndarray) -> Tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], False
    if x.ndim == 4:
        return x, True
    raise ShapeError(f"expected [C,H,W] or [N,C,H,W] tensor, got shape {x.shape}")


def _check_conv(x: np.ndarray, weights: np.ndarray, spec: ConvSpec) -> None:
    if weights.shape != (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel):
        raise ShapeError(
            f"weights shape {weights.shape} does not match ConvSpec "
            f"[{spec.out_channels},{spec.in_channels},{spec.kernel},{spec.kernel}]"
        )
    if x.shape[1] != spec.in_channels:
        raise ShapeError(
            f"input channel dimension is {x.shape[1]}, expected in_channels={spec.in_channels}"
        )


def _padded(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def conv2d_forward(
    x: np.ndarray,
    weights: np.ndarray,
    bias: np.ndarray,
    spec: Optional[ConvSpec] = None,
) -> np.ndarray:
    """Cross-correlation with zero same-padding.

    Accumulates one BLAS matmul per kernel offset, so no im2col buffer of
    size ``C*n*n*H*W`` is ever materialized.
    """

    spec = spec or ConvSpec.from_weights(weights)
    xb, batched = _as_batch(x)
    _check_conv(xb, weights, spec)
    if bias.shape != (spec.out_channels,):
        raise ShapeError(f"bias shape {bias.shape} != ({spec.out_channels},)")

    n_batch, channels, height, width = xb.shape
    n = spec.kernel
    xp = _padded(xb, spec.padding)
    dtype = np.result_type(xb.dtype, weights.dtype)

    # [n, n, out, in] so every per-offset slice is a contiguous BLAS operand
    wk = np.ascontiguousarray(weights.transpose(2, 3, 0, 1), dtype=dtype)
    out = np.empty((n_batch, spec.out_channels, height * width), dtype=dtype)
    out[...] = bias.astype(dtype)[None, :, None]
    step = np.empty_like(out)
    for a in range(n):
        for b in range(n):
            window = xp[:, :, a:a + height, b:b + width].reshape(n_batch, channels, height * width)
            np.matmul(wk[a, b], window, out=step)
            out += step

    out = out.reshape(n_batch, spec.out_channels, height, width)
    return out if batched else out[0]


def conv2d_backward(
    grad_out: np.ndarray,
    x: np.ndarray,
    weights: np.ndarray,
    spec: Optional[ConvSpec] = None,
    *,
    need_input_grad: bool = True,
) -> Tuple[Optional[np.ndarray], np.ndarray, np.ndarray]:
    """Gradients of ``sum(grad_out * conv2d_forward(x, weights, bias))``.

    ``grad_input`` is ``None`` when ``need_input_grad`` is false (first layer).
    """

    spec = spec or ConvSpec.from_weights(weights)
    xb, batched = _as_batch(x)
    gb, _ = _as_batch(grad_out)
    _check_conv(xb, weights, spec)
    expected = (xb.shape[0], spec.out_channels, xb.shape[2], xb.shape[3])
    if gb.shape != expected:
        raise ShapeError(f"grad_out shape {gb.shape} does not match forward output {expected}")

    n_batch, channels, height, width = xb.shape
    n = spec.kernel
    xp = _padded(xb, spec.padding)
    g = gb.reshape(n_batch, spec.out_channels, height * width)

    grad_bias = gb.sum(axis=(0, 2, 3))
    gw = np.empty((n, n, spec.out_channels, channels), dtype=weights.dtype)
    for a in range(n):
        for b in range(n):
            window = xp[:, :, a:a + height, b:b + width].reshape(n_batch, channels, height * width)
            gw[a, b] = np.tensordot(g, window, axes=([0, 2], [0, 2]))
    grad_weights = np.ascontiguousarray(gw.transpose(2, 3, 0, 1))

    grad_input = None
    if need_input_grad:
        # correlation of grad_out with the spatially flipped, channel-transposed kernel
        flipped = np.ascontiguousarray(weights[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        zero_bias = np.zeros(spec.in_channels, dtype=weights.dtype)
        back_spec = ConvSpec(spec.out_channels, spec.in_channels, n)
        grad_input = conv2d_forward(gb, flipped, zero_bias, back_spec)
        if not batched:
            grad_input = grad_input[0]

    return grad_input, grad_weights, grad_bias


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    if grad_out.shape != x.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} != input shape {x.shape}")
    return np.where(x > 0, grad_out, 0).astype(grad_out.dtype, copy=False)


def batchnorm_forward(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    state: BNState,
    mode: Mode,
    *,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPSILON,
) -> Tuple[np.ndarray, Optional[BNCache], BNState]:
    """Per-channel batch normalization over (N, H, W).

    Returns ``(output, cache, state)``. In train mode the returned state holds
    the updated running statistics and the input ``state`` is left untouched;
    in infer mode the cache is ``None`` and the state is returned as is.
    """

    if x.ndim != 4:
        raise ShapeError(f"batchnorm expects [N,C,H,W], got shape {x.shape}")
    channels = x.shape[1]
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise ShapeError(f"gamma/beta must have shape ({channels},)")
    shape = (1, channels, 1, 1)

    if mode == "infer":
        inv_std = 1.0 / np.sqrt(state.running_var + eps)
        scale = (gamma * inv_std).astype(x.dtype)
        shift = (beta - state.running_mean * gamma * inv_std).astype(x.dtype)
        return x * scale.reshape(shape) + shift.reshape(shape), None, state

    if mode != "train":
        raise ValueError(f"unknown mode {mode!r}")
    count = x.shape[0] * x.shape[2] * x.shape[3]
    if count < 2:
        raise ShapeError("train-mode batchnorm needs N*H*W >= 2")

    mean = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3))
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    x_hat = (x - mean.reshape(shape)) * inv_std.reshape(shape)
    out = x_hat * gamma.reshape(shape) + beta.reshape(shape)

    new_state = BNState(
        running_mean=(momentum * state.running_mean + (1 - momentum) * mean).astype(state.running_mean.dtype),
        running_var=(momentum * state.running_var + (1 - momentum) * var).astype(state.running_var.dtype),
    )
    return out, BNCache(x_hat=x_hat, inv_std=inv_std, gamma=gamma), new_state


def batchnorm_backward(grad_out: np.ndarray, cache: BNCache) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    if grad_out.shape != cache.x_hat.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} != cached shape {cache.x_hat.shape}")
    channels = grad_out.shape[1]
    shape = (1, channels, 1, 1)
    count = grad_out.shape[0] * grad_out.shape[2] * grad_out.shape[3]

    grad_beta = grad_out.sum(axis=(0, 2, 3))
    grad_gamma = (grad_out * cache.x_hat).sum(axis=(0, 2, 3))

    # dx = gamma*inv_std/m * (m*g - sum(g) - x_hat*sum(g*x_hat))
    scale = (cache.gamma * cache.inv_std / count).reshape(shape)
    grad_x = scale * (
        count * grad_out
        - grad_beta.reshape(shape)
        - cache.x_hat * grad_gamma.reshape(shape)
    )
    return grad_x.astype(grad_out.dtype, copy=False), grad_gamma, grad_beta

"""Residual restoration network: conv+ReLU, (conv+BN+ReLU) x (d-2), conv.

The network predicts the deformation map ``R(y)`` and restoration is
``y - R(y)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .tensor_core import (
    BNCache,
    BNState,
    ConvSpec,
    Mode,
    ShapeError,
    batchnorm_backward,
    batchnorm_forward,
    conv2d_backward,
    conv2d_forward,
    relu_backward,
    relu_forward,
)


class NetworkConfigError(ValueError):
    """Raised for an invalid architecture description."""


def receptive_field(depth: int, kernel: int) -> int:
    """Input footprint of one output pixel for a stride-1 stack."""
    return depth * (kernel - 1) + 1


@dataclass(frozen=True, slots=True)
class NetworkConfig:
    depth: int = 17
    kernel: int = 5
    width: int = 64
    in_channels: int = 1
    out_channels: int = 1

    def __post_init__(self) -> None:
        if self.depth < 3:
            raise NetworkConfigError(f"depth must be >= 3, got {self.depth}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise NetworkConfigError(f"kernel must be odd and >= 1, got {self.kernel}")
        if self.width < 1:
            raise NetworkConfigError(f"width must be >= 1, got {self.width}")
        if self.in_channels < 1:
            raise NetworkConfigError(f"in_channels must be >= 1, got {self.in_channels}")
        if self.out_channels != self.in_channels:
            raise NetworkConfigError(
                f"out_channels ({self.out_channels}) must equal in_channels ({self.in_channels})"
            )

    @property
    def receptive_field(self) -> int:
        return receptive_field(self.depth, self.kernel)

    def layer_channels(self) -> List[Tuple[int, int]]:
        """(in, out) channel pair of every conv layer, first to last."""
        hidden = [(self.width, self.width)] * (self.depth - 2)
        return [(self.in_channels, self.width), *hidden, (self.width, self.out_channels)]


@dataclass(slots=True)
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    state: BNState


@dataclass(slots=True)
class ConvLayer:
    weights: np.ndarray
    bias: np.ndarray
    bn: Optional[BatchNormParams] = None

    @property
    def spec(self) -> ConvSpec:
        return ConvSpec.from_weights(self.weights)


@dataclass(slots=True)
class Model:
    """Architecture plus all trainable parameters and BN running statistics."""

    config: NetworkConfig
    layers: List[ConvLayer] = field(default_factory=list)

    @property
    def dtype(self) -> np.dtype:
        return self.layers[0].weights.dtype

    def parameters(self) -> List[np.ndarray]:
        """Trainable arrays in checkpoint order: W, b[, gamma, beta] per layer."""
        params: List[np.ndarray] = []
        for layer in self.layers:
            params.extend((layer.weights, layer.bias))
            if layer.bn is not None:
                params.extend((layer.bn.gamma, layer.bn.beta))
        return params

    def bn_layers(self) -> List[BatchNormParams]:
        return [layer.bn for layer in self.layers if layer.bn is not None]


def trainable_count(config: NetworkConfig) -> int:
    """Scalars updated by the optimizer: conv weights and biases, BN gamma/beta."""
    n2 = config.kernel * config.kernel
    w = config.width
    first = w * config.in_channels * n2 + w
    hidden = (config.depth - 2) * (w * w * n2 + w + 2 * w)
    last = config.out_channels * w * n2 + config.out_channels
    return first + hidden + last


def parameter_count(config: NetworkConfig) -> int:
    """Stored scalars: trainable ones plus BN running mean/var."""
    return trainable_count(config) + 2 * config.width * (config.depth - 2)


def init_model(config: NetworkConfig, seed: int, dtype=np.float32) -> Model:
    """He-normal conv weights, zero biases, unit gamma, zero beta."""

    rng = np.random.default_rng(seed)
    n = config.kernel
    layers: List[ConvLayer] = []
    for index, (c_in, c_out) in enumerate(config.layer_channels()):
        std = np.sqrt(2.0 / (n * n * c_in))
        weights = (rng.standard_normal((c_out, c_in, n, n)) * std).astype(dtype)
        bias = np.zeros(c_out, dtype=dtype)
        bn = None
        if 0 < index < config.depth - 1:
            bn = BatchNormParams(
                gamma=np.ones(c_out, dtype=dtype),
                beta=np.zeros(c_out, dtype=dtype),
                state=BNState.fresh(c_out, dtype=dtype),
            )
        layers.append(ConvLayer(weights, bias, bn))
    return Model(config, layers)


@dataclass(slots=True)
class LayerCache:
    input: np.ndarray
    pre_relu: Optional[np.ndarray] = None
    bn_cache: Optional[BNCache] = None


@dataclass(slots=True)
class ForwardCache:
    layers: List[LayerCache]
    bn_states: List[BNState]


def _check_input(model: Model, y: np.ndarray) -> np.ndarray:
    if y.ndim == 3:
        y = y[None]
    if y.ndim != 4:
        raise ShapeError(f"expected [C,H,W] or [N,C,H,W] input, got shape {y.shape}")
    if y.shape[1] != model.config.in_channels:
        raise ShapeError(
            f"input has {y.shape[1]} channels, model expects in_channels={model.config.in_channels}"
        )
    return y


def forward_with_cache(model: Model, y: np.ndarray, mode: Mode) -> Tuple[np.ndarray, ForwardCache]:
    """Forward pass keeping what ``backward_residual`` needs.

    The model is not modified; train-mode running statistics are returned in
    ``cache.bn_states`` for the caller to commit.
    """

    batch = _check_input(model, y)
    h = batch
    caches: List[LayerCache] = []
    states: List[BNState] = []
    last = len(model.layers) - 1
    for index, layer in enumerate(model.layers):
        entry = LayerCache(input=h)
        z = conv2d_forward(h, layer.weights, layer.bias)
        if index == last:
            h = z
        else:
            if layer.bn is not None:
                z, entry.bn_cache, state = batchnorm_forward(
                    z, layer.bn.gamma, layer.bn.beta, layer.bn.state, mode
                )
                states.append(state)
            entry.pre_relu = z
            h = relu_forward(z)
        caches.append(entry)
    return h, ForwardCache(layers=caches, bn_states=states)


def forward_residual(model: Model, y: np.ndarray, mode: Mode = "infer") -> np.ndarray:
    """Deformation map ``R(y)`` with the same shape as ``y``."""
    out, _ = forward_with_cache(model, y, mode)
    return out if y.ndim == 4 else out[0]


def backward_residual(model: Model, grad_out: np.ndarray, cache: ForwardCache) -> List[np.ndarray]:
    """Gradients for ``model.parameters()`` given dL/dR from a train-mode forward."""

    grads_per_layer: List[List[np.ndarray]] = []
    g = grad_out if grad_out.ndim == 4 else grad_out[None]
    last = len(model.layers) - 1
    for index in range(last, -1, -1):
        layer = model.layers[index]
        entry = cache.layers[index]
        layer_grads: List[np.ndarray] = []
        if index != last:
            g = relu_backward(g, entry.pre_relu)
            if layer.bn is not None:
                if entry.bn_cache is None:
                    raise ValueError("backward requires a train-mode forward cache")
                g, grad_gamma, grad_beta = batchnorm_backward(g, entry.bn_cache)
                layer_grads = [grad_gamma, grad_beta]
        g_in, grad_w, grad_b = conv2d_backward(
            g, entry.input, layer.weights, need_input_grad=index > 0
        )
        grads_per_layer.append([grad_w, grad_b, *layer_grads])
        g = g_in

    grads: List[np.ndarray] = []
    for layer_grads in reversed(grads_per_layer):
        grads.extend(layer_grads)
    return grads


def commit_bn_states(model: Model, states: List[BNState]) -> None:
    """Install running statistics produced by a train-mode forward."""
    for bn, state in zip(model.bn_layers(), states, strict=True):
        bn.state = state


def restore(model: Model, y: np.ndarray) -> np.ndarray:
    """``y - R(y)`` in infer mode; values are not clamped."""
    residual = forward_residual(model, y, "infer")
    return y - residual

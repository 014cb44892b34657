"""ECNDNet and its ablation variants as an explicit layer schedule.

The network maps a one-channel noisy image to a one-channel prediction.  For
the residual variants the prediction is the noise map and the clean estimate
is ``noisy - prediction``; CRNet has no skip and predicts the clean image.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from . import layers as L
from .errors import ConfigError, ShapeError, StateError
from .tensor import DTYPE, check_tensor4

CANONICAL_DEPTH = 17
CANONICAL_DILATED = (2, 5, 9, 12)
DILATION = 2

# Per-layer seed domain so that every variant draws identical conv weights.
_INIT_DOMAIN = 0x1A17


class Variant(enum.IntEnum):
    CRNET = 0
    CRRNET = 1
    CRRBNET = 2
    ECNDNET = 3

    @property
    def residual(self) -> bool:
        return self is not Variant.CRNET

    @property
    def batchnorm(self) -> bool:
        return self in (Variant.CRRBNET, Variant.ECNDNET)

    @property
    def dilated(self) -> bool:
        return self is Variant.ECNDNET

    @property
    def label(self) -> str:
        return {0: "CRNet", 1: "CRRNet", 2: "CRRBNet", 3: "ECNDNet"}[int(self)]

    @classmethod
    def parse(cls, name) -> "Variant":
        if isinstance(name, Variant):
            return name
        try:
            return cls[str(name).upper()]
        except KeyError:
            raise ConfigError(f"unknown variant {name!r}; expected one of crnet, crrnet, crrbnet, ecndnet") from None


class LayerKind(enum.IntEnum):
    CONV_RELU = 0
    CONV_BN_RELU = 1
    DILATED_CONV_BN_RELU = 2
    CONV = 3

    @property
    def has_bn(self) -> bool:
        return self in (LayerKind.CONV_BN_RELU, LayerKind.DILATED_CONV_BN_RELU)

    @property
    def has_relu(self) -> bool:
        return self is not LayerKind.CONV

    @property
    def label(self) -> str:
        return {0: "Conv+ReLU", 1: "Conv+BN+ReLU", 2: "DilatedConv+BN+ReLU", 3: "Conv"}[int(self)]


@dataclass(frozen=True)
class LayerSpec:
    kind: LayerKind
    dilation: int
    in_channels: int
    out_channels: int

    @property
    def has_bias(self) -> bool:
        return not self.kind.has_bn


def dilated_positions(depth: int) -> tuple[int, ...]:
    """1-based indices of the dilated layers for a given depth.

    Depth 17 gives the canonical 2, 5, 9, 12.  Other depths keep the same
    relative positions, rounded half-up and restricted to the BN block.
    """
    if depth == CANONICAL_DEPTH:
        return CANONICAL_DILATED
    picked = []
    for p in CANONICAL_DILATED:
        k = int(np.floor(p * depth / CANONICAL_DEPTH + 0.5))
        k = min(max(k, 2), depth - 2)
        if 2 <= k <= depth - 2 and k not in picked:
            picked.append(k)
    return tuple(picked)


@dataclass(frozen=True)
class ArchitectureSpec:
    variant: Variant
    depth: int
    width: int
    layers: tuple[LayerSpec, ...]

    def __post_init__(self):
        if len(self.layers) != self.depth or self.depth < 1:
            raise ConfigError(f"depth {self.depth} does not match {len(self.layers)} layer descriptors")
        if self.layers[0].in_channels != 1 or self.layers[-1].out_channels != 1:
            raise ConfigError("the first layer must read 1 channel and the last must write 1 channel")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_channels != b.in_channels:
                raise ConfigError("consecutive layers disagree on channel count")

    @classmethod
    def for_variant(cls, variant, depth: int = CANONICAL_DEPTH, width: int = 64) -> "ArchitectureSpec":
        variant = Variant.parse(variant)
        if depth < 3:
            raise ConfigError(f"depth must be at least 3, got {depth}")
        if width < 1:
            raise ConfigError(f"width must be at least 1, got {width}")
        dilated = dilated_positions(depth) if variant.dilated else ()
        specs = []
        for k in range(1, depth + 1):
            cin = 1 if k == 1 else width
            cout = 1 if k == depth else width
            if k == depth:
                kind, dil = LayerKind.CONV, 1
            elif k == 1 or k == depth - 1 or not variant.batchnorm:
                kind, dil = LayerKind.CONV_RELU, 1
            elif k in dilated:
                kind, dil = LayerKind.DILATED_CONV_BN_RELU, DILATION
            else:
                kind, dil = LayerKind.CONV_BN_RELU, 1
            specs.append(LayerSpec(kind, dil, cin, cout))
        return cls(variant, depth, width, tuple(specs))

    @classmethod
    def single_conv(cls, dilation: int = 1) -> "ArchitectureSpec":
        """Degenerate one-layer network: a bare 1->1 convolution with bias."""
        return cls(Variant.CRNET, 1, 1, (LayerSpec(LayerKind.CONV, dilation, 1, 1),))


def receptive_fields(spec: ArchitectureSpec) -> list[int]:
    fields, rf = [], 1
    for layer in spec.layers:
        rf += 2 * layer.dilation
        fields.append(rf)
    return fields


def param_count(spec: ArchitectureSpec) -> int:
    """Learnable parameters: conv weights, biases and BN scale/shift (running stats excluded)."""
    total = 0
    for layer in spec.layers:
        total += layer.out_channels * layer.in_channels * L.KERNEL * L.KERNEL
        total += layer.out_channels if layer.has_bias else 0
        total += 2 * layer.out_channels if layer.kind.has_bn else 0
    return total


@dataclass
class Layer:
    spec: LayerSpec
    conv: L.Conv2dParams
    bn: Optional[L.BatchNormParams] = None


@dataclass
class Model:
    spec: ArchitectureSpec
    layers: list[Layer]
    # Bumped by every parameter update; caches remember the value they saw.
    version: int = field(default=0, compare=False)

    @property
    def variant(self) -> Variant:
        return self.spec.variant

    def parameters(self) -> Iterator[tuple[str, np.ndarray]]:
        """Learnable arrays in checkpoint declaration order."""
        for i, layer in enumerate(self.layers):
            yield f"{i}.weights", layer.conv.weights
            if layer.conv.bias is not None:
                yield f"{i}.bias", layer.conv.bias
            if layer.bn is not None:
                yield f"{i}.gamma", layer.bn.gamma
                yield f"{i}.beta", layer.bn.beta

    def parameter_dict(self) -> dict[str, np.ndarray]:
        return dict(self.parameters())

    def num_parameters(self) -> int:
        return sum(a.size for _, a in self.parameters())

    def target(self, noisy: np.ndarray, clean: np.ndarray) -> np.ndarray:
        """What the network output is trained to match."""
        return noisy - clean if self.variant.residual else clean

    def zero_last_layer(self) -> None:
        last = self.layers[-1].conv
        last.weights[...] = 0
        if last.bias is not None:
            last.bias[...] = 0
        self.version += 1


def build_model(spec: ArchitectureSpec, seed: int = 0, dtype=DTYPE, bn_momentum: float = 0.9, bn_eps: float = 1e-5) -> Model:
    layers = []
    for i, ls in enumerate(spec.layers):
        w = L.he_init(ls.out_channels, ls.in_channels, [seed, _INIT_DOMAIN, i], dtype=dtype)
        bias = np.zeros(ls.out_channels, dtype) if ls.has_bias else None
        bn = L.BatchNormParams.fresh(ls.out_channels, bn_momentum, bn_eps, dtype) if ls.kind.has_bn else None
        layers.append(Layer(ls, L.Conv2dParams(w, bias, ls.dilation), bn))
    return Model(spec, layers)


def build_variant(variant, depth: int = CANONICAL_DEPTH, width: int = 64, seed: int = 0, dtype=DTYPE) -> Model:
    return build_model(ArchitectureSpec.for_variant(variant, depth, width), seed, dtype)


@dataclass
class ForwardCaches:
    version: int
    per_layer: list[tuple]


def forward(model: Model, noisy: np.ndarray, mode: str = "infer"):
    """Run the layer schedule; returns ``(prediction, caches)``.

    ``caches`` is None in infer mode.
    """
    check_tensor4(noisy, "noisy batch")
    if noisy.shape[1] != 1:
        raise ShapeError(f"network input must have 1 channel, got {noisy.shape[1]}")
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    keep = mode == "train"
    per_layer = []
    x = noisy
    for layer in model.layers:
        x, conv_c = L.conv2d_forward(x, layer.conv)
        bn_c = relu_c = None
        if layer.bn is not None:
            x, bn_c = L.batchnorm_forward(x, layer.bn, mode)
        if layer.spec.kind.has_relu:
            x, relu_c = L.relu_forward(x)
        if keep:
            per_layer.append((conv_c, bn_c, relu_c))
    return x, (ForwardCaches(model.version, per_layer) if keep else None)


def backward(model: Model, caches: ForwardCaches, grad_pred: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients for every learnable array, keyed like ``Model.parameters``."""
    if caches is None or caches.version != model.version or len(caches.per_layer) != len(model.layers):
        raise StateError("caches are missing or stale; run a train-mode forward on the current parameters")
    grads = {}
    g = grad_pred
    for i in reversed(range(len(model.layers))):
        layer = model.layers[i]
        conv_c, bn_c, relu_c = caches.per_layer[i]
        if relu_c is not None:
            g = L.relu_backward(g, relu_c)
        if bn_c is not None:
            g, grads[f"{i}.gamma"], grads[f"{i}.beta"] = L.batchnorm_backward(g, bn_c, layer.bn)
        g, grads[f"{i}.weights"], gb = L.conv2d_backward(g, conv_c, layer.conv)
        if gb is not None:
            grads[f"{i}.bias"] = gb
    return grads


def denoise(model: Model, noisy: np.ndarray) -> np.ndarray:
    """Clean estimate clipped to [0, 1]; accepts (h, w) images or (n, 1, h, w) batches."""
    squeeze = noisy.ndim == 2
    batch = noisy[None, None] if squeeze else noisy
    pred, _ = forward(model, batch, "infer")
    clean = batch - pred if model.variant.residual else pred
    out = np.clip(clean, 0, 1)
    return out[0, 0] if squeeze else out

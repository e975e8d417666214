"""Stream classifiers, learned late fusion and the two-stream compositions."""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .tensor import (
    DEFAULT_DTYPE,
    Parameter,
    Tensor,
    as_tensor,
    concat,
    conv2d,
    conv_output_size,
    flatten,
    he_uniform,
    matmul,
    relu,
    reshape,
    square,
    tempered_softmax,
    transpose,
    tsum,
)


class ShapeChainError(ValueError):
    pass


class InputShapeError(ValueError):
    pass


class ModalityError(ValueError):
    pass


class CheckpointMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "conv" | "dense"
    channels: int = 0
    kernel: int = 3
    stride: int = 2
    padding: int = 1
    width: int = 0
    activation: str = "relu"  # "relu" | "none"
    in_features: int | None = None  # optional explicit check for dense layers

    def to_dict(self) -> dict:
        if self.kind == "conv":
            return {"kind": "conv", "channels": self.channels, "kernel": self.kernel,
                    "stride": self.stride, "padding": self.padding, "activation": self.activation}
        return {"kind": "dense", "width": self.width, "activation": self.activation}

    @classmethod
    def from_dict(cls, d: dict) -> LayerSpec:
        d = dict(d)
        kind = d.pop("kind", None)
        if kind not in ("conv", "dense"):
            raise ShapeChainError(f"layer kind must be 'conv' or 'dense', got {kind!r}")
        return cls(kind=kind, **d)


def conv(channels: int, kernel: int = 3, stride: int = 2, padding: int = 1) -> LayerSpec:
    return LayerSpec("conv", channels=channels, kernel=kernel, stride=stride, padding=padding)


def dense(width: int, activation: str = "relu") -> LayerSpec:
    return LayerSpec("dense", width=width, activation=activation)


def pan_net_spec(num_classes: int) -> list[LayerSpec]:
    return [conv(8), conv(16), conv(32), conv(32),
            dense(256), dense(128), dense(64), dense(num_classes, "none")]


def ms_net_spec(num_classes: int) -> list[LayerSpec]:
    return [conv(16), conv(32), conv(32), dense(128), dense(64), dense(num_classes, "none")]


def hs_stream_spec(num_classes: int) -> list[LayerSpec]:
    return [dense(64), dense(32), dense(num_classes, "none")]


def default_stream_spec(input_shape, num_classes: int, modality: int) -> list[LayerSpec]:
    if len(input_shape) == 3:
        return pan_net_spec(num_classes) if modality == 1 else ms_net_spec(num_classes)
    return hs_stream_spec(num_classes)


def reduce_depth(spec: list[LayerSpec], decrements: int) -> list[LayerSpec]:
    """Drop one conv and one hidden dense layer per decrement (last ones first)."""
    spec = list(spec)
    for _ in range(decrements):
        convs = [i for i, s in enumerate(spec) if s.kind == "conv"]
        if convs:
            del spec[convs[-1]]
        hidden = [i for i, s in enumerate(spec[:-1]) if s.kind == "dense"]
        if not hidden:
            raise ShapeChainError("cannot reduce depth further: no hidden dense layer left")
        del spec[hidden[-1]]
    return spec


@dataclass
class _Layer:
    spec: LayerSpec
    weight: Parameter
    bias: Parameter
    flatten_before: bool = False


class StreamNet:
    """One modality's classifier: convs, then dense layers, producing logits."""

    def __init__(self, layers: list[_Layer], input_shape: tuple[int, ...], num_classes: int, modality: int):
        self.layers = layers
        self.input_shape = tuple(input_shape)
        self.num_classes = num_classes
        self.modality = modality

    @property
    def modalities(self) -> tuple[int, ...]:
        return (self.modality,)

    @property
    def specs(self) -> list[LayerSpec]:
        return [layer.spec for layer in self.layers]

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for i, layer in enumerate(self.layers):
            yield f"{prefix}layers.{i}.weight", layer.weight
            yield f"{prefix}layers.{i}.bias", layer.bias

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def __call__(self, x) -> Tensor:
        return forward_stream(self, x)


def build_stream(spec, input_shape, num_classes: int, rng: np.random.Generator, modality: int = 1) -> StreamNet:
    """Bind parameters to a layer spec, checking the shape chain as we go."""
    spec = [s if isinstance(s, LayerSpec) else LayerSpec.from_dict(s) for s in spec]
    if not spec:
        raise ShapeChainError("empty layer spec")
    shape = tuple(int(d) for d in input_shape)
    layers: list[_Layer] = []
    seen_dense = False
    for i, s in enumerate(spec):
        if s.activation not in ("relu", "none"):
            raise ShapeChainError(f"layer {i}: unknown activation {s.activation!r}")
        if s.kind == "conv":
            if seen_dense:
                raise ShapeChainError(f"layer {i}: conv layer may not follow a dense layer")
            if len(shape) != 3:
                raise ShapeChainError(f"layer {i}: conv needs a (c,h,w) input, got {shape}")
            if s.channels < 1 or s.kernel < 1 or s.stride < 1 or s.padding < 0:
                raise ShapeChainError(f"layer {i}: invalid conv parameters {s}")
            c, h, w = shape
            if s.kernel > h + 2 * s.padding or s.kernel > w + 2 * s.padding:
                raise ShapeChainError(f"layer {i}: kernel {s.kernel} larger than padded input {shape}")
            fan_in = c * s.kernel * s.kernel
            weight = Parameter(he_uniform(rng, (s.channels, c, s.kernel, s.kernel), fan_in))
            bias = Parameter(np.zeros(s.channels, dtype=DEFAULT_DTYPE))
            layers.append(_Layer(s, weight, bias))
            shape = (s.channels,
                     conv_output_size(h, s.kernel, s.stride, s.padding),
                     conv_output_size(w, s.kernel, s.stride, s.padding))
        elif s.kind == "dense":
            if s.width < 1:
                raise ShapeChainError(f"layer {i}: dense width must be positive")
            flat = int(np.prod(shape))
            if s.in_features is not None and s.in_features != flat:
                raise ShapeChainError(
                    f"layer {i}: dense expects {s.in_features} inputs but the chain provides {flat}"
                )
            weight = Parameter(he_uniform(rng, (flat, s.width), flat))
            bias = Parameter(np.zeros(s.width, dtype=DEFAULT_DTYPE))
            layers.append(_Layer(s, weight, bias, flatten_before=len(shape) > 1))
            shape = (s.width,)
            seen_dense = True
        else:
            raise ShapeChainError(f"layer {i}: unknown kind {s.kind!r}")
    if spec[-1].kind != "dense" or shape != (num_classes,):
        raise ShapeChainError(
            f"layer {len(spec) - 1}: final layer must be dense with width {num_classes}, got output {shape}"
        )
    return StreamNet(layers, tuple(int(d) for d in input_shape), num_classes, modality)


def forward_stream(net: StreamNet, x) -> Tensor:
    x = as_tensor(x)
    if x.shape[1:] != net.input_shape:
        raise InputShapeError(f"stream expects batched input (b, {net.input_shape}), got {x.shape}")
    h = x
    for layer in net.layers:
        s = layer.spec
        if s.kind == "conv":
            h = conv2d(h, layer.weight, stride=s.stride, padding=s.padding)
            h = h + reshape(layer.bias, (1, -1, 1, 1))
        else:
            if layer.flatten_before:
                h = flatten(h)
            h = matmul(h, layer.weight) + layer.bias
        if s.activation == "relu":
            h = relu(h)
    return h


class FusionLayer:
    """Learned linear map from concatenated class probabilities to C scores."""

    def __init__(self, num_classes: int, gamma: float = 0.0, w: np.ndarray | None = None):
        if gamma < 0:
            raise ValueError(f"gamma must be non-negative, got {gamma}")
        if w is None:
            eye = np.eye(num_classes, dtype=DEFAULT_DTYPE)
            w = np.concatenate([eye, eye], axis=1)
        w = np.asarray(w, dtype=DEFAULT_DTYPE)
        if w.shape != (num_classes, 2 * num_classes):
            raise ShapeChainError(f"fusion weights must be {num_classes}x{2 * num_classes}, got {w.shape}")
        self.w = Parameter(w)
        self.gamma = gamma
        self.num_classes = num_classes

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        yield f"{prefix}w", self.w

    def parameters(self) -> list[Parameter]:
        return [self.w]

    def regularizer(self) -> Tensor:
        """gamma * sum(w^2)."""
        return tsum(square(self.w)) * float(self.gamma)


def fuse(p1, p2, fusion: FusionLayer) -> Tensor:
    p1, p2 = as_tensor(p1), as_tensor(p2)
    c = fusion.num_classes
    if p1.shape != p2.shape or p1.data.ndim != 2 or p1.shape[1] != c:
        raise ShapeChainError(f"fuse expects two (b, {c}) inputs, got {p1.shape} and {p2.shape}")
    p = concat([p1, p2], axis=1)
    return matmul(p, transpose(fusion.w))


class TwoStreamNet:
    """Both streams softmaxed, concatenated and fused (the teacher-bearing model)."""

    modalities = (1, 2)

    def __init__(self, stream1: StreamNet, stream2: StreamNet, fusion: FusionLayer):
        if stream1.num_classes != stream2.num_classes or fusion.num_classes != stream1.num_classes:
            raise ShapeChainError("streams and fusion layer disagree on the number of classes")
        self.stream1, self.stream2, self.fusion = stream1, stream2, fusion
        self.num_classes = stream1.num_classes

    def named_parameters(self) -> Iterator[tuple[str, Parameter]]:
        yield from self.stream1.named_parameters("stream1.")
        yield from self.stream2.named_parameters("stream2.")
        yield from self.fusion.named_parameters("fusion.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def __call__(self, x1, x2) -> Tensor:
        return forward_two_stream(self, x1, x2)


def forward_two_stream(net: TwoStreamNet, x1, x2) -> Tensor:
    p1 = tempered_softmax(forward_stream(net.stream1, x1), 1.0)
    p2 = tempered_softmax(forward_stream(net.stream2, x2), 1.0)
    return fuse(p1, p2, net.fusion)


class HallucinatedTwoStreamNet:
    """Pseudo two-stream model: the available modality feeds both its own
    stream and the hallucination stream, which occupies the missing slot."""

    def __init__(self, available: StreamNet, hall: StreamNet, fusion: FusionLayer, missing: int):
        if missing not in (1, 2):
            raise ModalityError(f"missing modality must be 1 or 2, got {missing}")
        if available.input_shape != hall.input_shape:
            raise ShapeChainError(
                f"hallucination stream input {hall.input_shape} differs from available stream {available.input_shape}"
            )
        self.available, self.hall, self.fusion = available, hall, fusion
        self.missing = missing
        self.num_classes = available.num_classes

    @property
    def modalities(self) -> tuple[int, ...]:
        return (3 - self.missing,)

    def named_parameters(self) -> Iterator[tuple[str, Parameter]]:
        yield from self.available.named_parameters("available.")
        yield from self.hall.named_parameters("hall.")
        yield from self.fusion.named_parameters("fusion.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def __call__(self, x) -> Tensor:
        p_avail = tempered_softmax(forward_stream(self.available, x), 1.0)
        p_hall = tempered_softmax(forward_stream(self.hall, x), 1.0)
        if self.missing == 2:
            return fuse(p_avail, p_hall, self.fusion)
        return fuse(p_hall, p_avail, self.fusion)


def set_frozen(net, flag: bool) -> None:
    for p in net.parameters():
        p.frozen = flag


def predict(logits) -> np.ndarray:
    """Per-row argmax; ties go to the lowest index."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    if data.ndim == 1:
        return np.int64(np.argmax(data))
    return np.argmax(data, axis=-1)


def state_dict(net) -> dict[str, np.ndarray]:
    return {name: p.data.copy() for name, p in net.named_parameters()}


def load_state_dict(net, state: dict[str, np.ndarray]) -> None:
    params = dict(net.named_parameters())
    if set(params) != set(state):
        missing = sorted(set(params) - set(state))
        extra = sorted(set(state) - set(params))
        raise CheckpointMismatchError(f"parameter names differ: missing={missing} unexpected={extra}")
    for name, p in params.items():
        value = np.asarray(state[name])
        if value.shape != p.shape:
            raise CheckpointMismatchError(f"{name}: checkpoint shape {value.shape} != model shape {p.shape}")
        p.data[...] = value


def clone(net):
    """Independent deep copy with the same parameter values and freeze flags."""
    return copy.deepcopy(net)

"""Typed network graph, the navigation CNN topology, and workload accounting.

The graph is a trunk of feature layers followed by two scalar heads: a
linear steering regressor and a collision classifier finished by a
sigmoid.  Shapes are validated at construction, so an inconsistent graph
cannot be represented.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fxp import Q5_11, QFormat


class GraphError(ValueError):
    """Structurally invalid network description."""


@dataclass(frozen=True)
class TensorShape:
    channels: int
    height: int
    width: int

    def __post_init__(self) -> None:
        if min(self.channels, self.height, self.width) < 1:
            raise GraphError(f"all dimensions must be >= 1, got {self}")

    @property
    def elements(self) -> int:
        return self.channels * self.height * self.width

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.channels, self.height, self.width)


@dataclass
class FloatTensor:
    """Dense row-major (c, h, w) float64 activation or parameter block."""

    shape: TensorShape
    data: np.ndarray

    def __post_init__(self) -> None:
        self.data = np.ascontiguousarray(self.data, dtype=np.float64)
        if self.data.shape != self.shape.as_tuple():
            raise GraphError(f"data shape {self.data.shape} != {self.shape.as_tuple()}")


@dataclass
class FxpTensor:
    """Dense row-major (c, h, w) int16 raw block carrying one QFormat."""

    shape: TensorShape
    data: np.ndarray
    fmt: QFormat

    def __post_init__(self) -> None:
        self.data = np.ascontiguousarray(self.data, dtype=np.int16)
        if self.data.shape != self.shape.as_tuple():
            raise GraphError(f"data shape {self.data.shape} != {self.shape.as_tuple()}")

    def to_float(self) -> FloatTensor:
        return FloatTensor(self.shape, self.data.astype(np.float64) * self.fmt.step)


@dataclass
class BNParams:
    """Per-channel normalization parameters.

    bn_shift is the additive shift of the normalization layer (its beta);
    named this way to avoid clashing with the yaw-smoothing factor of the
    control law.  sigma is a standard deviation, strictly positive.
    """

    gamma: np.ndarray
    bn_shift: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self) -> None:
        arrays = []
        for name in ("gamma", "bn_shift", "mu", "sigma"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            setattr(self, name, arr)
            arrays.append(arr)
        n = arrays[0].shape
        if any(a.shape != n or a.ndim != 1 for a in arrays):
            raise GraphError("normalization parameter arrays must be 1-D and equally sized")
        if np.any(self.sigma <= 0):
            raise GraphError("sigma must be strictly positive")

    @property
    def channels(self) -> int:
        return len(self.gamma)


@dataclass
class Conv2D:
    kernel_h: int
    kernel_w: int
    stride: int
    padding: int
    in_ch: int
    out_ch: int
    weights: np.ndarray  # (out_ch, in_ch, kh, kw)
    bias: np.ndarray  # (out_ch,)
    weight_fmt: QFormat | None = None
    weights_q: np.ndarray | None = None  # int16 raws, present iff quantized
    out_fmt: QFormat | None = None  # activation format, present iff quantized

    def __post_init__(self) -> None:
        self.weights = np.ascontiguousarray(self.weights, dtype=np.float64)
        self.bias = np.ascontiguousarray(self.bias, dtype=np.float64)
        expect = (self.out_ch, self.in_ch, self.kernel_h, self.kernel_w)
        if self.weights.shape != expect:
            raise GraphError(f"conv weights {self.weights.shape} != {expect}")
        if self.bias.shape != (self.out_ch,):
            raise GraphError(f"conv bias {self.bias.shape} != ({self.out_ch},)")
        if self.weights_q is not None:
            self.weights_q = np.ascontiguousarray(self.weights_q, dtype=np.int16)
            if self.weights_q.shape != expect:
                raise GraphError("quantized weights shape mismatch")

    @property
    def fan_in(self) -> int:
        return self.in_ch * self.kernel_h * self.kernel_w


@dataclass
class MaxPool:
    """2x2 max pooling with stride 2; requires even spatial dims."""


@dataclass
class ReLUQuant:
    """Quantization-aware ReLU: max(0, x) clamped to out_fmt's upper bound."""

    out_fmt: QFormat = Q5_11


@dataclass
class BatchNorm:
    params: BNParams


@dataclass
class FullyConnected:
    in_dim: int
    out_dim: int
    weights: np.ndarray  # (out_dim, in_dim)
    bias: np.ndarray  # (out_dim,)
    weight_fmt: QFormat | None = None
    weights_q: np.ndarray | None = None
    out_fmt: QFormat | None = None

    def __post_init__(self) -> None:
        self.weights = np.ascontiguousarray(self.weights, dtype=np.float64)
        self.bias = np.ascontiguousarray(self.bias, dtype=np.float64)
        if self.weights.shape != (self.out_dim, self.in_dim):
            raise GraphError(f"fc weights {self.weights.shape} != ({self.out_dim}, {self.in_dim})")
        if self.bias.shape != (self.out_dim,):
            raise GraphError(f"fc bias {self.bias.shape} != ({self.out_dim},)")
        if self.weights_q is not None:
            self.weights_q = np.ascontiguousarray(self.weights_q, dtype=np.int16)
            if self.weights_q.shape != (self.out_dim, self.in_dim):
                raise GraphError("quantized weights shape mismatch")

    @property
    def fan_in(self) -> int:
        return self.in_dim


@dataclass
class Sigmoid:
    pass


@dataclass
class ResBlock:
    """Residual block: sum of a main and a bypass branch.

    post, when present, is a trailing quantizing ReLU applied to the sum.
    Blocks that feed a later normalization layer must not carry one,
    otherwise the normalization could no longer be folded upstream
    exactly.
    """

    main: list = field(default_factory=list)
    bypass: list = field(default_factory=list)
    post: ReLUQuant | None = None


LayerSpec = Conv2D | MaxPool | ReLUQuant | BatchNorm | FullyConnected | Sigmoid | ResBlock


def conv_output_hw(h: int, w: int, kernel_h: int, kernel_w: int, stride: int, padding: int) -> tuple[int, int]:
    out_h = (h + 2 * padding - kernel_h) // stride + 1
    out_w = (w + 2 * padding - kernel_w) // stride + 1
    if out_h < 1 or out_w < 1:
        raise GraphError(f"kernel {kernel_h}x{kernel_w} does not fit input {h}x{w}")
    return out_h, out_w


def layer_output_shape(layer: LayerSpec, in_shape: TensorShape) -> TensorShape:
    """Shape inference for a single layer; raises GraphError on mismatch."""
    if isinstance(layer, Conv2D):
        if in_shape.channels != layer.in_ch:
            raise GraphError(f"conv expects {layer.in_ch} channels, got {in_shape.channels}")
        oh, ow = conv_output_hw(
            in_shape.height, in_shape.width, layer.kernel_h, layer.kernel_w, layer.stride, layer.padding
        )
        return TensorShape(layer.out_ch, oh, ow)
    if isinstance(layer, MaxPool):
        if in_shape.height % 2 or in_shape.width % 2:
            raise GraphError(f"pooling requires even spatial dims, got {in_shape}")
        return TensorShape(in_shape.channels, in_shape.height // 2, in_shape.width // 2)
    if isinstance(layer, ReLUQuant):
        return in_shape
    if isinstance(layer, BatchNorm):
        if layer.params.channels != in_shape.channels:
            raise GraphError(
                f"norm over {layer.params.channels} channels applied to {in_shape.channels}"
            )
        return in_shape
    if isinstance(layer, ResBlock):
        main_shape = in_shape
        for sub in layer.main:
            main_shape = layer_output_shape(sub, main_shape)
        bypass_shape = in_shape
        for sub in layer.bypass:
            bypass_shape = layer_output_shape(sub, bypass_shape)
        if main_shape != bypass_shape:
            raise GraphError(f"branch shapes differ: {main_shape} vs {bypass_shape}")
        return main_shape
    if isinstance(layer, FullyConnected):
        if in_shape.elements != layer.in_dim:
            raise GraphError(f"fc expects {layer.in_dim} inputs, got {in_shape.elements}")
        return TensorShape(layer.out_dim, 1, 1)
    if isinstance(layer, Sigmoid):
        return in_shape
    raise GraphError(f"unknown layer kind {type(layer).__name__}")


@dataclass
class NetworkGraph:
    input_shape: TensorShape
    layers: list
    heads: dict

    def __post_init__(self) -> None:
        self._trunk_end, self._trunk_shape = self._validate()

    @property
    def trunk_end(self) -> int:
        """Index of the first head layer; layers before it form the trunk."""
        return self._trunk_end

    @property
    def trunk_output_shape(self) -> TensorShape:
        return self._trunk_shape

    def _validate(self) -> tuple[int, TensorShape]:
        shape = self.input_shape
        trunk_end = None
        for i, layer in enumerate(self.layers):
            if isinstance(layer, (FullyConnected, Sigmoid)):
                trunk_end = i
                break
            shape = layer_output_shape(layer, shape)
        if trunk_end is None:
            raise GraphError("graph has no head layers")

        fc_indices = []
        sigmoid_idx = None
        for i in range(trunk_end, len(self.layers)):
            layer = self.layers[i]
            if isinstance(layer, FullyConnected):
                layer_output_shape(layer, shape)
                if layer.out_dim != 1:
                    raise GraphError("head outputs must be scalar")
                fc_indices.append(i)
            elif isinstance(layer, Sigmoid):
                if sigmoid_idx is not None:
                    raise GraphError("more than one sigmoid head")
                if not fc_indices or i != fc_indices[-1] + 1:
                    raise GraphError("sigmoid must directly follow the collision head")
                sigmoid_idx = i
            else:
                raise GraphError("only scalar heads may follow the trunk")
        if len(fc_indices) != 2 or sigmoid_idx is None:
            raise GraphError("expected exactly two scalar heads, one through a sigmoid")

        steer = self.heads.get("steer")
        collision = self.heads.get("collision")
        if sigmoid_idx != collision:
            raise GraphError(f"collision head index {collision} must point at the sigmoid")
        if steer not in fc_indices or steer == sigmoid_idx - 1:
            raise GraphError("steer head must be the linear scalar output")
        return trunk_end, shape


def _f32(x: np.ndarray) -> np.ndarray:
    # Keep parameters exactly representable in the on-disk float32 blobs.
    return x.astype(np.float32).astype(np.float64)


def _he_conv(rng: np.random.Generator, out_ch: int, in_ch: int, kh: int, kw: int) -> np.ndarray:
    std = np.sqrt(2.0 / (in_ch * kh * kw))
    return _f32(rng.normal(0.0, std, size=(out_ch, in_ch, kh, kw)))


def _random_bn(rng: np.random.Generator, ch: int) -> BNParams:
    # gamma kept positive so normalization commutes with max pooling.
    return BNParams(
        gamma=_f32(rng.uniform(0.7, 1.3, size=ch)),
        bn_shift=_f32(rng.normal(0.0, 0.2, size=ch)),
        mu=_f32(rng.normal(0.0, 0.2, size=ch)),
        sigma=_f32(rng.uniform(0.8, 1.25, size=ch)),
    )


def _res_block(rng: np.random.Generator, in_ch: int, out_ch: int, with_bn: bool) -> ResBlock:
    conv_a = Conv2D(3, 3, 2, 1, in_ch, out_ch, _he_conv(rng, out_ch, in_ch, 3, 3), np.zeros(out_ch))
    conv_b = Conv2D(3, 3, 1, 1, out_ch, out_ch, _he_conv(rng, out_ch, out_ch, 3, 3), np.zeros(out_ch))
    bypass = Conv2D(
        1, 1, 2, 0, in_ch, out_ch,
        _he_conv(rng, out_ch, in_ch, 1, 1),
        _f32(rng.normal(0.0, 0.05, size=out_ch)),
    )
    if with_bn:
        main = [
            BatchNorm(_random_bn(rng, in_ch)),
            ReLUQuant(),
            conv_a,
            BatchNorm(_random_bn(rng, out_ch)),
            ReLUQuant(),
            conv_b,
        ]
    else:
        main = [ReLUQuant(), conv_a, ReLUQuant(), conv_b]
    return ResBlock(main=main, bypass=[bypass], post=None)


def build_dronet(seed: int = 0, with_bn: bool = True) -> NetworkGraph:
    """The fixed navigation topology with randomly initialized parameters.

    Input is one 200x200 grayscale channel.  A 5x5 stride-2 stem conv
    (32 channels) and a 2x2 max pool feed three residual blocks with
    channel progression 32 -> 32 -> 64 -> 128, spatial chain
    200 -> 100 -> 50 -> 25 -> 13 -> 7, then a flatten to 6272 and two
    scalar heads.  No trained weights ship with this package; parameters
    are He-scaled random draws so activation ranges stay in +-16.
    """
    rng = np.random.default_rng(seed)
    conv1 = Conv2D(5, 5, 2, 2, 1, 32, _he_conv(rng, 32, 1, 5, 5), np.zeros(32))
    layers: list = [
        conv1,
        MaxPool(),
        _res_block(rng, 32, 32, with_bn),
        _res_block(rng, 32, 64, with_bn),
        _res_block(rng, 64, 128, with_bn),
        ReLUQuant(),
        FullyConnected(6272, 1, _f32(rng.normal(0.0, np.sqrt(1.0 / 6272), size=(1, 6272))), np.zeros(1)),
        FullyConnected(6272, 1, _f32(rng.normal(0.0, np.sqrt(1.0 / 6272), size=(1, 6272))), np.zeros(1)),
        Sigmoid(),
    ]
    return NetworkGraph(
        input_shape=TensorShape(1, 200, 200),
        layers=layers,
        heads={"steer": 6, "collision": 8},
    )


def _iter_compute_layers(layer: LayerSpec, in_shape: TensorShape, prefix: str):
    """Yield (layer_id, layer, in_shape, out_shape) for conv/pool/fc layers."""
    if isinstance(layer, ResBlock):
        shape = in_shape
        for j, sub in enumerate(layer.main):
            yield from _iter_compute_layers(sub, shape, f"{prefix}.main{j}")
            shape = layer_output_shape(sub, shape)
        shape = in_shape
        for j, sub in enumerate(layer.bypass):
            yield from _iter_compute_layers(sub, shape, f"{prefix}.bypass{j}")
            shape = layer_output_shape(sub, shape)
    elif isinstance(layer, (Conv2D, FullyConnected, MaxPool)):
        yield prefix, layer, in_shape, layer_output_shape(layer, in_shape)


def iter_compute_layers(g: NetworkGraph):
    """All compute layers of the graph with stable ids and resolved shapes."""
    shape = g.input_shape
    for i, layer in enumerate(g.layers):
        if isinstance(layer, Sigmoid):
            continue
        if isinstance(layer, FullyConnected):
            # Heads consume the trunk output, not each other.
            yield from _iter_compute_layers(layer, g.trunk_output_shape, f"layer{i}")
            continue
        yield from _iter_compute_layers(layer, shape, f"layer{i}")
        shape = layer_output_shape(layer, shape)


def mac_count(g: NetworkGraph) -> int:
    """Multiply-accumulate operations of one inference pass.

    Convolutions contribute out_elements * (kh*kw*in_ch); fully connected
    layers out_dim * in_dim.  Pooling and activations are excluded.
    """
    total = 0
    for _, layer, _, out_shape in iter_compute_layers(g):
        if isinstance(layer, Conv2D):
            total += out_shape.elements * layer.fan_in
        elif isinstance(layer, FullyConnected):
            total += layer.out_dim * layer.in_dim
    return total


def param_count(g: NetworkGraph) -> int:
    """Deployable parameter count: conv/fc weights and biases.

    Normalization parameters are excluded; they fold into the adjacent
    convolutions before deployment.
    """
    total = 0
    for _, layer, _, _ in iter_compute_layers(g):
        if isinstance(layer, (Conv2D, FullyConnected)):
            total += layer.weights.size + layer.bias.size
    return total


def model_bytes_16bit(g: NetworkGraph) -> int:
    return 2 * param_count(g)


def _layers_equal(a: LayerSpec, b: LayerSpec) -> bool:
    if type(a) is not type(b):
        return False
    if isinstance(a, Conv2D):
        return (
            (a.kernel_h, a.kernel_w, a.stride, a.padding, a.in_ch, a.out_ch)
            == (b.kernel_h, b.kernel_w, b.stride, b.padding, b.in_ch, b.out_ch)
            and np.array_equal(a.weights, b.weights)
            and np.array_equal(a.bias, b.bias)
            and a.weight_fmt == b.weight_fmt
            and a.out_fmt == b.out_fmt
            and ((a.weights_q is None) == (b.weights_q is None))
            and (a.weights_q is None or np.array_equal(a.weights_q, b.weights_q))
        )
    if isinstance(a, FullyConnected):
        return (
            (a.in_dim, a.out_dim) == (b.in_dim, b.out_dim)
            and np.array_equal(a.weights, b.weights)
            and np.array_equal(a.bias, b.bias)
            and a.weight_fmt == b.weight_fmt
            and a.out_fmt == b.out_fmt
            and ((a.weights_q is None) == (b.weights_q is None))
            and (a.weights_q is None or np.array_equal(a.weights_q, b.weights_q))
        )
    if isinstance(a, ReLUQuant):
        return a.out_fmt == b.out_fmt
    if isinstance(a, BatchNorm):
        return all(
            np.array_equal(getattr(a.params, f), getattr(b.params, f))
            for f in ("gamma", "bn_shift", "mu", "sigma")
        )
    if isinstance(a, ResBlock):
        if len(a.main) != len(b.main) or len(a.bypass) != len(b.bypass):
            return False
        if (a.post is None) != (b.post is None):
            return False
        if a.post is not None and not _layers_equal(a.post, b.post):
            return False
        return all(_layers_equal(x, y) for x, y in zip(a.main, b.main)) and all(
            _layers_equal(x, y) for x, y in zip(a.bypass, b.bypass)
        )
    return True  # MaxPool, Sigmoid carry no state


def networks_equal(a: NetworkGraph, b: NetworkGraph) -> bool:
    """Structural and bit-exact parameter equality."""
    return (
        a.input_shape == b.input_shape
        and a.heads == b.heads
        and len(a.layers) == len(b.layers)
        and all(_layers_equal(x, y) for x, y in zip(a.layers, b.layers))
    )

"""Reference float and deterministic fixed-point layer kernels.

Float mode accumulates in double precision.  Fixed-point mode gathers
int16 products into exact int64 accumulators (biases enter at the
accumulator scale) and rounds exactly once per output through
fxp.requantize_array, so results are bit-identical for any evaluation
order, tiling, or worker count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import fxp
from .fxp import MAX_EXACT_FAN_IN, QFormat
from .model import (
    Conv2D,
    FloatTensor,
    FullyConnected,
    FxpTensor,
    BatchNorm,
    MaxPool,
    NetworkGraph,
    ReLUQuant,
    ResBlock,
    Sigmoid,
    TensorShape,
    layer_output_shape,
)

Tensor = FloatTensor | FxpTensor


class KernelError(ValueError):
    """Shape or format mismatch between a layer and its input."""


def _pad_hw(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    c, h, w = x.shape
    out = np.zeros((c, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
    out[:, padding : padding + h, padding : padding + w] = x
    return out


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, out_h: int, out_w: int) -> np.ndarray:
    """Patch matrix (c*kh*kw, out_h*out_w) from a pre-padded (c, H, W) array."""
    c = xp.shape[0]
    cols = np.empty((c, kh, kw, out_h, out_w), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, i : i + out_h * stride : stride, j : j + out_w * stride : stride]
    return cols.reshape(c * kh * kw, out_h * out_w)


def _bias_raw(bias: np.ndarray, acc_frac_bits: int) -> np.ndarray:
    # Biases are quantized directly at the accumulator scale so the dot
    # product still rounds exactly once.
    return np.rint(bias * float(1 << acc_frac_bits)).astype(np.int64)


def _check_conv_input(input: Tensor, layer: Conv2D) -> None:
    if input.shape.channels != layer.in_ch:
        raise KernelError(f"conv expects {layer.in_ch} channels, got {input.shape.channels}")


def _conv_region_float(x: np.ndarray, layer: Conv2D, row0: int, row1: int, oc0: int, oc1: int) -> np.ndarray:
    out_h, out_w = _conv_out_hw(x.shape[1], x.shape[2], layer)
    xp = _pad_hw(x, layer.padding)
    slab = xp[:, row0 * layer.stride : (row1 - 1) * layer.stride + layer.kernel_h, :]
    cols = _im2col(slab, layer.kernel_h, layer.kernel_w, layer.stride, row1 - row0, out_w)
    w2 = layer.weights[oc0:oc1].reshape(oc1 - oc0, -1)
    out = w2 @ cols + layer.bias[oc0:oc1, None]
    return out.reshape(oc1 - oc0, row1 - row0, out_w)


def _conv_region_fxp(
    raw: np.ndarray, in_fmt: QFormat, layer: Conv2D, row0: int, row1: int, oc0: int, oc1: int
) -> np.ndarray:
    if layer.weights_q is None or layer.weight_fmt is None or layer.out_fmt is None:
        raise KernelError("layer is not quantized; run the deployment toolchain first")
    assert layer.fan_in <= MAX_EXACT_FAN_IN
    out_h, out_w = _conv_out_hw(raw.shape[1], raw.shape[2], layer)
    xp = _pad_hw(raw, layer.padding)
    slab = xp[:, row0 * layer.stride : (row1 - 1) * layer.stride + layer.kernel_h, :]
    cols = _im2col(slab, layer.kernel_h, layer.kernel_w, layer.stride, row1 - row0, out_w).astype(np.int64)
    w2 = layer.weights_q[oc0:oc1].reshape(oc1 - oc0, -1).astype(np.int64)
    acc_frac = layer.weight_fmt.frac_bits + in_fmt.frac_bits
    acc = w2 @ cols + _bias_raw(layer.bias[oc0:oc1], acc_frac)[:, None]
    out_raw, _ = fxp.requantize_array(acc, acc_frac, layer.out_fmt)
    return out_raw.reshape(oc1 - oc0, row1 - row0, out_w)


def _conv_out_hw(h: int, w: int, layer: Conv2D) -> tuple[int, int]:
    return (
        (h + 2 * layer.padding - layer.kernel_h) // layer.stride + 1,
        (w + 2 * layer.padding - layer.kernel_w) // layer.stride + 1,
    )


def conv2d(input: Tensor, layer: Conv2D, mode: str) -> Tensor:
    """Cross-correlation with stride and zero padding."""
    _check_conv_input(input, layer)
    out_h, out_w = _conv_out_hw(input.shape.height, input.shape.width, layer)
    out_shape = TensorShape(layer.out_ch, out_h, out_w)
    if mode == "float":
        x = input.data if isinstance(input, FloatTensor) else input.to_float().data
        return FloatTensor(out_shape, _conv_region_float(x, layer, 0, out_h, 0, layer.out_ch))
    if mode == "fxp":
        if not isinstance(input, FxpTensor):
            raise KernelError("fxp mode requires a quantized input tensor")
        raw = _conv_region_fxp(input.data, input.fmt, layer, 0, out_h, 0, layer.out_ch)
        return FxpTensor(out_shape, raw, layer.out_fmt)
    raise KernelError(f"unknown mode {mode!r}")


def maxpool2x2(input: Tensor) -> Tensor:
    """Each 2x2 block reduced to its maximum; format unchanged."""
    c, h, w = input.shape.as_tuple()
    if h % 2 or w % 2:
        raise KernelError(f"pooling requires even spatial dims, got {h}x{w}")
    out_shape = TensorShape(c, h // 2, w // 2)
    pooled = input.data.reshape(c, h // 2, 2, w // 2, 2).max(axis=(2, 4))
    if isinstance(input, FxpTensor):
        return FxpTensor(out_shape, pooled, input.fmt)
    return FloatTensor(out_shape, pooled)


def relu_quant(input: Tensor, out_fmt: QFormat) -> Tensor:
    """max(0, x) saturated at out_fmt's positive bound.

    In fxp mode this is a pure clamp on raws, which requires the input to
    already carry out_fmt; the deployment toolchain guarantees that.
    """
    if isinstance(input, FxpTensor):
        if input.fmt != out_fmt:
            raise KernelError(f"relu format {out_fmt.name} != input format {input.fmt.name}")
        return FxpTensor(input.shape, np.maximum(input.data, 0), out_fmt)
    return FloatTensor(input.shape, np.clip(input.data, 0.0, out_fmt.max_value))


def _run_chain(x: Tensor, layers: list, mode: str, hook=None, hook_prefix: str = "") -> Tensor:
    for j, layer in enumerate(layers):
        x = run_layer(x, layer, mode)
        if hook is not None:
            hook(f"{hook_prefix}{j}", x)
    return x


def resblock_forward(input: Tensor, rb: ResBlock, mode: str, hook=None, hook_prefix: str = "") -> Tensor:
    """main(input) + bypass(input), then the block's trailing ReLU if any.

    The fxp addition saturates in the shared activation format of the two
    branch outputs.
    """
    main_out = _run_chain(input, rb.main, mode, hook, f"{hook_prefix}.main")
    bypass_out = _run_chain(input, rb.bypass, mode, hook, f"{hook_prefix}.bypass")
    if main_out.shape != bypass_out.shape:
        raise KernelError(f"branch shapes differ: {main_out.shape} vs {bypass_out.shape}")
    if mode == "fxp":
        if main_out.fmt != bypass_out.fmt:
            raise KernelError(
                f"branch formats differ: {main_out.fmt.name} vs {bypass_out.fmt.name}"
            )
        summed, _ = fxp.saturating_add(main_out.data, bypass_out.data)
        out: Tensor = FxpTensor(main_out.shape, summed, main_out.fmt)
    else:
        out = FloatTensor(main_out.shape, main_out.data + bypass_out.data)
    if hook is not None:
        hook(f"{hook_prefix}.sum", out)
    if rb.post is not None:
        out = relu_quant(out, rb.post.out_fmt)
        if hook is not None:
            hook(f"{hook_prefix}.post", out)
    return out


def fully_connected(input: Tensor, layer: FullyConnected, mode: str) -> Tensor:
    if input.shape.elements != layer.in_dim:
        raise KernelError(f"fc expects {layer.in_dim} inputs, got {input.shape.elements}")
    out_shape = TensorShape(layer.out_dim, 1, 1)
    if mode == "float":
        x = input.data if isinstance(input, FloatTensor) else input.to_float().data
        out = layer.weights @ x.reshape(-1) + layer.bias
        return FloatTensor(out_shape, out.reshape(layer.out_dim, 1, 1))
    if mode == "fxp":
        if not isinstance(input, FxpTensor):
            raise KernelError("fxp mode requires a quantized input tensor")
        if layer.weights_q is None or layer.weight_fmt is None or layer.out_fmt is None:
            raise KernelError("layer is not quantized; run the deployment toolchain first")
        assert layer.fan_in <= MAX_EXACT_FAN_IN
        acc_frac = layer.weight_fmt.frac_bits + input.fmt.frac_bits
        acc = layer.weights_q.astype(np.int64) @ input.data.reshape(-1).astype(np.int64)
        acc += _bias_raw(layer.bias, acc_frac)
        raw, _ = fxp.requantize_array(acc, acc_frac, layer.out_fmt)
        return FxpTensor(out_shape, raw.reshape(layer.out_dim, 1, 1), layer.out_fmt)
    raise KernelError(f"unknown mode {mode!r}")


def batch_norm(input: Tensor, layer: BatchNorm, mode: str) -> Tensor:
    """Per-channel affine normalization; float graphs only, folds away before fxp."""
    if mode != "float" or not isinstance(input, FloatTensor):
        raise KernelError("normalization layers exist only in float graphs; fold first")
    p = layer.params
    if p.channels != input.shape.channels:
        raise KernelError(f"norm over {p.channels} channels applied to {input.shape.channels}")
    scale = (p.gamma / p.sigma)[:, None, None]
    shift = (p.bn_shift - p.gamma / p.sigma * p.mu)[:, None, None]
    return FloatTensor(input.shape, input.data * scale + shift)


def sigmoid(x: float) -> float:
    """Numerically stable logistic at reference precision."""
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def run_layer(x: Tensor, layer, mode: str, hook=None, hook_prefix: str = "") -> Tensor:
    if isinstance(layer, Conv2D):
        return conv2d(x, layer, mode)
    if isinstance(layer, MaxPool):
        return maxpool2x2(x)
    if isinstance(layer, ReLUQuant):
        return relu_quant(x, layer.out_fmt)
    if isinstance(layer, BatchNorm):
        return batch_norm(x, layer, mode)
    if isinstance(layer, ResBlock):
        return resblock_forward(x, layer, mode, hook, hook_prefix)
    if isinstance(layer, FullyConnected):
        return fully_connected(x, layer, mode)
    raise KernelError(f"cannot execute layer {type(layer).__name__}")


@dataclass(frozen=True)
class InferenceResult:
    theta_steer: float
    p_coll: float


def _scalar(t: Tensor) -> float:
    if isinstance(t, FxpTensor):
        return float(t.data.reshape(-1)[0]) * t.fmt.step
    return float(t.data.reshape(-1)[0])


def forward_trace(g: NetworkGraph, input: Tensor, mode: str, hook=None) -> InferenceResult:
    """Run the full graph; hook(tensor_id, tensor) sees every activation.

    The two head layers consume the trunk output; the collision logit
    passes through a reference-precision sigmoid on its dequantized
    value, since a single scalar per frame makes precision free.
    """
    if input.shape != g.input_shape:
        raise KernelError(f"input shape {input.shape} != {g.input_shape}")
    if hook is not None:
        hook("input", input)
    x = input
    for i in range(g.trunk_end):
        layer = g.layers[i]
        x = run_layer(x, layer, mode, hook, f"layer{i}")
        if hook is not None:
            hook(f"layer{i}", x)

    head_values: dict[int, Tensor] = {}
    for i in range(g.trunk_end, len(g.layers)):
        layer = g.layers[i]
        if isinstance(layer, FullyConnected):
            head_values[i] = fully_connected(x, layer, mode)
        elif isinstance(layer, Sigmoid):
            logit = _scalar(head_values[i - 1])
            head_values[i] = FloatTensor(TensorShape(1, 1, 1), np.array([[[sigmoid(logit)]]]))
        if hook is not None:
            hook(f"layer{i}", head_values[i])

    theta = _scalar(head_values[g.heads["steer"]])
    p_coll = _scalar(head_values[g.heads["collision"]])
    return InferenceResult(theta_steer=theta, p_coll=p_coll)


def infer(g: NetworkGraph, input: Tensor, mode: str) -> InferenceResult:
    """Steering value (returned unclamped) and collision probability."""
    return forward_trace(g, input, mode)

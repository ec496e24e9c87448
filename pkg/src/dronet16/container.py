"""On-disk model container: manifest.json plus one little-endian weights.bin.

Float parameters are stored as f32le, quantized parameters as q16le raws
with their format recorded in the manifest (never in the blob).  Loading
is a lossless round trip of topology, parameters, Q-formats, and
normalization parameters when present.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .fxp import QFormat, QFormatError
from .model import (
    BatchNorm,
    BNParams,
    Conv2D,
    FullyConnected,
    MaxPool,
    NetworkGraph,
    ReLUQuant,
    ResBlock,
    Sigmoid,
    TensorShape,
)

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
BLOB_NAME = "weights.bin"


class ModelIOError(Exception):
    """Base class for container errors."""


class ManifestError(ModelIOError):
    """Malformed or invalid manifest content."""


class UnknownLayerError(ManifestError):
    """Manifest references a layer kind this build does not know."""


class UnsupportedVersionError(ModelIOError):
    """Container written by an incompatible format version."""


class BlobError(ModelIOError):
    """weights.bin shorter than, or inconsistent with, the manifest."""


class _BlobWriter:
    def __init__(self) -> None:
        self.chunks: list[bytes] = []
        self.offset = 0

    def add(self, array: np.ndarray, dtype: str) -> dict:
        if dtype == "f32le":
            buf = np.ascontiguousarray(array, dtype="<f4").tobytes()
        elif dtype == "q16le":
            buf = np.ascontiguousarray(array, dtype="<i2").tobytes()
        else:
            raise ManifestError(f"unknown blob dtype {dtype}")
        entry = {
            "offset": self.offset,
            "length": len(buf),
            "dtype": dtype,
            "shape": list(array.shape),
        }
        self.chunks.append(buf)
        self.offset += len(buf)
        return entry


class _BlobReader:
    def __init__(self, raw: bytes) -> None:
        self.raw = raw

    def read(self, entry: dict) -> np.ndarray:
        try:
            offset, length = int(entry["offset"]), int(entry["length"])
            dtype, shape = entry["dtype"], tuple(int(s) for s in entry["shape"])
        except (KeyError, TypeError, ValueError) as e:
            raise ManifestError(f"malformed blob entry: {entry}") from e
        if offset < 0 or offset + length > len(self.raw):
            raise BlobError(
                f"blob entry [{offset}, {offset + length}) outside weights.bin of {len(self.raw)} bytes"
            )
        np_dtype = {"f32le": "<f4", "q16le": "<i2"}.get(dtype)
        if np_dtype is None:
            raise ManifestError(f"unknown blob dtype {dtype}")
        arr = np.frombuffer(self.raw, dtype=np_dtype, count=length // np.dtype(np_dtype).itemsize, offset=offset)
        if arr.size != int(np.prod(shape)):
            raise BlobError(f"blob length {length} does not match shape {shape}")
        if dtype == "f32le":
            return arr.reshape(shape).astype(np.float64)
        return arr.reshape(shape).astype(np.int16)


def _fmt_out(fmt: QFormat | None) -> int | None:
    return None if fmt is None else fmt.frac_bits


def _fmt_in(value) -> QFormat | None:
    if value is None:
        return None
    try:
        return QFormat(int(value))
    except (QFormatError, TypeError, ValueError) as e:
        raise ManifestError(f"invalid Q-format frac_bits {value!r}") from e


def _layer_out(layer, blobs: _BlobWriter) -> dict:
    if isinstance(layer, Conv2D):
        if layer.weights_q is not None:
            weights_entry = blobs.add(layer.weights_q, "q16le")
        else:
            weights_entry = blobs.add(layer.weights, "f32le")
        return {
            "kind": "conv2d",
            "kernel": [layer.kernel_h, layer.kernel_w],
            "stride": layer.stride,
            "padding": layer.padding,
            "in_ch": layer.in_ch,
            "out_ch": layer.out_ch,
            "weights": weights_entry,
            "bias": blobs.add(layer.bias, "f32le"),
            "weight_fmt": _fmt_out(layer.weight_fmt),
            "out_fmt": _fmt_out(layer.out_fmt),
        }
    if isinstance(layer, FullyConnected):
        if layer.weights_q is not None:
            weights_entry = blobs.add(layer.weights_q, "q16le")
        else:
            weights_entry = blobs.add(layer.weights, "f32le")
        return {
            "kind": "fully_connected",
            "in_dim": layer.in_dim,
            "out_dim": layer.out_dim,
            "weights": weights_entry,
            "bias": blobs.add(layer.bias, "f32le"),
            "weight_fmt": _fmt_out(layer.weight_fmt),
            "out_fmt": _fmt_out(layer.out_fmt),
        }
    if isinstance(layer, MaxPool):
        return {"kind": "maxpool2x2"}
    if isinstance(layer, ReLUQuant):
        return {"kind": "relu_quant", "out_fmt": _fmt_out(layer.out_fmt)}
    if isinstance(layer, Sigmoid):
        return {"kind": "sigmoid"}
    if isinstance(layer, BatchNorm):
        return {
            "kind": "batch_norm",
            "gamma": blobs.add(layer.params.gamma, "f32le"),
            "bn_shift": blobs.add(layer.params.bn_shift, "f32le"),
            "mu": blobs.add(layer.params.mu, "f32le"),
            "sigma": blobs.add(layer.params.sigma, "f32le"),
        }
    if isinstance(layer, ResBlock):
        return {
            "kind": "resblock",
            "main": [_layer_out(sub, blobs) for sub in layer.main],
            "bypass": [_layer_out(sub, blobs) for sub in layer.bypass],
            "post": None if layer.post is None else _layer_out(layer.post, blobs),
        }
    raise ManifestError(f"cannot serialize layer {type(layer).__name__}")


def _layer_in(entry: dict, blobs: _BlobReader):
    try:
        kind = entry["kind"]
    except (KeyError, TypeError) as e:
        raise ManifestError(f"layer entry without kind: {entry!r}") from e
    if kind == "conv2d":
        weight_fmt = _fmt_in(entry.get("weight_fmt"))
        raw = blobs.read(entry["weights"])
        if raw.dtype == np.int16:
            if weight_fmt is None:
                raise ManifestError("q16le weights require a weight_fmt")
            weights_q, weights = raw, raw.astype(np.float64) * weight_fmt.step
        else:
            weights_q, weights = None, raw
        return Conv2D(
            kernel_h=int(entry["kernel"][0]),
            kernel_w=int(entry["kernel"][1]),
            stride=int(entry["stride"]),
            padding=int(entry["padding"]),
            in_ch=int(entry["in_ch"]),
            out_ch=int(entry["out_ch"]),
            weights=weights,
            bias=blobs.read(entry["bias"]),
            weight_fmt=weight_fmt,
            weights_q=weights_q,
            out_fmt=_fmt_in(entry.get("out_fmt")),
        )
    if kind == "fully_connected":
        weight_fmt = _fmt_in(entry.get("weight_fmt"))
        raw = blobs.read(entry["weights"])
        if raw.dtype == np.int16:
            if weight_fmt is None:
                raise ManifestError("q16le weights require a weight_fmt")
            weights_q, weights = raw, raw.astype(np.float64) * weight_fmt.step
        else:
            weights_q, weights = None, raw
        return FullyConnected(
            in_dim=int(entry["in_dim"]),
            out_dim=int(entry["out_dim"]),
            weights=weights,
            bias=blobs.read(entry["bias"]),
            weight_fmt=weight_fmt,
            weights_q=weights_q,
            out_fmt=_fmt_in(entry.get("out_fmt")),
        )
    if kind == "maxpool2x2":
        return MaxPool()
    if kind == "relu_quant":
        fmt = _fmt_in(entry.get("out_fmt"))
        if fmt is None:
            raise ManifestError("relu_quant requires an out_fmt")
        return ReLUQuant(out_fmt=fmt)
    if kind == "sigmoid":
        return Sigmoid()
    if kind == "batch_norm":
        return BatchNorm(
            BNParams(
                gamma=blobs.read(entry["gamma"]),
                bn_shift=blobs.read(entry["bn_shift"]),
                mu=blobs.read(entry["mu"]),
                sigma=blobs.read(entry["sigma"]),
            )
        )
    if kind == "resblock":
        return ResBlock(
            main=[_layer_in(sub, blobs) for sub in entry["main"]],
            bypass=[_layer_in(sub, blobs) for sub in entry["bypass"]],
            post=None if entry.get("post") is None else _layer_in(entry["post"], blobs),
        )
    raise UnknownLayerError(f"unknown layer kind {kind!r}")


def save_model(g: NetworkGraph, path: str | Path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    blobs = _BlobWriter()
    manifest = {
        "format_version": FORMAT_VERSION,
        "input_shape": list(g.input_shape.as_tuple()),
        "heads": g.heads,
        "layers": [_layer_out(layer, blobs) for layer in g.layers],
    }
    (path / BLOB_NAME).write_bytes(b"".join(blobs.chunks))
    (path / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2) + "\n")


def load_model(path: str | Path) -> NetworkGraph:
    path = Path(path)
    manifest_path = path / MANIFEST_NAME
    blob_path = path / BLOB_NAME
    if not manifest_path.is_file():
        raise ManifestError(f"no {MANIFEST_NAME} in {path}")
    if not blob_path.is_file():
        raise BlobError(f"no {BLOB_NAME} in {path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise ManifestError(f"manifest is not valid JSON: {e}") from e

    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"format_version {version!r}, expected {FORMAT_VERSION}")

    blobs = _BlobReader(blob_path.read_bytes())
    try:
        input_shape = TensorShape(*(int(d) for d in manifest["input_shape"]))
        layers = [_layer_in(entry, blobs) for entry in manifest["layers"]]
        heads = {k: int(v) for k, v in manifest["heads"].items()}
    except ModelIOError:
        raise
    except (KeyError, TypeError, ValueError) as e:
        raise ManifestError(f"malformed manifest: {e}") from e
    return NetworkGraph(input_shape=input_shape, layers=layers, heads=heads)

"""Binary PGM (P5) image input: parsing, center crop, input quantization."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .fxp import Q5_11, quantize_array
from .model import FloatTensor, FxpTensor, TensorShape


class PGMError(ValueError):
    """Not a readable 8-bit binary PGM."""


def load_pgm(path: str | Path) -> np.ndarray:
    """Read an 8-bit binary PGM into a (h, w) uint8 array."""
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P5"):
        raise PGMError(f"{path}: missing P5 magic")
    # Header: magic, width, height, maxval; '#' comments allowed between tokens.
    tokens: list[int] = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise PGMError(f"{path}: truncated header")
        try:
            tokens.append(int(raw[start:pos]))
        except ValueError as e:
            raise PGMError(f"{path}: bad header token {raw[start:pos]!r}") from e
    pos += 1  # single whitespace byte after maxval
    width, height, maxval = tokens
    if maxval > 255 or maxval < 1:
        raise PGMError(f"{path}: only 8-bit images supported, maxval={maxval}")
    data = np.frombuffer(raw, dtype=np.uint8, offset=pos)
    if data.size < width * height:
        raise PGMError(f"{path}: pixel data truncated ({data.size} < {width * height})")
    return data[: width * height].reshape(height, width).copy()


def save_pgm(path: str | Path, image: np.ndarray) -> None:
    image = np.ascontiguousarray(image, dtype=np.uint8)
    if image.ndim != 2:
        raise PGMError("expected a 2-D grayscale array")
    header = f"P5\n{image.shape[1]} {image.shape[0]}\n255\n".encode()
    Path(path).write_bytes(header + image.tobytes())


def center_crop(image: np.ndarray, height: int, width: int) -> np.ndarray:
    h, w = image.shape
    if h < height or w < width:
        raise PGMError(f"image {h}x{w} smaller than crop {height}x{width}")
    top = (h - height) // 2
    left = (w - width) // 2
    return image[top : top + height, left : left + width]


def to_input_tensor(image: np.ndarray, input_shape: TensorShape, mode: str) -> FloatTensor | FxpTensor:
    """Center crop, scale by 1/255 into [0, 1], and quantize for fxp mode.

    The input format is pinned to Q5.11 rather than calibrated, so the
    normalized image always sits well inside the activation range.
    """
    if input_shape.channels != 1:
        raise PGMError("grayscale input expected")
    cropped = center_crop(image, input_shape.height, input_shape.width)
    scaled = cropped.astype(np.float64) / 255.0
    data = scaled[np.newaxis, :, :]
    if mode == "float":
        return FloatTensor(input_shape, data)
    if mode == "fxp":
        raw, _ = quantize_array(data, Q5_11)
        return FxpTensor(input_shape, raw, Q5_11)
    raise ValueError(f"unknown mode {mode!r}")


def random_images(n: int, height: int, width: int, seed: int = 0) -> list[np.ndarray]:
    """Deterministic synthetic 8-bit images for calibration without a dataset."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        base = rng.integers(0, 256, size=(height, width), dtype=np.uint8)
        out.append(base)
    return out

"""File I/O: Middlebury .flo flow files and 8-bit grayscale PNG/PGM images."""
from __future__ import annotations

import struct

import numpy as np
from PIL import Image

from .errors import FlowFileError, InvalidInputError
from .fields import FlowField, GrayImage

FLO_MAGIC = 202021.25
_MAX_FLO_DIM = 10**6


def write_flo(path, flow: FlowField) -> None:
    """Write a flow as little-endian float32: magic, int32 w, int32 h, then
    row-major interleaved (u, v) pairs."""
    h, w = flow.shape
    data = np.empty((h, w, 2), dtype="<f4")
    data[:, :, 0] = flow.u
    data[:, :, 1] = flow.v
    with open(path, "wb") as f:
        f.write(struct.pack("<fii", FLO_MAGIC, w, h))
        f.write(data.tobytes())


def read_flo(path) -> FlowField:
    with open(path, "rb") as f:
        header = f.read(12)
        if len(header) != 12:
            raise FlowFileError(f"{path}: truncated header")
        magic, w, h = struct.unpack("<fii", header)
        if magic != np.float32(FLO_MAGIC):
            raise FlowFileError(f"{path}: bad magic {magic!r}, not a flow file")
        if not (0 < w <= _MAX_FLO_DIM and 0 < h <= _MAX_FLO_DIM):
            raise FlowFileError(f"{path}: implausible dims {w}x{h}")
        payload = f.read(w * h * 2 * 4 + 1)
    if len(payload) != w * h * 2 * 4:
        raise FlowFileError(f"{path}: payload is {len(payload)} bytes, expected {w * h * 8}")
    data = np.frombuffer(payload, dtype="<f4").reshape(h, w, 2)
    return FlowField(data[:, :, 0], data[:, :, 1])


def read_image(path) -> GrayImage:
    """Read a PNG or PGM as grayscale; returns raw 8-bit values (0..255) as floats."""
    try:
        with Image.open(path) as im:
            if im.mode != "L":
                im = im.convert("L")
            arr = np.asarray(im, dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise InvalidInputError(f"{path}: cannot read image ({exc})") from exc
    if arr.ndim != 2:
        raise InvalidInputError(f"{path}: expected a single-channel image")
    return GrayImage(arr)


def write_image(path, image: GrayImage) -> None:
    """Write a [0, 1]-valued image as 8-bit grayscale (format from extension)."""
    data = image.data
    if data.min() < 0.0 or data.max() > 1.0:
        raise InvalidInputError(
            f"expected values in [0, 1], got range [{data.min()}, {data.max()}]"
        )
    quantized = np.clip(np.rint(data * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(quantized, mode="L").save(path)

"""Image persistence: 8-bit PNG and the lossless "IMGF" .f32 dump.

IMGF layout: magic "IMGF", u32 height, u32 width, u32 channels, then
H·W·C little-endian float32 values in row-major order.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ContractError

IMGF_MAGIC = b"IMGF"


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0),
                   0, 255).astype(np.uint8)


def save_png(path, img: np.ndarray) -> None:
    """img: float image in [0,1], H×W×3 or H×W; quantized to 8 bit."""
    arr = to_uint8(img)
    mode = "RGB" if arr.ndim == 3 else "L"
    import io
    buf = io.BytesIO()
    Image.fromarray(arr, mode=mode).save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())


def load_png(path) -> np.ndarray:
    """Returns float64 image in [0,1]; RGB images as H×W×3, grey as H×W."""
    with Image.open(path) as im:
        if im.mode in ("L", "1"):
            arr = np.asarray(im.convert("L"), dtype=np.float64)
        else:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def save_f32(path, img: np.ndarray) -> None:
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.ndim != 3:
        raise ContractError(f"save_f32: expected 2D/3D image, got {arr.ndim}D")
    h, w, c = arr.shape
    payload = struct.pack("<4sIII", IMGF_MAGIC, h, w, c)
    payload += arr.astype("<f4").tobytes(order="C")
    atomic_write_bytes(path, payload)


def load_f32(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != IMGF_MAGIC:
        raise ContractError(f"{path}: not an IMGF file")
    h, w, c = struct.unpack("<III", data[4:16])
    want = 16 + h * w * c * 4
    if len(data) != want:
        raise ContractError(f"{path}: truncated IMGF payload")
    arr = np.frombuffer(data, dtype="<f4", offset=16).reshape(h, w, c)
    return arr.astype(np.float64)

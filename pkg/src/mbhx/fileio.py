"""Bit-exact persistence: PNG images, raw tensor files, checkpoints, manifests.

TensorFile (``.tsr``), all integers little-endian::

    b"MBT1" | rank:u32 | extents:u32*rank | dtype:u32 (1=f32, 2=f64) | payload

Checkpoint (``.ckpt``)::

    b"MBHX" | version:u32 | header_len:u32 | header JSON (utf-8)
    | one TensorFile block per parameter, in header order | crc32:u32

The CRC (IEEE polynomial, as computed by :func:`zlib.crc32`) covers every
byte before it.
"""

from __future__ import annotations

import io
import json
import os
import struct
import zlib
from pathlib import Path
from typing import Any, Mapping

import numpy as np
from PIL import Image

from .compositing import ImageBuffer
from .errors import CorruptionError, FormatError, VersionError

TENSOR_MAGIC = b"MBT1"
CHECKPOINT_MAGIC = b"MBHX"
CHECKPOINT_VERSION = 1
MANIFEST_VERSION = 1

_DTYPE_TAGS = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


# ---------------------------------------------------------------------------
# PNG


def quantize(values: np.ndarray, bits: int) -> np.ndarray:
    scale = (1 << bits) - 1
    dtype = np.uint8 if bits == 8 else np.uint16
    return np.rint(np.asarray(values, dtype=np.float64) * scale).astype(dtype)


def write_image(path, buffer: ImageBuffer) -> None:
    """RGB buffers become 8-bit PNGs, alpha buffers 16-bit grayscale PNGs."""
    if not isinstance(buffer, ImageBuffer):
        buffer = ImageBuffer(buffer)
    if buffer.channels == 3:
        img = Image.fromarray(quantize(buffer.data, 8))
    else:
        img = Image.fromarray(quantize(buffer.data[:, :, 0], 16))
    img.save(path, format="PNG")


def read_image(path) -> ImageBuffer:
    """Decode 8-bit RGB(A) or 8/16-bit grayscale PNGs into an ImageBuffer.

    Grayscale files decode to 1-channel (alpha) buffers; any alpha channel in
    an RGBA file is dropped.
    """
    path = Path(path)
    with Image.open(path) as img:
        if img.format != "PNG":
            raise FormatError(f"{path}: not a PNG file")
        mode = img.mode
        if mode in ("I;16", "I;16B", "I;16L", "I"):
            arr = np.asarray(img).astype(np.float64)
            if arr.max(initial=0) > 65535 or arr.min(initial=0) < 0:
                raise FormatError(f"{path}: unsupported integer range")
            return ImageBuffer(arr / 65535.0)
        if mode == "L":
            return ImageBuffer(np.asarray(img).astype(np.float64) / 255.0)
        if mode in ("RGB", "RGBA", "P"):
            arr = np.asarray(img.convert("RGB")).astype(np.float64)
            return ImageBuffer(arr / 255.0)
    raise FormatError(f"{path}: unsupported PNG mode {mode}")


# ---------------------------------------------------------------------------
# TensorFile


def encode_tensor(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    dtype = arr.dtype.newbyteorder("<")
    if dtype not in _DTYPE_TAGS:
        raise FormatError(f"unsupported tensor dtype {arr.dtype}")
    head = TENSOR_MAGIC + struct.pack(f"<I{arr.ndim}II", arr.ndim, *arr.shape, _DTYPE_TAGS[dtype])
    return head + np.ascontiguousarray(arr, dtype=dtype).tobytes()


def decode_tensor(stream: io.BufferedIOBase) -> np.ndarray:
    magic = stream.read(4)
    if magic != TENSOR_MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}")
    raw = stream.read(4)
    if len(raw) != 4:
        raise FormatError("truncated tensor header")
    (rank,) = struct.unpack("<I", raw)
    if rank > 8:
        raise FormatError(f"implausible tensor rank {rank}")
    raw = stream.read(4 * rank + 4)
    if len(raw) != 4 * rank + 4:
        raise FormatError("truncated tensor header")
    *shape, tag = struct.unpack(f"<{rank}II", raw)
    if tag not in _TAG_DTYPES:
        raise FormatError(f"unknown dtype tag {tag}")
    dtype = _TAG_DTYPES[tag]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    payload = stream.read(nbytes)
    if len(payload) != nbytes:
        raise FormatError("truncated tensor payload")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))


def write_tensor(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(encode_tensor(arr))


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        arr = decode_tensor(fh)
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after tensor payload")
    return arr


# ---------------------------------------------------------------------------
# checkpoints


def _canonical_json(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(path, params: Mapping[str, np.ndarray], header: Mapping[str, Any] | None = None) -> None:
    """Write named parameter arrays plus a JSON header.

    ``header`` carries configs and bookkeeping (epoch, ...); the parameter
    name/shape list is added here.
    """
    header = dict(header or {})
    header["params"] = [[name, list(np.shape(arr))] for name, arr in params.items()]
    head = _canonical_json(header)
    body = bytearray(CHECKPOINT_MAGIC)
    body += struct.pack("<II", CHECKPOINT_VERSION, len(head))
    body += head
    for arr in params.values():
        body += encode_tensor(np.asarray(arr))
    body += struct.pack("<I", zlib.crc32(bytes(body)) & 0xFFFFFFFF)
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(bytes(body))
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    """Return ``(params, header)``; params keep the order they were saved in."""
    blob = Path(path).read_bytes()
    if len(blob) < 16 or blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    (stored_crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(blob[:-4]) & 0xFFFFFFFF != stored_crc:
        raise CorruptionError(f"{path}: CRC mismatch")
    version, head_len = struct.unpack("<II", blob[4:12])
    if version != CHECKPOINT_VERSION:
        raise VersionError(
            f"{path}: checkpoint format version {version}, this build reads version "
            f"{CHECKPOINT_VERSION}; re-save it with a matching release")
    header = json.loads(blob[12:12 + head_len].decode("utf-8"))
    stream = io.BytesIO(blob[12 + head_len:-4])
    params: dict[str, np.ndarray] = {}
    for name, shape in header["params"]:
        arr = decode_tensor(stream)
        if list(arr.shape) != list(shape):
            raise FormatError(f"{path}: parameter {name} has shape {arr.shape}, header says {shape}")
        params[name] = arr
    if stream.read(1):
        raise FormatError(f"{path}: trailing bytes after parameter payload")
    return params, header


# ---------------------------------------------------------------------------
# manifests


def write_manifest(path, manifest: Mapping[str, Any]) -> None:
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def read_manifest(path) -> dict[str, Any]:
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid manifest JSON ({exc})") from None
    if not isinstance(manifest, dict) or manifest.get("version") != MANIFEST_VERSION:
        raise FormatError(f"{path}: unsupported manifest version")
    for key in ("extent", "splits"):
        if key not in manifest:
            raise FormatError(f"{path}: manifest missing {key!r}")
    return manifest

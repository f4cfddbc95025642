"""Binary tensor container and PNG mask/image I/O.

Layout of a tensor file::

    b"S2CT" | uint32 LE header length | UTF-8 JSON header | payload

The header always records ``dtype`` ("float32"), ``byte_order`` ("little")
and either a single ``shape`` or a list of named ``tensors`` (checkpoints),
plus an optional free-form ``meta`` object. The payload holds the raw
row-major little-endian float32 values of every tensor back to back.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np
import torch
from PIL import Image

from ..core import BinaryMask, ChangeProbMap, RasterImage, S2CError

MAGIC = b"S2CT"
DTYPE = np.dtype("<f4")

PathLike = Union[str, Path]


class BadMagic(S2CError, ValueError):
    pass


class HeaderMismatch(S2CError, ValueError):
    pass


class TruncatedPayload(S2CError, ValueError):
    pass


def _pack(header: dict, arrays: list[np.ndarray]) -> bytes:
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    body = b"".join(np.ascontiguousarray(a, dtype=DTYPE).tobytes() for a in arrays)
    return MAGIC + struct.pack("<I", len(head)) + head + body


def _unpack(data: bytes) -> tuple[dict, memoryview]:
    if data[:4] != MAGIC:
        raise BadMagic(f"expected magic {MAGIC!r}, found {bytes(data[:4])!r}")
    if len(data) < 8:
        raise HeaderMismatch("file too short for a header length")
    (n,) = struct.unpack("<I", data[4:8])
    if len(data) < 8 + n:
        raise HeaderMismatch("header length exceeds file size")
    try:
        header = json.loads(data[8:8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise HeaderMismatch(f"unreadable header: {exc}") from exc
    if header.get("dtype") != "float32" or header.get("byte_order") != "little":
        raise HeaderMismatch(f"unsupported dtype/byte order in header {header}")
    return header, memoryview(data)[8 + n:]


def _take(payload: memoryview, offset: int, shape) -> tuple[np.ndarray, int]:
    count = int(np.prod(shape)) if len(shape) else 1
    end = offset + count * DTYPE.itemsize
    if end > len(payload):
        raise TruncatedPayload(f"payload has {len(payload)} bytes, header needs at least {end}")
    arr = np.frombuffer(payload[offset:end], dtype=DTYPE).reshape(shape).astype(np.float32)
    return arr, end


def encode_tensor(grid: np.ndarray, meta: Optional[dict] = None) -> bytes:
    arr = np.asarray(grid)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor values must be finite")
    header = {"dtype": "float32", "byte_order": "little", "shape": list(arr.shape)}
    if meta:
        header["meta"] = meta
    return _pack(header, [arr])


def decode_tensor(data: bytes) -> tuple[np.ndarray, dict]:
    header, payload = _unpack(data)
    if "shape" not in header:
        raise HeaderMismatch("header has no shape")
    arr, end = _take(payload, 0, tuple(header["shape"]))
    if end != len(payload):
        raise HeaderMismatch(f"payload has {len(payload) - end} trailing bytes")
    return arr, header.get("meta", {})


def write_tensor(path: PathLike, grid: np.ndarray, meta: Optional[dict] = None) -> None:
    Path(path).write_bytes(encode_tensor(grid, meta))


def read_tensor(path: PathLike) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())[0]


def read_tensor_meta(path: PathLike) -> tuple[np.ndarray, dict]:
    return decode_tensor(Path(path).read_bytes())


def write_prob_map(path: PathLike, yc: ChangeProbMap) -> None:
    meta = {"kind": "change_prob_map"}
    if yc.patch_stride is not None:
        meta["patch_stride"] = yc.patch_stride
    write_tensor(path, yc.probs, meta)


def read_prob_map(path: PathLike) -> ChangeProbMap:
    arr, meta = read_tensor_meta(path)
    return ChangeProbMap(arr, meta.get("patch_stride"))


def write_checkpoint(path: PathLike, tensors: dict[str, Any], meta: Optional[dict] = None) -> None:
    """Store named tensors (numpy or torch) plus a JSON ``meta`` echo."""
    names = list(tensors)
    arrays = [t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
              for t in tensors.values()]
    header = {"dtype": "float32", "byte_order": "little",
              "tensors": [{"name": n, "shape": list(a.shape)} for n, a in zip(names, arrays)],
              "meta": meta or {}}
    Path(path).write_bytes(_pack(header, arrays))


def read_checkpoint(path: PathLike) -> tuple[dict[str, np.ndarray], dict]:
    header, payload = _unpack(Path(path).read_bytes())
    if "tensors" not in header:
        raise HeaderMismatch("not a checkpoint: header has no tensor list")
    out, offset = {}, 0
    for entry in header["tensors"]:
        out[entry["name"]], offset = _take(payload, offset, tuple(entry["shape"]))
    if offset != len(payload):
        raise HeaderMismatch(f"payload has {len(payload) - offset} trailing bytes")
    return out, header.get("meta", {})


# -- PNG ------------------------------------------------------------------------

def write_mask_png(path: PathLike, mask: BinaryMask) -> None:
    Image.fromarray(mask.bits.astype(np.uint8) * 255, mode="L").save(path)


def read_mask_png(path: PathLike) -> BinaryMask:
    arr = np.asarray(Image.open(path))
    if arr.ndim == 3:
        arr = arr[..., 0]
    return BinaryMask(arr > 127)


def write_image_png(path: PathLike, img: RasterImage) -> None:
    arr = np.round(img.pixels * 255).astype(np.uint8)
    if arr.shape[2] == 1:
        Image.fromarray(arr[..., 0], mode="L").save(path)
    else:
        Image.fromarray(arr, mode="RGB").save(path)


def read_image_png(path: PathLike) -> RasterImage:
    img = Image.open(path)
    if img.mode not in ("L", "RGB"):
        img = img.convert("RGB")
    return RasterImage.from_uint8(np.asarray(img))

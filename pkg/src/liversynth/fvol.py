"""FVOL: a small, bit-exact container for volumes and label maps.

Layout::

    b"FVOL1\\n"                      magic, 6 bytes
    uint32 little-endian            header length in bytes
    UTF-8 JSON header               {"shape", "dtype", "spacing", "extra"}
    raw payload                     little-endian, C order (last axis fastest)
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from dataclasses import field
from pathlib import Path
from typing import Any
from typing import Sequence

import numpy as np

MAGIC = b"FVOL1\n"
_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


class FvolError(ValueError):
    """Base class of FVOL format errors."""


class BadMagicError(FvolError):
    pass


class HeaderError(FvolError):
    pass


class PayloadSizeError(FvolError):
    pass


class UnsupportedDtypeError(FvolError):
    pass


@dataclass
class FvolRecord:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    extra: dict[str, Any] = field(default_factory=dict)


def _dtype_tag(array: np.ndarray) -> str:
    if array.dtype.kind == "f":
        return "f32"
    if array.dtype.kind in "iub":
        if array.size and (array.min() < 0 or array.max() > 255):
            raise UnsupportedDtypeError(
                f"unsupported dtype: integer values outside u8 range in {array.dtype}"
            )
        return "u8"
    raise UnsupportedDtypeError(f"unsupported dtype: {array.dtype}")


def encode_fvol(
    array: np.ndarray,
    spacing: Sequence[float] = (1.0, 1.0, 1.0),
    extra: dict[str, Any] | None = None,
) -> bytes:
    array = np.asarray(array)
    if array.ndim not in (3, 4):
        raise HeaderError(f"FVOL stores rank-3 or rank-4 fields, got rank {array.ndim}")
    tag = _dtype_tag(array)
    if tag == "f32" and not np.isfinite(array).all():
        raise FvolError("refusing to write non-finite data")
    header = {
        "dtype": tag,
        "extra": extra or {},
        "shape": [int(n) for n in array.shape],
        "spacing": [float(s) for s in spacing],
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = np.ascontiguousarray(array, dtype=_DTYPES[tag]).tobytes(order="C")
    return MAGIC + struct.pack("<I", len(header_bytes)) + header_bytes + payload


def decode_fvol(blob: bytes) -> FvolRecord:
    if blob[: len(MAGIC)] != MAGIC:
        raise BadMagicError("bad magic: not an FVOL file")
    offset = len(MAGIC)
    if len(blob) < offset + 4:
        raise HeaderError("truncated header length")
    (header_len,) = struct.unpack("<I", blob[offset : offset + 4])
    offset += 4
    if len(blob) < offset + header_len:
        raise HeaderError("truncated header")
    try:
        header = json.loads(blob[offset : offset + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise HeaderError(f"malformed header: {exc}") from exc
    offset += header_len
    if not isinstance(header, dict) or not {"shape", "dtype", "spacing"} <= header.keys():
        raise HeaderError("header is missing shape, dtype or spacing")
    tag = header["dtype"]
    if tag not in _DTYPES:
        raise UnsupportedDtypeError(f"unsupported dtype: {tag!r}")
    shape = tuple(int(n) for n in header["shape"])
    if len(shape) not in (3, 4) or any(n < 0 for n in shape):
        raise HeaderError(f"invalid shape {shape}")
    dtype = _DTYPES[tag]
    expected = int(np.prod(shape)) * dtype.itemsize
    payload = blob[offset:]
    if len(payload) != expected:
        raise PayloadSizeError(
            f"payload size mismatch: header implies {expected} bytes, found {len(payload)}"
        )
    data = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
    spacing = tuple(float(s) for s in header["spacing"])
    return FvolRecord(data=data, spacing=spacing, extra=dict(header.get("extra") or {}))


def write_fvol(
    path: Path,
    array: np.ndarray,
    spacing: Sequence[float] = (1.0, 1.0, 1.0),
    extra: dict[str, Any] | None = None,
) -> None:
    """Write through a sibling temp file so a reader never sees a partial volume."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = encode_fvol(array, spacing, extra)
    tmp = path.with_name(f".{path.name}.tmp")
    try:
        tmp.write_bytes(blob)
        os.replace(tmp, path)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise


def read_fvol(path: Path) -> FvolRecord:
    return decode_fvol(Path(path).read_bytes())

"""Readers and writers for disparity, flow, image and parameter files.

Formats:

* PFM (``Pf`` greyscale / ``PF`` colour), little-endian payload on write,
  bottom-up row order on disk, top-down in memory.
* Middlebury ``.flo``: float32 magic 202021.25, int32 width, int32 height,
  then interleaved (u, v) float32 pairs, all little-endian.
* 16-bit PNG disparity (KITTI convention): ``code = round(d * 256)``,
  code 0 marks an invalid pixel.
* A named-array container used for checkpoints (see :func:`write_container`).
"""
from __future__ import annotations

import io
import json
import os
import struct
from typing import Mapping

import numpy as np
from PIL import Image

FLO_MAGIC = 202021.25
CONTAINER_MAGIC = b"VSTARR\x00\x01"
CONTAINER_VERSION = 1


class FormatError(ValueError):
    """Raised when a file cannot be parsed; carries the byte offset."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


# ----------------------------------------------------------------------------
# PFM
# ----------------------------------------------------------------------------

def _read_header_line(buf: bytes, pos: int) -> tuple[str, int]:
    end = buf.find(b"\n", pos)
    if end < 0:
        raise FormatError("unterminated PFM header line", pos)
    try:
        return buf[pos:end].decode("ascii").strip(), end + 1
    except UnicodeDecodeError:
        raise FormatError("non-ASCII PFM header", pos) from None


def read_pfm(path: str | os.PathLike) -> np.ndarray:
    """Read a PFM file into a float32 array (H x W or H x W x 3), top row first."""
    with open(path, "rb") as fh:
        buf = fh.read()
    magic, pos = _read_header_line(buf, 0)
    if magic == "PF":
        channels = 3
    elif magic == "Pf":
        channels = 1
    else:
        raise FormatError(f"bad PFM magic {magic!r}", 0)
    dims_at = pos
    dims, pos = _read_header_line(buf, pos)
    parts = dims.split()
    if len(parts) != 2 or not all(p.isdigit() for p in parts):
        raise FormatError(f"malformed PFM dimensions {dims!r}", dims_at)
    width, height = int(parts[0]), int(parts[1])
    if width <= 0 or height <= 0:
        raise FormatError("PFM dimensions must be positive", dims_at)
    scale_at = pos
    scale_str, pos = _read_header_line(buf, pos)
    try:
        scale = float(scale_str)
    except ValueError:
        raise FormatError(f"malformed PFM scale {scale_str!r}", scale_at) from None
    if scale == 0:
        raise FormatError("PFM scale must be nonzero", scale_at)
    endian = "<" if scale < 0 else ">"
    count = width * height * channels
    if len(buf) - pos < count * 4:
        raise FormatError(
            f"truncated PFM payload: need {count * 4} bytes, have {len(buf) - pos}", pos
        )
    data = np.frombuffer(buf, dtype=endian + "f4", count=count, offset=pos)
    shape = (height, width, 3) if channels == 3 else (height, width)
    return np.flipud(data.reshape(shape)).astype(np.float32)


def write_pfm(path: str | os.PathLike, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim == 3 and image.shape[2] == 1:
        image = image[..., 0]
    if image.ndim == 2:
        magic = b"Pf\n"
    elif image.ndim == 3 and image.shape[2] == 3:
        magic = b"PF\n"
    else:
        raise ValueError(f"PFM needs H x W or H x W x 3, got shape {image.shape}")
    height, width = image.shape[:2]
    payload = np.ascontiguousarray(np.flipud(image), dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(b"%d %d\n" % (width, height))
        fh.write(b"-1.0\n")
        fh.write(payload.tobytes())


# ----------------------------------------------------------------------------
# Middlebury .flo
# ----------------------------------------------------------------------------

def read_flo(path: str | os.PathLike) -> np.ndarray:
    """Read a ``.flo`` file into an H x W x 2 float32 array."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 12:
        raise FormatError("truncated .flo header", len(buf))
    (magic,) = struct.unpack("<f", buf[:4])
    if magic != np.float32(FLO_MAGIC):
        raise FormatError(f"bad .flo magic {magic!r}", 0)
    width, height = struct.unpack("<ii", buf[4:12])
    if width <= 0 or height <= 0:
        raise FormatError(f"invalid .flo dimensions {width}x{height}", 4)
    expected = width * height * 2 * 4
    if len(buf) - 12 != expected:
        raise FormatError(
            f".flo payload is {len(buf) - 12} bytes, header implies {expected}", 12
        )
    data = np.frombuffer(buf, dtype="<f4", offset=12)
    return data.reshape(height, width, 2).astype(np.float32)


def write_flo(path: str | os.PathLike, flow: np.ndarray) -> None:
    flow = np.asarray(flow)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ValueError(f"flow must be H x W x 2, got shape {flow.shape}")
    height, width = flow.shape[:2]
    with open(path, "wb") as fh:
        fh.write(struct.pack("<f", FLO_MAGIC))
        fh.write(struct.pack("<ii", width, height))
        fh.write(np.ascontiguousarray(flow, dtype="<f4").tobytes())


# ----------------------------------------------------------------------------
# 16-bit PNG disparity
# ----------------------------------------------------------------------------

def encode_disp_png16(disp: np.ndarray, valid: np.ndarray | None = None) -> np.ndarray:
    disp = np.asarray(disp, dtype=np.float64)
    code = np.clip(np.round(disp * 256.0), 1, 65535)
    ok = np.isfinite(disp) & (disp >= 0)
    if valid is not None:
        ok &= np.asarray(valid, dtype=bool)
    return np.where(ok, code, 0).astype(np.uint16)


def write_disp_png16(path: str | os.PathLike, disp: np.ndarray,
                     valid: np.ndarray | None = None) -> None:
    """Write disparity as a 16-bit PNG; invalid pixels get code 0.

    Valid disparities below 1/256 px are stored as code 1 so they stay
    distinguishable from invalid pixels.
    """
    Image.fromarray(encode_disp_png16(disp, valid)).save(path)


def read_disp_png16(path: str | os.PathLike) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(disparity, valid)``; invalid pixels read back as 0."""
    code = np.asarray(Image.open(path))
    if code.dtype != np.uint16 and code.dtype != np.int32:
        raise FormatError(f"expected 16-bit PNG, got dtype {code.dtype}")
    code = code.astype(np.float32)
    return code / 256.0, code > 0


# ----------------------------------------------------------------------------
# 8-bit images and masks
# ----------------------------------------------------------------------------

def write_image(path: str | os.PathLike, image: np.ndarray) -> None:
    """Write an H x W x 3 (or H x W) image with values in [0, 1] as 8-bit PNG."""
    image = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    Image.fromarray(np.round(image * 255.0).astype(np.uint8)).save(path)


def read_image(path: str | os.PathLike) -> np.ndarray:
    img = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32)
    return img / 255.0


def write_mask(path: str | os.PathLike, mask: np.ndarray) -> None:
    Image.fromarray(np.asarray(mask, dtype=bool).astype(np.uint8) * 255).save(path)


def read_mask(path: str | os.PathLike) -> np.ndarray:
    return np.asarray(Image.open(path).convert("L")) > 127


# ----------------------------------------------------------------------------
# Named-array container
# ----------------------------------------------------------------------------

def dumps_container(arrays: Mapping[str, np.ndarray],
                    meta: Mapping | None = None) -> bytes:
    """Serialize named arrays.

    Layout: 8-byte magic, little-endian uint64 manifest length, UTF-8 JSON
    manifest, then the raw little-endian payloads concatenated in manifest
    order. The manifest holds ``format_version``, free-form ``meta`` and one
    ``{name, dtype, shape, offset, nbytes}`` entry per array.
    """
    entries = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        if arr.dtype.kind not in "biuf":
            raise TypeError(f"array {name!r} has unsupported dtype {arr.dtype}")
        le = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        raw = le.tobytes()
        entries.append({
            "name": name,
            "dtype": le.dtype.str,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(raw),
        })
        blobs.append(raw)
        offset += len(raw)
    manifest = json.dumps(
        {"format_version": CONTAINER_VERSION, "meta": dict(meta or {}), "arrays": entries},
        sort_keys=True,
    ).encode("utf-8")
    out = io.BytesIO()
    out.write(CONTAINER_MAGIC)
    out.write(struct.pack("<Q", len(manifest)))
    out.write(manifest)
    for raw in blobs:
        out.write(raw)
    return out.getvalue()


def loads_container(buf: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if buf[:8] != CONTAINER_MAGIC:
        raise FormatError("bad container magic", 0)
    if len(buf) < 16:
        raise FormatError("truncated container header", len(buf))
    (mlen,) = struct.unpack("<Q", buf[8:16])
    if len(buf) < 16 + mlen:
        raise FormatError("truncated container manifest", 16)
    manifest = json.loads(buf[16:16 + mlen].decode("utf-8"))
    version = manifest.get("format_version")
    if version != CONTAINER_VERSION:
        raise FormatError(f"unsupported container version {version!r}", 16)
    base = 16 + mlen
    arrays = {}
    for entry in manifest["arrays"]:
        start = base + entry["offset"]
        if start + entry["nbytes"] > len(buf):
            raise FormatError(f"truncated payload for {entry['name']!r}", start)
        arr = np.frombuffer(buf, dtype=np.dtype(entry["dtype"]),
                            count=int(np.prod(entry["shape"], dtype=np.int64)),
                            offset=start)
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return arrays, manifest.get("meta", {})


def write_container(path: str | os.PathLike, arrays: Mapping[str, np.ndarray],
                    meta: Mapping | None = None) -> bytes:
    """Write a container file and return the bytes written."""
    buf = dumps_container(arrays, meta)
    with open(path, "wb") as fh:
        fh.write(buf)
    return buf


def read_container(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        return loads_container(fh.read())

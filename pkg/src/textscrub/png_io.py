"""Deterministic PNG encoding and image file helpers.

PNG files written by this package must be byte-for-byte reproducible across
processes and mirrorable by the browser frontend, so we hand-roll the encoder
instead of delegating to a compressor whose output may vary between library
builds. The stream uses stored (uncompressed) deflate blocks: larger files,
but a fully specified byte layout. Decoding accepts any valid PNG via Pillow.
"""

from __future__ import annotations

import io
import struct
import zlib

import numpy as np
from PIL import Image

_PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
_STORED_BLOCK_MAX = 65535


def _chunk(tag: bytes, payload: bytes) -> bytes:
    crc = zlib.crc32(tag + payload) & 0xFFFFFFFF
    return struct.pack(">I", len(payload)) + tag + payload + struct.pack(">I", crc)


def _stored_deflate(data: bytes) -> bytes:
    """zlib stream holding `data` in stored deflate blocks of <= 65535 bytes."""
    out = [b"\x78\x01"]  # CMF/FLG: 32k window, no preset dict, check bits for level 0
    n = len(data)
    pos = 0
    while True:
        block = data[pos : pos + _STORED_BLOCK_MAX]
        pos += len(block)
        final = pos >= n
        out.append(bytes([1 if final else 0]))
        out.append(struct.pack("<HH", len(block), len(block) ^ 0xFFFF))
        out.append(block)
        if final:
            break
    out.append(struct.pack(">I", zlib.adler32(data) & 0xFFFFFFFF))
    return b"".join(out)


def encode_png(array: np.ndarray) -> bytes:
    """Encode an image array as a deterministic PNG byte string.

    Accepts uint8 arrays of shape (H, W) for grayscale or (H, W, 3) for RGB.
    """
    arr = np.asarray(array)
    if arr.dtype != np.uint8:
        raise ValueError(f"encode_png expects uint8 data, got {arr.dtype}")
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    if arr.ndim == 2:
        color_type = 0
    elif arr.ndim == 3 and arr.shape[2] == 3:
        color_type = 2
    else:
        raise ValueError(f"encode_png expects (H, W) or (H, W, 3), got {arr.shape}")
    h, w = arr.shape[:2]
    if h == 0 or w == 0:
        raise ValueError("cannot encode an empty image")

    ihdr = struct.pack(">IIBBBBB", w, h, 8, color_type, 0, 0, 0)
    flat = np.ascontiguousarray(arr).reshape(h, -1)
    raw = b"".join(b"\x00" + flat[row].tobytes() for row in range(h))
    return (
        _PNG_SIGNATURE
        + _chunk(b"IHDR", ihdr)
        + _chunk(b"IDAT", _stored_deflate(raw))
        + _chunk(b"IEND", b"")
    )


def write_png(path, array: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_png(array))


def decode_png(data: bytes) -> np.ndarray:
    """Decode PNG bytes to a uint8 array: (H, W) for grayscale, (H, W, 3) for color."""
    img = Image.open(io.BytesIO(data))
    img.load()
    if img.mode in ("L", "1"):
        return np.asarray(img.convert("L"))
    if img.mode == "I;16":
        raise ValueError("16-bit PNGs are not supported; use 8-bit images")
    return np.asarray(img.convert("RGB"))


def read_image(path) -> np.ndarray:
    """Read an image file as uint8 RGB (H, W, 3)."""
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"))


def read_mask(path) -> np.ndarray:
    """Read a strict binary mask file: single-channel PNG with values {0, 255}.

    Returns a uint8 (H, W) array with values {0, 1}. Anything else (extra
    channels, intermediate gray levels) is rejected so upstream pipeline bugs
    surface here instead of silently thresholding.
    """
    with Image.open(path) as img:
        if img.mode == "1":
            img = img.convert("L")
        if img.mode != "L":
            raise ValueError(f"mask file {path} must be single-channel, got mode {img.mode}")
        arr = np.asarray(img)
    values = np.unique(arr)
    if not np.all(np.isin(values, (0, 255))):
        bad = [int(v) for v in values if v not in (0, 255)]
        raise ValueError(f"mask file {path} contains values other than 0/255: {bad[:8]}")
    return (arr > 0).astype(np.uint8)


def write_mask(path, mask: np.ndarray) -> None:
    """Write a {0,1} (or {0,255}) mask as a 0/255 grayscale PNG."""
    m = np.asarray(mask)
    if m.ndim == 3 and m.shape[2] == 1:
        m = m[:, :, 0]
    if m.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {m.shape}")
    uniq = np.unique(m)
    if not np.all(np.isin(uniq, (0, 1))) and not np.all(np.isin(uniq, (0, 255))):
        raise ValueError(f"mask values must be binary, got {uniq[:8]}")
    write_png(path, ((m > 0).astype(np.uint8)) * 255)


def to_uint8(image01: np.ndarray) -> np.ndarray:
    """Quantize a float image in [0, 1] to uint8 by round-to-nearest."""
    arr = np.asarray(image01, dtype=np.float64)
    return np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)


def to_float01(image: np.ndarray) -> np.ndarray:
    """Scale a uint8 image to float64 in [0, 1]."""
    arr = np.asarray(image)
    if arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    return np.clip(arr.astype(np.float64), 0.0, 1.0)

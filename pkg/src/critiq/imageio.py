"""Image decoding: a minimal uncompressed raster format plus 8-bit PNG.

Raw raster layout (what the synthetic generator emits):

    magic   4 bytes  b"IMG1"
    height  u32 LE
    width   u32 LE
    channels u32 LE
    pixels  height * width * channels bytes, row-major uint8

Pixels decode to float32 in [0, 1]. The PNG reader handles non-interlaced
8-bit grayscale, RGB, and RGBA with all five scanline filters; that covers
deterministic test fixtures without an external decoder.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from .util import write_atomic

RAW_MAGIC = b"IMG1"
PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


class ImageFormatError(ValueError):
    """Unreadable or unsupported image file."""


def encode_raw(pixels: np.ndarray) -> bytes:
    pixels = np.asarray(pixels)
    if pixels.ndim != 3 or pixels.dtype != np.uint8:
        raise ImageFormatError(f"encode_raw: expected uint8 (H, W, C), got "
                               f"{pixels.dtype} {pixels.shape}")
    h, w, c = pixels.shape
    return RAW_MAGIC + struct.pack("<III", h, w, c) + pixels.tobytes()


def write_raw(pixels: np.ndarray, path: str) -> None:
    write_atomic(path, encode_raw(pixels))


def decode_raw(blob: bytes, path: str = "<bytes>") -> np.ndarray:
    if blob[:4] != RAW_MAGIC:
        raise ImageFormatError(f"{path}: bad raw raster magic")
    if len(blob) < 16:
        raise ImageFormatError(f"{path}: truncated raw raster header")
    h, w, c = struct.unpack("<III", blob[4:16])
    expected = 16 + h * w * c
    if len(blob) != expected:
        raise ImageFormatError(f"{path}: expected {expected} bytes, got {len(blob)}")
    return np.frombuffer(blob, dtype=np.uint8, offset=16).reshape(h, w, c).copy()


_PNG_CHANNELS = {0: 1, 2: 3, 6: 4}


def _unfilter(raw: bytes, h: int, w: int, c: int, path: str) -> np.ndarray:
    stride = w * c
    out = np.zeros((h, stride), dtype=np.uint8)
    pos = 0
    for row in range(h):
        if pos + 1 + stride > len(raw):
            raise ImageFormatError(f"{path}: truncated PNG scanline data")
        ftype = raw[pos]
        line = np.frombuffer(raw, dtype=np.uint8, offset=pos + 1, count=stride).astype(np.int32)
        pos += 1 + stride
        prev = out[row - 1].astype(np.int32) if row > 0 else np.zeros(stride, dtype=np.int32)
        if ftype == 0:
            cur = line
        elif ftype == 1:
            cur = line.copy()
            for i in range(stride):
                left = cur[i - c] if i >= c else 0
                cur[i] = (line[i] + left) & 0xFF
        elif ftype == 2:
            cur = (line + prev) & 0xFF
        elif ftype == 3:
            cur = line.copy()
            for i in range(stride):
                left = cur[i - c] if i >= c else 0
                cur[i] = (line[i] + ((left + prev[i]) >> 1)) & 0xFF
        elif ftype == 4:
            cur = line.copy()
            for i in range(stride):
                a = cur[i - c] if i >= c else 0
                b = prev[i]
                cc = prev[i - c] if i >= c else 0
                p = a + b - cc
                pa, pb, pc = abs(p - a), abs(p - b), abs(p - cc)
                if pa <= pb and pa <= pc:
                    pred = a
                elif pb <= pc:
                    pred = b
                else:
                    pred = cc
                cur[i] = (line[i] + pred) & 0xFF
        else:
            raise ImageFormatError(f"{path}: unknown PNG filter type {ftype}")
        out[row] = cur.astype(np.uint8)
    return out.reshape(h, w, c)


def decode_png(blob: bytes, path: str = "<bytes>") -> np.ndarray:
    if blob[:8] != PNG_SIGNATURE:
        raise ImageFormatError(f"{path}: bad PNG signature")
    pos = 8
    ihdr = None
    idat = b""
    while pos + 8 <= len(blob):
        length, ctype = struct.unpack(">I4s", blob[pos:pos + 8])
        data = blob[pos + 8:pos + 8 + length]
        pos += 12 + length
        if ctype == b"IHDR":
            ihdr = struct.unpack(">IIBBBBB", data)
        elif ctype == b"IDAT":
            idat += data
        elif ctype == b"IEND":
            break
    if ihdr is None:
        raise ImageFormatError(f"{path}: PNG missing IHDR")
    w, h, depth, color, _, _, interlace = ihdr
    if depth != 8 or color not in _PNG_CHANNELS or interlace != 0:
        raise ImageFormatError(f"{path}: unsupported PNG (depth={depth}, color type="
                               f"{color}, interlace={interlace}); need non-interlaced 8-bit")
    raw = zlib.decompress(idat)
    return _unfilter(raw, h, w, _PNG_CHANNELS[color], path)


def read_image(path: str) -> np.ndarray:
    """Decode a raw raster or PNG file to float32 pixels in [0, 1]."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] == RAW_MAGIC:
        pixels = decode_raw(blob, path)
    elif blob[:8] == PNG_SIGNATURE:
        pixels = decode_png(blob, path)
    else:
        raise ImageFormatError(f"{path}: not a raw raster or PNG file")
    return pixels.astype(np.float32) / 255.0

"""PGM and PNG writers for grayscale images.

The PNG writer emits a single IDAT holding a zlib stream of stored
(uncompressed) deflate blocks, so output bytes depend only on the pixels.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .dataset import ImageSample
from .errors import ImageTooLarge

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
MAX_STORED_BLOCK = 65535
MAX_SIDE = 1 << 16


def _make_crc_table():
    table = []
    for n in range(256):
        c = n
        for _ in range(8):
            c = 0xEDB88320 ^ (c >> 1) if c & 1 else c >> 1
        table.append(c)
    return table


_CRC_TABLE = _make_crc_table()


def crc32(data: bytes, crc: int = 0) -> int:
    c = crc ^ 0xFFFFFFFF
    for byte in data:
        c = _CRC_TABLE[(c ^ byte) & 0xFF] ^ (c >> 8)
    return c ^ 0xFFFFFFFF


def adler32(data: bytes) -> int:
    a, b = 1, 0
    # 5552 is the largest run that cannot overflow before the modulo
    for start in range(0, len(data), 5552):
        for byte in data[start:start + 5552]:
            a += byte
            b += a
        a %= 65521
        b %= 65521
    return (b << 16) | a


@dataclass(frozen=True)
class EncodedImage:
    data: bytes
    format: str
    width: int
    height: int


def quantize(image: ImageSample) -> np.ndarray:
    """Map [0,1] intensities to bytes, rounding halves away from zero."""
    return np.floor(image.pixels * 255.0 + 0.5).astype(np.uint8)


def encode_pgm(image: ImageSample) -> EncodedImage:
    header = f"P5\n{image.width} {image.height}\n255\n".encode("ascii")
    return EncodedImage(header + quantize(image).tobytes(), "pgm", image.width, image.height)


def decode_pgm(data: bytes) -> np.ndarray:
    """Minimal P5 reader for the exact header layout ``encode_pgm`` writes."""
    magic, dims, maxval, body = data.split(b"\n", 3)
    if magic != b"P5" or maxval != b"255":
        raise ValueError("not an 8-bit binary PGM")
    width, height = map(int, dims.split())
    return np.frombuffer(body, dtype=np.uint8, count=width * height).reshape(height, width)


def _chunk(kind: bytes, payload: bytes) -> bytes:
    return (struct.pack(">I", len(payload)) + kind + payload
            + struct.pack(">I", crc32(payload, crc32(kind))))


def zlib_stored(raw: bytes) -> bytes:
    """Wrap ``raw`` in a zlib stream made of stored deflate blocks."""
    out = bytearray(b"\x78\x01")
    blocks = [raw[i:i + MAX_STORED_BLOCK] for i in range(0, len(raw), MAX_STORED_BLOCK)] or [b""]
    for i, block in enumerate(blocks):
        final = 1 if i == len(blocks) - 1 else 0
        out.append(final)  # BFINAL bit, BTYPE=00
        out += struct.pack("<HH", len(block), len(block) ^ 0xFFFF)
        out += block
    out += struct.pack(">I", adler32(raw))
    return bytes(out)


def encode_png(image: ImageSample) -> EncodedImage:
    w, h = image.width, image.height
    if w > MAX_SIDE or h > MAX_SIDE:
        raise ImageTooLarge(f"{w}x{h} exceeds {MAX_SIDE} pixels per side")
    rows = quantize(image)
    scanlines = np.hstack([np.zeros((h, 1), dtype=np.uint8), rows]).tobytes()
    ihdr = struct.pack(">IIBBBBB", w, h, 8, 0, 0, 0, 0)
    data = (PNG_SIGNATURE + _chunk(b"IHDR", ihdr)
            + _chunk(b"IDAT", zlib_stored(scanlines)) + _chunk(b"IEND", b""))
    return EncodedImage(data, "png", w, h)


def write_image(path, image: ImageSample) -> EncodedImage:
    path = str(path)
    encoded = encode_pgm(image) if path.endswith(".pgm") else encode_png(image)
    with open(path, "wb") as fh:
        fh.write(encoded.data)
    return encoded

"""Binary PGM (P5) and PPM (P6) images, 8 bits per sample.

Images are returned as float64 arrays of shape (C, H, W) in [0, 1].
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

SUFFIXES = (".pgm", ".ppm", ".pnm")


class ImageFormatError(ValueError):
    pass


def _header_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    tokens: list[bytes] = []
    pos = 0
    n = len(data)
    while len(tokens) < count:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos < n and data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated header")
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates maxval from the raster
    if pos >= n or not data[pos:pos + 1].isspace():
        raise ImageFormatError("missing whitespace after header")
    return tokens, pos + 1


def decode(data: bytes) -> np.ndarray:
    tokens, offset = _header_tokens(data, 4)
    magic = tokens[0]
    if magic == b"P5":
        channels = 1
    elif magic == b"P6":
        channels = 3
    else:
        raise ImageFormatError(f"unsupported magic {magic!r}; only P5 and P6 are read")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise ImageFormatError(f"bad header fields {tokens[1:]!r}") from exc
    if width < 1 or height < 1:
        raise ImageFormatError(f"bad dimensions {width}x{height}")
    if not 0 < maxval < 256:
        raise ImageFormatError(f"only 8-bit images are supported, maxval={maxval}")
    size = width * height * channels
    raster = data[offset:offset + size]
    if len(raster) < size:
        raise ImageFormatError(f"raster truncated: {len(raster)} of {size} bytes")
    img = np.frombuffer(raster, dtype=np.uint8).reshape(height, width, channels)
    return img.transpose(2, 0, 1).astype(np.float64) / maxval


def encode(image: np.ndarray) -> bytes:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise ImageFormatError(f"expected (H, W), (1, H, W) or (3, H, W), got {img.shape}")
    c, h, w = img.shape
    raw = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    magic = b"P5" if c == 1 else b"P6"
    header = magic + f"\n{w} {h}\n255\n".encode("ascii")
    return header + raw.transpose(1, 2, 0).tobytes()


def read_image(path: str | os.PathLike) -> np.ndarray:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise ImageFormatError(f"cannot read {path}: {exc}") from exc
    try:
        return decode(data)
    except ImageFormatError as exc:
        raise ImageFormatError(f"{path}: {exc}") from exc


def write_image(path: str | os.PathLike, image: np.ndarray) -> None:
    Path(path).write_bytes(encode(image))


def list_images(directory: str | os.PathLike) -> list[Path]:
    directory = Path(directory)
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in SUFFIXES and p.is_file())

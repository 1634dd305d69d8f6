"""Binary PPM (P6) / PGM (P5) reading and writing, maxval 255 only."""
from __future__ import annotations

from pathlib import Path

import numpy as np


class NetpbmError(ValueError):
    pass


def _tokens(data: bytes, count: int):
    """Yield header tokens and the offset of the first raster byte."""
    out = []
    pos = 0
    n = len(data)
    while len(out) < count:
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
            raise NetpbmError("truncated header")
        out.append(data[start:pos])
    # exactly one whitespace byte separates header and raster
    return out, pos + 1


def decode(data: bytes) -> np.ndarray:
    toks, offset = _tokens(data, 4)
    magic = toks[0]
    if magic not in (b"P5", b"P6"):
        raise NetpbmError(f"unsupported magic {magic!r}")
    try:
        width, height, maxval = (int(t) for t in toks[1:])
    except ValueError as exc:
        raise NetpbmError(f"malformed header: {exc}") from exc
    if width <= 0 or height <= 0:
        raise NetpbmError(f"bad extents {width}x{height}")
    if maxval != 255:
        raise NetpbmError(f"only maxval 255 is supported, got {maxval}")
    channels = 3 if magic == b"P6" else 1
    size = width * height * channels
    raster = data[offset:offset + size]
    if len(raster) != size:
        raise NetpbmError(f"raster holds {len(raster)} bytes, expected {size}")
    arr = np.frombuffer(raster, dtype=np.uint8)
    return arr.reshape(height, width, 3).copy() if channels == 3 else arr.reshape(height, width).copy()


def encode(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        raise NetpbmError(f"expected uint8 raster, got {arr.dtype}")
    if arr.ndim == 2:
        magic = b"P5"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    else:
        raise NetpbmError(f"unsupported raster shape {arr.shape}")
    h, w = arr.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode() + np.ascontiguousarray(arr).tobytes()


def read_ppm(path) -> np.ndarray:
    arr = decode(Path(path).read_bytes())
    if arr.ndim != 3:
        raise NetpbmError(f"{path}: expected a P6 color image")
    return arr


def read_pgm(path) -> np.ndarray:
    arr = decode(Path(path).read_bytes())
    if arr.ndim != 2:
        raise NetpbmError(f"{path}: expected a P5 grayscale image")
    return arr


def write(path, arr: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode(arr))


def write_mask(path, mask: np.ndarray) -> None:
    write(path, np.where(np.asarray(mask) > 0, 255, 0).astype(np.uint8))


def write_probability(path, prob: np.ndarray) -> None:
    write(path, np.clip(np.rint(np.asarray(prob) * 255), 0, 255).astype(np.uint8))

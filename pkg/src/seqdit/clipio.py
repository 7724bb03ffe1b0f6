"""Clip container: 32-byte header plus raw little-endian float32 frames.

Header layout (little-endian):
  bytes 0-3   magic b"VCLP"
  bytes 4-7   version (uint32, currently 1)
  bytes 8-23  C, L, H, W (uint32 each)
  bytes 24-31 reserved, zero

Data: C*L*H*W float32 values in (C, L, H, W) order. Zero-dependency and
bit-exact, so clips can serve as golden files.
"""

from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

MAGIC = b"VCLP"
VERSION = 1
HEADER = struct.Struct("<4sI4I8x")
assert HEADER.size == 32


class ClipFormatError(ValueError):
    pass


def save_clip(path: str, video: np.ndarray) -> None:
    """Write a (C, L, H, W) float32 video atomically (temp-and-rename)."""
    video = np.ascontiguousarray(video, dtype="<f4")
    if video.ndim != 4:
        raise ClipFormatError(f"expected (C, L, H, W), got shape {video.shape}")
    header = HEADER.pack(MAGIC, VERSION, *video.shape)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(header)
            f.write(video.tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_clip(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read(HEADER.size)
        if len(raw) < HEADER.size:
            raise ClipFormatError(f"{path}: truncated header")
        magic, version, c, l, h, w = HEADER.unpack(raw)
        if magic != MAGIC:
            raise ClipFormatError(f"{path}: bad magic {magic!r}")
        if version != VERSION:
            raise ClipFormatError(f"{path}: unsupported version {version}")
        data = np.frombuffer(f.read(), dtype="<f4")
    expect = c * l * h * w
    if data.size != expect:
        raise ClipFormatError(
            f"{path}: payload has {data.size} floats, header says {expect}")
    return data.reshape(c, l, h, w).copy()


def write_png(path: str, rgb: np.ndarray) -> None:
    """Minimal PNG encoder for (H, W, 3) uint8 or [0,1] float arrays."""
    import zlib

    if rgb.dtype != np.uint8:
        rgb = (np.clip(rgb, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    h, w = rgb.shape[:2]
    raw = b"".join(b"\x00" + rgb[y].tobytes() for y in range(h))

    def chunk(tag: bytes, payload: bytes) -> bytes:
        return (struct.pack(">I", len(payload)) + tag + payload
                + struct.pack(">I", zlib.crc32(tag + payload)))

    ihdr = struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0)
    blob = (b"\x89PNG\r\n\x1a\n" + chunk(b"IHDR", ihdr)
            + chunk(b"IDAT", zlib.compress(raw, 6)) + chunk(b"IEND", b""))
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(blob)
    os.replace(tmp, path)


def contact_sheet(ref: np.ndarray, skeletons: np.ndarray,
                  outputs: np.ndarray) -> np.ndarray:
    """Rows (reference | skeleton | output), one column per frame.

    ref: (C, H, W); skeletons/outputs: (T, C, H, W). Returns (H*3+pads, ...).
    """
    t = skeletons.shape[0]
    pad = 2
    tiles_top = [ref] * t
    rows = []
    for row_frames in (tiles_top, list(skeletons), list(outputs)):
        tiles = [np.pad(f.transpose(1, 2, 0), ((pad, pad), (pad, pad), (0, 0)))
                 for f in row_frames]
        rows.append(np.concatenate(tiles, axis=1))
    return np.concatenate(rows, axis=0)

"""Minimal deterministic PNG I/O plus raw float dumps for tests.

Writes 8-bit RGB or grayscale PNGs (filter 0, fixed zlib level) so that
regenerating a dataset with the same seed produces byte-identical files.
Reads back only the subset it writes.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

_SIG = b"\x89PNG\r\n\x1a\n"


def _chunk(tag: bytes, payload: bytes) -> bytes:
    return (struct.pack(">I", len(payload)) + tag + payload
            + struct.pack(">I", zlib.crc32(tag + payload)))


def save_png(img: np.ndarray, path) -> None:
    """img: (H, W, 3) floats in [0,1] or (H, W) for grayscale."""
    arr = np.asarray(img)
    if arr.dtype != np.uint8:
        arr = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    if arr.ndim == 2:
        color_type, arr3 = 0, arr[:, :, None]
    elif arr.ndim == 3 and arr.shape[2] == 3:
        color_type, arr3 = 2, arr
    else:
        raise ValueError(f"unsupported image shape {arr.shape}")
    h, w = arr3.shape[:2]
    raw = b"".join(b"\x00" + arr3[i].tobytes() for i in range(h))
    ihdr = struct.pack(">IIBBBBB", w, h, 8, color_type, 0, 0, 0)
    with open(path, "wb") as fh:
        fh.write(_SIG)
        fh.write(_chunk(b"IHDR", ihdr))
        fh.write(_chunk(b"IDAT", zlib.compress(raw, 9)))
        fh.write(_chunk(b"IEND", b""))


def load_png(path) -> np.ndarray:
    """Returns floats in [0,1]: (H, W, 3) for RGB files, (H, W) for grayscale."""
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(_SIG):
        raise ValueError(f"{path} is not a PNG file")
    pos = len(_SIG)
    w = h = bitdepth = color_type = None
    idat = b""
    while pos < len(data):
        (length,) = struct.unpack(">I", data[pos:pos + 4])
        tag = data[pos + 4:pos + 8]
        payload = data[pos + 8:pos + 8 + length]
        pos += 12 + length
        if tag == b"IHDR":
            w, h, bitdepth, color_type, _, _, interlace = struct.unpack(">IIBBBBB", payload)
            if bitdepth != 8 or color_type not in (0, 2) or interlace:
                raise ValueError("unsupported PNG variant")
        elif tag == b"IDAT":
            idat += payload
        elif tag == b"IEND":
            break
    channels = 3 if color_type == 2 else 1
    raw = zlib.decompress(idat)
    stride = w * channels
    rows = []
    for i in range(h):
        filt = raw[i * (stride + 1)]
        line = np.frombuffer(raw[i * (stride + 1) + 1:(i + 1) * (stride + 1)], dtype=np.uint8)
        if filt == 0:
            rows.append(line.copy())
        elif filt == 1:  # Sub
            out = line.copy()
            for j in range(channels, stride):
                out[j] = (int(out[j]) + int(out[j - channels])) & 0xFF
            rows.append(out)
        elif filt == 2:  # Up
            prev = rows[-1] if rows else np.zeros(stride, dtype=np.uint8)
            rows.append(((line.astype(np.int64) + prev) & 0xFF).astype(np.uint8))
        else:
            raise ValueError(f"unsupported PNG filter {filt}")
    arr = np.stack(rows).reshape(h, w, channels).astype(np.float64) / 255.0
    return arr[:, :, 0] if channels == 1 else arr


def save_raw(arr: np.ndarray, path) -> None:
    """Planar little-endian float64 dump with a tiny shape header."""
    arr = np.asarray(arr, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(b"RAWF")
        fh.write(struct.pack("<I", arr.ndim))
        for s in arr.shape:
            fh.write(struct.pack("<Q", s))
        fh.write(arr.tobytes())


def load_raw(path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.read(4) != b"RAWF":
            raise ValueError("not a raw float dump")
        (ndim,) = struct.unpack("<I", fh.read(4))
        shape = tuple(struct.unpack("<Q", fh.read(8))[0] for _ in range(ndim))
        return np.frombuffer(fh.read(), dtype="<f8").reshape(shape).copy()

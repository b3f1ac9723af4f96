"""Compact binary checkpoint container.

Layout: magic "GAVA", version u32, header-length u64, JSON header, payload.
The header carries the config echo, the template-mesh hash, and a section
table (name, offset into the payload, byte length, shape, dtype). Learned
parameters are stored as little-endian float32 (the compactness claim lives
here); structural arrays (meshes, sampling operators) keep their native
dtype so a load/save round trip is byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"GAVA"
VERSION = 1

_DTYPES = {"<f4": "<f4", "<f8": "<f8", "<i8": "<i8"}


@dataclass
class Checkpoint:
    config: dict
    template_hash: str
    sections: dict = field(default_factory=dict)  # name -> ndarray

    def add(self, name: str, arr: np.ndarray, dtype: str = "<f4") -> None:
        if name in self.sections:
            raise ValueError(f"duplicate checkpoint section {name!r}")
        if dtype not in _DTYPES:
            raise ValueError(f"unsupported section dtype {dtype}")
        self.sections[name] = np.asarray(arr).astype(dtype)

    def nbytes(self) -> int:
        payload = sum(a.nbytes for a in self.sections.values())
        return payload + len(self._header_bytes()) + 16

    def _header_bytes(self) -> bytes:
        table = []
        offset = 0
        for name, arr in self.sections.items():
            table.append({"name": name, "offset": offset, "nbytes": arr.nbytes,
                          "shape": list(arr.shape), "dtype": arr.dtype.str})
            offset += arr.nbytes
        header = {"config": self.config, "template_hash": self.template_hash,
                  "sections": table}
        return json.dumps(header, sort_keys=True, separators=(",", ":")).encode()


def mesh_hash(vertices: np.ndarray, faces: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(vertices, dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(faces, dtype="<i8").tobytes())
    return h.hexdigest()


def save(ckpt: Checkpoint, path) -> int:
    header = ckpt._header_bytes()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for arr in ckpt.sections.values():
            fh.write(arr.tobytes())
        return fh.tell()


def load(path) -> Checkpoint:
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ValueError(f"{path}: not a checkpoint (bad magic)")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen))
        payload = fh.read()
    ckpt = Checkpoint(config=header["config"], template_hash=header["template_hash"])
    for sec in header["sections"]:
        raw = payload[sec["offset"]:sec["offset"] + sec["nbytes"]]
        arr = np.frombuffer(raw, dtype=sec["dtype"]).reshape(sec["shape"]).copy()
        ckpt.sections[sec["name"]] = arr
    return ckpt

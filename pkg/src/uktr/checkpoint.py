"""Single-file checkpoint container.

Layout::

    b"UKTRCKPT"            8-byte magic
    uint32 LE              format version
    uint64 LE              header length N
    N bytes                UTF-8 JSON header: {"meta": ..., "tensors": [{name, shape, dtype, offset, nbytes}]}
    payload                raw little-endian tensor bytes, concatenated in manifest order

The header is serialized with sorted keys and fixed separators so that
``save(load(f))`` reproduces ``f`` byte for byte.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import torch

MAGIC = b"UKTRCKPT"
VERSION = 1

_DTYPES = {
    "float32": (torch.float32, np.dtype("<f4")),
    "float64": (torch.float64, np.dtype("<f8")),
    "int64": (torch.int64, np.dtype("<i8")),
    "uint8": (torch.uint8, np.dtype("u1")),
}
_NAMES = {v[0]: k for k, v in _DTYPES.items()}


class CheckpointError(Exception):
    pass


def dumps(tensors: Mapping[str, torch.Tensor], meta: Mapping[str, Any] | None = None) -> bytes:
    manifest, chunks, offset = [], [], 0
    for name, t in tensors.items():
        if t.dtype not in _NAMES:
            raise CheckpointError(f"unsupported dtype {t.dtype} for {name}")
        dt = _NAMES[t.dtype]
        raw = t.detach().cpu().contiguous().numpy().astype(_DTYPES[dt][1], copy=False).tobytes()
        manifest.append({"name": name, "shape": list(t.shape), "dtype": dt,
                         "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": dict(meta or {}), "tensors": manifest},
                        sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    return MAGIC + struct.pack("<IQ", VERSION, len(header)) + header + b"".join(chunks)


def loads(blob: bytes) -> tuple[dict[str, torch.Tensor], dict[str, Any]]:
    if blob[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, hlen = struct.unpack("<IQ", blob[8:20])
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version} unsupported (expected {VERSION})")
    header = json.loads(blob[20:20 + hlen].decode("utf-8"))
    base = 20 + hlen
    tensors = {}
    for entry in header["tensors"]:
        tdtype, npdtype = _DTYPES[entry["dtype"]]
        start = base + entry["offset"]
        arr = np.frombuffer(blob[start:start + entry["nbytes"]], dtype=npdtype)
        tensors[entry["name"]] = torch.from_numpy(arr.copy()).to(tdtype).reshape(entry["shape"])
    return tensors, header["meta"]


def save(path: str | Path, tensors: Mapping[str, torch.Tensor], meta: Mapping[str, Any] | None = None) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps(tensors, meta))
    tmp.replace(path)


def load(path: str | Path) -> tuple[dict[str, torch.Tensor], dict[str, Any]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    return loads(path.read_bytes())

"""Single-file named-tensor container.

Layout::

    8 bytes   little-endian uint64 header length
    header    UTF-8 JSON: {"format_version", "config", "meta",
                           "tensors": {name: {"dtype", "shape", "offsets": [start, end]}}}
    data      little-endian raw tensor bytes; offsets are relative to the data start
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np
import torch

FORMAT_VERSION = 1

_DTYPES = {
    torch.float64: "float64",
    torch.float32: "float32",
    torch.int64: "int64",
    torch.int32: "int32",
    torch.bool: "bool",
}
_NP = {"float64": "<f8", "float32": "<f4", "int64": "<i8", "int32": "<i4", "bool": "|b1"}
_TORCH = {v: k for k, v in _DTYPES.items()}


def save_tensors(path: str | Path, tensors: dict[str, torch.Tensor], config: dict | None = None,
                 meta: dict | None = None) -> None:
    chunks = []
    entries = {}
    offset = 0
    for name in sorted(tensors):
        t = tensors[name].detach().cpu()
        if t.dtype not in _DTYPES:
            raise TypeError(f"{name}: unsupported dtype {t.dtype}")
        dtype = _DTYPES[t.dtype]
        raw = np.ascontiguousarray(t.numpy()).astype(_NP[dtype], copy=False).tobytes()
        entries[name] = {"dtype": dtype, "shape": list(t.shape), "offsets": [offset, offset + len(raw)]}
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({
        "format_version": FORMAT_VERSION,
        "config": config or {},
        "meta": meta or {},
        "tensors": entries,
    }, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in chunks:
            fh.write(raw)
    os.replace(tmp, path)


def load_tensors(path: str | Path) -> tuple[dict[str, torch.Tensor], dict]:
    """Return ``(tensors, header)`` where ``header`` has the config and meta."""
    with open(path, "rb") as fh:
        (n,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(n).decode("utf-8"))
        data = fh.read()
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format version {version}")
    tensors = {}
    for name, e in header["tensors"].items():
        start, end = e["offsets"]
        arr = np.frombuffer(data[start:end], dtype=_NP[e["dtype"]]).reshape(e["shape"])
        tensors[name] = torch.from_numpy(arr.copy()).to(_TORCH[e["dtype"]])
    return tensors, header


def file_hash(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]

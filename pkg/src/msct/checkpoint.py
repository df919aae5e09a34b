"""Binary checkpoint format.

Layout::

    b"MSCTCKPT"                 8 bytes magic
    uint32 LE                   format version (1)
    uint64 LE                   header length N
    N bytes UTF-8 JSON          {"config": {...}, "meta": {...},
                                 "tensors": [{"name", "shape", "offset"}, ...]}
    float64 LE blob             tensors back to back, row-major

``offset`` counts float64 elements from the start of the blob. Tensor names
are the canonical parameter paths documented in :mod:`msct.model`.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .autograd import Tensor
from .model import ModelConfig, init_params

MAGIC = b"MSCTCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: dict[str, Tensor], cfg: ModelConfig, meta: dict | None = None) -> Path:
    path = Path(path)
    entries, offset = [], 0
    for name in sorted(params):
        shape = list(params[name].shape)
        entries.append({"name": name, "shape": shape, "offset": offset})
        offset += int(np.prod(shape, dtype=int))
    header = json.dumps({"config": cfg.to_dict(), "meta": meta or {}, "tensors": entries},
                        sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(header)))
        fh.write(header)
        for name in sorted(params):
            fh.write(np.ascontiguousarray(params[name].data, dtype="<f8").tobytes())
    return path


def load_checkpoint(path) -> tuple[dict[str, Tensor], ModelConfig, dict]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path} is not an MSCT checkpoint")
    version, n = struct.unpack("<IQ", raw[8:20])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[20:20 + n])
    blob = np.frombuffer(raw[20 + n:], dtype="<f8")
    params = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=int))
        start = entry["offset"]
        if start + count > blob.size:
            raise CheckpointError(f"{path}: tensor {entry['name']} runs past the end of the file")
        data = blob[start:start + count].astype(np.float64).reshape(entry["shape"])
        params[entry["name"]] = Tensor(data, requires_grad=True)
    cfg = ModelConfig.from_dict(header["config"])
    expected = {k: v.shape for k, v in init_params(cfg, 0).items()}
    found = {k: v.shape for k, v in params.items()}
    if expected != found:
        missing = sorted(set(expected) - set(found))
        extra = sorted(set(found) - set(expected))
        wrong = sorted(k for k in set(expected) & set(found) if expected[k] != found[k])
        raise CheckpointError(f"{path}: tensors do not match the stored config "
                              f"(missing {missing[:3]}, unexpected {extra[:3]}, misshapen {wrong[:3]})")
    return params, cfg, header.get("meta", {})

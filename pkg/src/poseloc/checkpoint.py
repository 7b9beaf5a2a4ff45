"""Checkpoint container.

Layout (little-endian)::

    magic          8 bytes   b"PLOCCKPT"
    version        uint64
    spec hash      uint64    first 8 bytes of sha256(canonical spec JSON)
    meta length    uint64
    meta           JSON: spec, training metadata, tensor index
    tensors        raw row-major arrays, in index order
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .model import LocalizationModel, ModelSpec, assemble_model

MAGIC = b"PLOCCKPT"
VERSION = 1
_HEADER = struct.Struct("<8sQQQ")


class CheckpointError(ValueError):
    pass


def spec_hash64(spec: ModelSpec) -> int:
    return int(spec.digest()[:16], 16)


def save_checkpoint(path, model: LocalizationModel, metadata: dict | None = None) -> None:
    state = model.state_dict()
    index = []
    blobs = []
    offset = 0
    for name in sorted(state):
        arr = state[name].detach().cpu().numpy()
        arr = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        index.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset,
                      "nbytes": arr.nbytes})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    meta = json.dumps(
        {"spec": model.spec.to_dict(), "metadata": metadata or {}, "tensors": index}, sort_keys=True
    ).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, spec_hash64(model.spec), len(meta)))
        fh.write(meta)
        for b in blobs:
            fh.write(b)


def read_checkpoint(path) -> tuple[ModelSpec, dict, dict]:
    """-> (spec, metadata, {name: tensor})."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise CheckpointError("truncated checkpoint")
    magic, version, h, n = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint file")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    meta = json.loads(raw[_HEADER.size : _HEADER.size + n])
    spec = ModelSpec.from_dict(meta["spec"])
    if spec_hash64(spec) != h:
        raise CheckpointError("spec hash in header does not match embedded spec")
    base = _HEADER.size + n
    tensors = {}
    for t in meta["tensors"]:
        buf = raw[base + t["offset"] : base + t["offset"] + t["nbytes"]]
        arr = np.frombuffer(buf, dtype=np.dtype(t["dtype"])).reshape(t["shape"]).copy()
        tensors[t["name"]] = torch.from_numpy(arr)
    return spec, meta["metadata"], tensors


def load_checkpoint(path, expected_spec: ModelSpec | None = None) -> tuple[LocalizationModel, dict]:
    spec, metadata, tensors = read_checkpoint(path)
    if expected_spec is not None and spec_hash64(expected_spec) != spec_hash64(spec):
        raise CheckpointError(
            f"checkpoint spec ({spec.variant}, {spec.digest()[:12]}) does not match expected "
            f"({expected_spec.variant}, {expected_spec.digest()[:12]})"
        )
    model = assemble_model(spec)
    first = next(iter(tensors.values()), None)
    if first is not None and first.dtype == torch.float64:
        model = model.double()
    model.load_state_dict(tensors, strict=True)
    model.eval()
    return model, metadata

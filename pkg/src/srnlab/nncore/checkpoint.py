"""Flat binary tensor checkpoints.

Layout::

    SRNCKPT 1
    tensor <name> <dtype> <dim0,dim1,...> <offset> <nbytes>
    ...
    end
    <little-endian payload, offsets relative to the first payload byte>

Scalars use an empty shape field written as ``-``. A JSON sidecar
(``<path>.json``) carries run metadata such as seed, step and config hash.
"""

from __future__ import annotations

import json
from collections.abc import Mapping
from pathlib import Path

import numpy as np

MAGIC = "SRNCKPT 1"


class CheckpointError(IOError):
    pass


def _le_dtype(dtype: np.dtype) -> np.dtype:
    return np.dtype(dtype).newbyteorder("<")


def save_checkpoint(path, tensors: Mapping[str, np.ndarray], metadata: Mapping | None = None) -> Path:
    path = Path(path)
    arrays = []
    lines = [MAGIC]
    offset = 0
    for name in sorted(tensors):
        if not name or any(ch.isspace() for ch in name):
            raise CheckpointError(f"tensor name {name!r} must be non-empty without whitespace")
        arr = np.asarray(tensors[name])
        arr = arr.astype(_le_dtype(arr.dtype), order="C", copy=False)
        shape = ",".join(str(d) for d in arr.shape) or "-"
        lines.append(f"tensor {name} {arr.dtype.str} {shape} {offset} {arr.nbytes}")
        arrays.append(arr)
        offset += arr.nbytes
    lines.append("end")
    header = ("\n".join(lines) + "\n").encode("ascii")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(header)
        for arr in arrays:
            fh.write(arr.tobytes(order="C"))
    if metadata is not None:
        sidecar = path.with_name(path.name + ".json")
        sidecar.write_text(json.dumps(dict(metadata), sort_keys=True, indent=2) + "\n")
    return path


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    end = raw.find(b"\nend\n")
    if not raw.startswith(MAGIC.encode()) or end < 0:
        raise CheckpointError(f"{path}: not a checkpoint file")
    payload = memoryview(raw)[end + len(b"\nend\n"):]
    tensors = {}
    for line in raw[:end].decode("ascii").splitlines()[1:]:
        kind, name, dtype, shape, offset, nbytes = line.split(" ")
        if kind != "tensor":
            raise CheckpointError(f"{path}: bad header line {line!r}")
        dims = () if shape == "-" else tuple(int(d) for d in shape.split(","))
        offset, nbytes = int(offset), int(nbytes)
        if offset + nbytes > len(payload):
            raise CheckpointError(f"{path}: tensor {name} truncated")
        arr = np.frombuffer(payload[offset:offset + nbytes], dtype=np.dtype(dtype)).reshape(dims)
        tensors[name] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
    sidecar = path.with_name(path.name + ".json")
    metadata = json.loads(sidecar.read_text()) if sidecar.exists() else {}
    return tensors, metadata

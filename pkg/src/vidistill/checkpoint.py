"""Binary parameter tables with a JSON sidecar of hyperparameters.

Layout (little-endian): ``b"VDCK"``, uint32 entry count, then per entry a
uint16 name length, the UTF-8 name, uint32 ndim, ndim uint32 dims and the
float32 payload.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"VDCK"


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def save_checkpoint(path, state: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    chunks = [MAGIC, struct.pack("<I", len(state))]
    for name in sorted(state):
        arr = np.asarray(state[name], dtype="<f4")  # tobytes() is C-order; keeps 0-d shapes
        raw = name.encode("utf-8")
        chunks += [struct.pack("<H", len(raw)), raw, struct.pack("<I", arr.ndim),
                   struct.pack(f"<{arr.ndim}I", *arr.shape), arr.tobytes()]
    path.write_bytes(b"".join(chunks))
    sidecar_path(path).write_text(json.dumps(meta or {}, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (count,) = struct.unpack_from("<I", raw, 4)
    off = 8
    state: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off : off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<I", raw, off)
        off += 4
        dims = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        size = int(np.prod(dims, dtype=np.int64))
        data = np.frombuffer(raw, dtype="<f4", count=size, offset=off)
        off += 4 * size
        state[name] = data.reshape(dims).astype(np.float64)
    if off != len(raw):
        raise ValueError(f"{path}: {len(raw) - off} trailing bytes")
    side = sidecar_path(path)
    meta = json.loads(side.read_text()) if side.exists() else {}
    return state, meta

"""Named-tensor checkpoint container.

Layout: 8-byte magic, little-endian uint64 header length, UTF-8 JSON header,
then raw little-endian float32 payloads at the offsets listed in the header.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import CheckpointError
from .model import ArchConfig, ModelParams

MAGIC = b"FFDACKPT"


def save_checkpoint(path, model: ModelParams, config: Optional[dict] = None,
                    seed: Optional[int] = None, extra: Optional[dict] = None) -> None:
    tensors = {}
    payload = []
    offset = 0
    for name, arr in model.state_dict().items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        tensors[name] = {"shape": list(arr.shape), "dtype": "f32", "offset": offset,
                         "nbytes": len(raw)}
        payload.append(raw)
        offset += len(raw)
    header = {
        "format": "ffda-ckpt-v1",
        "method": model.method,
        "arch": model.arch.to_dict(),
        "config": config or {},
        "seed": seed,
        "extra": extra or {},
        "tensors": tensors,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for raw in payload:
            fh.write(raw)


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        return _header(fh, path)


def _header(fh, path) -> dict:
    if fh.read(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    (n,) = struct.unpack("<Q", fh.read(8))
    return json.loads(fh.read(n).decode())


def load_checkpoint(path):
    """Return ``(model, header)``."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    with open(path, "rb") as fh:
        header = _header(fh, path)
        payload = fh.read()
    state = {}
    for name, info in header["tensors"].items():
        count = int(np.prod(info["shape"])) if info["shape"] else 1
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=info["offset"])
        state[name] = arr.reshape(info["shape"]).astype(np.float32)
    model = ModelParams(header["method"], ArchConfig(**header["arch"]), np.random.default_rng(0))
    model.train_lr = float(header.get("config", {}).get("lr", model.train_lr))
    try:
        model.load_state_dict(state)
    except ValueError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    return model, header

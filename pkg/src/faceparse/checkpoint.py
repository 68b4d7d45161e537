"""Checkpoint file format.

Layout (stable across runs, documented in the README):

* 9-byte magic ``FPCK0001\\n``
* little-endian uint64: byte length of the JSON header
* UTF-8 JSON header ``{"config": <ModelConfig dict>, "params": [{"name", "shape"}, ...]}``
* raw little-endian float64 values for each parameter, concatenated in
  header order, row-major
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataError
from .model import FaceParser, ModelConfig

MAGIC = b"FPCK0001\n"


def save_checkpoint(path: str | Path, cfg: ModelConfig,
                    state: dict[str, np.ndarray]) -> None:
    path = Path(path)
    header = {
        "config": cfg.to_dict(),
        "params": [{"name": name, "shape": list(arr.shape)} for name, arr in state.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for arr in state.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise DataError(f"checkpoint missing: {path}") from None
    if not raw.startswith(MAGIC):
        raise DataError(f"{path} is not a checkpoint (bad magic)")
    off = len(MAGIC)
    (hlen,) = struct.unpack_from("<Q", raw, off)
    off += 8
    header = json.loads(raw[off:off + hlen].decode("utf-8"))
    off += hlen
    state: dict[str, np.ndarray] = {}
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=off)
        off += 8 * count
        state[entry["name"]] = arr.reshape(shape).astype(np.float64)
    if off != len(raw):
        raise DataError(f"checkpoint {path} has trailing or missing payload bytes")
    return ModelConfig.from_dict(header["config"]), state


def load_model(path: str | Path) -> FaceParser:
    cfg, state = load_checkpoint(path)
    model = FaceParser(cfg)
    model.load_state_dict(state)
    return model

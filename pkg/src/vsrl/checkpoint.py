"""Single-file checkpoint archive: named float32 arrays plus embedded JSON config.

Layout:
    magic line        b"<header> v1\n"   e.g. "VSRL-SP v1"
    4-byte big-endian JSON length
    JSON              {"config": ..., "arrays": [{"name", "shape", "dtype"}, ...]}
    raw array bytes   little-endian, concatenated in index order
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

SALIENCY_HEADER = "VSRL-SP v1"
MAE_HEADER = "VSRL-MAE v1"
RL_HEADER = "VSRL-RL v1"


def save_archive(path: str | Path, header: str, config: dict, arrays: dict[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = sorted(arrays)
    index = []
    for name in names:
        arr = arrays[name]
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"array {name!r} contains non-finite values")
        index.append({"name": name, "shape": list(arr.shape), "dtype": "float32"})
    meta = json.dumps({"config": config, "arrays": index}).encode("utf-8")
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header.encode("ascii") + b"\n")
        fh.write(struct.pack(">I", len(meta)))
        fh.write(meta)
        for name in names:
            fh.write(np.ascontiguousarray(arrays[name], dtype="<f4").tobytes())
    os.replace(tmp, path)


def load_archive(path: str | Path, expected_header: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii").strip()
        if expected_header is not None and header != expected_header:
            raise ValueError(f"checkpoint header {header!r} != expected {expected_header!r} in {path}")
        (meta_len,) = struct.unpack(">I", fh.read(4))
        meta = json.loads(fh.read(meta_len).decode("utf-8"))
        arrays: dict[str, np.ndarray] = {}
        for entry in meta["arrays"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * 4)
            arrays[entry["name"]] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    return meta["config"], arrays


def peek_header(path: str | Path) -> str:
    with open(path, "rb") as fh:
        return fh.readline().decode("ascii").strip()

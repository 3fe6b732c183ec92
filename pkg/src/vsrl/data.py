"""Canonical observation, saliency, and dataset types plus PNG/manifest I/O.

Everything downstream (predictor training, MAE pretraining, RL) consumes
these types. Frames are 8-bit RGB; saliency and depth are stored as 8-bit
grayscale PNGs; surface normals use a small raw float32 blob format because
PNG has no portable float encoding.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from PIL import Image

MANIFEST_SCHEMA_VERSION = 1


class SaliencySource(Enum):
    HUMAN = "human"
    PREDICTED = "predicted"
    ORACLE = "oracle"


class AuxKind(Enum):
    DEPTH = "depth"
    SURFACE_NORMAL = "surface_normal"


class Split(Enum):
    TRAIN = "TRAIN"
    VAL = "VAL"


@dataclass(frozen=True)
class Frame:
    """H×W×3 uint8 RGB observation."""

    pixels: np.ndarray
    frame_id: str = ""

    def __post_init__(self):
        px = self.pixels
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"frame pixels must be H×W×3, got shape {px.shape}")
        if px.dtype != np.uint8:
            raise ValueError(f"frame pixels must be uint8, got {px.dtype}")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class SaliencyMap:
    """H×W per-pixel importance in [0, 1]; 1.0 is maximally salient."""

    values: np.ndarray
    source: SaliencySource

    def __post_init__(self):
        v = self.values
        if v.ndim != 2:
            raise ValueError(f"saliency values must be H×W, got shape {v.shape}")
        if v.size and (float(v.min()) < 0.0 or float(v.max()) > 1.0):
            raise ValueError("saliency values must lie in [0, 1]")


@dataclass(frozen=True)
class AuxModalityMap:
    """Depth (H×W×1) or surface normals (H×W×3, unit vectors)."""

    kind: AuxKind
    values: np.ndarray

    def __post_init__(self):
        v = self.values
        if self.kind is AuxKind.DEPTH:
            if v.ndim != 3 or v.shape[2] != 1:
                raise ValueError(f"depth must be H×W×1, got {v.shape}")
            if v.size and float(v.min()) < 0.0:
                raise ValueError("depth values must be non-negative")
        else:
            if v.ndim != 3 or v.shape[2] != 3:
                raise ValueError(f"normals must be H×W×3, got {v.shape}")
            norms = np.linalg.norm(v, axis=2)
            if v.size and float(np.abs(norms - 1.0).max()) > 1e-5:
                raise ValueError("surface normals must have unit L2 norm within 1e-5")


@dataclass
class ManifestRecord:
    frame_path: str
    saliency_path: str | None = None
    aux_paths: dict[str, str] = field(default_factory=dict)
    split: Split = Split.TRAIN


@dataclass
class DatasetManifest:
    records: list[ManifestRecord] = field(default_factory=list)
    schema_version: int = MANIFEST_SCHEMA_VERSION
    root: Path = field(default_factory=Path)

    def resolve(self, rel: str) -> Path:
        return self.root / rel


def save_frame(frame: Frame, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(frame.pixels, mode="RGB").save(path, format="PNG")


def load_frame(path: str | Path) -> Frame:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"frame file not found: {path}")
    img = Image.open(path)
    if img.mode != "RGB":
        # Palette / grayscale / alpha inputs are rejected rather than silently
        # converted: the precondition is an 8-bit RGB PNG.
        raise ValueError(f"wrong channel count: expected RGB PNG, got mode {img.mode!r} in {path}")
    pixels = np.asarray(img, dtype=np.uint8)
    return Frame(pixels=pixels, frame_id=path.stem)


def save_saliency(sal: SaliencyMap, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    byte = np.round(np.clip(sal.values, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(byte, mode="L").save(path, format="PNG")


def load_saliency(path: str | Path, source: SaliencySource = SaliencySource.HUMAN) -> SaliencyMap:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"saliency file not found: {path}")
    img = Image.open(path)
    if img.mode != "L":
        raise ValueError(f"saliency must be single-channel grayscale, got mode {img.mode!r} in {path}")
    byte = np.asarray(img, dtype=np.uint8)
    return SaliencyMap(values=byte.astype(np.float32) / 255.0, source=source)


def save_depth(aux: AuxModalityMap, path: str | Path) -> None:
    if aux.kind is not AuxKind.DEPTH:
        raise ValueError("save_depth expects a DEPTH map")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    byte = np.round(np.clip(aux.values[..., 0], 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(byte, mode="L").save(path, format="PNG")


def load_depth(path: str | Path) -> AuxModalityMap:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"depth file not found: {path}")
    img = Image.open(path)
    if img.mode != "L":
        raise ValueError(f"depth must be single-channel grayscale, got mode {img.mode!r}")
    byte = np.asarray(img, dtype=np.uint8)
    return AuxModalityMap(kind=AuxKind.DEPTH, values=(byte.astype(np.float32) / 255.0)[..., None])


# Raw blob for normals: ASCII header "SN <H> <W>\n" then H*W*3 little-endian float32.
def save_normals(aux: AuxModalityMap, path: str | Path) -> None:
    if aux.kind is not AuxKind.SURFACE_NORMAL:
        raise ValueError("save_normals expects a SURFACE_NORMAL map")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    h, w, _ = aux.values.shape
    with open(path, "wb") as fh:
        fh.write(f"SN {h} {w}\n".encode("ascii"))
        fh.write(aux.values.astype("<f4").tobytes())


def load_normals(path: str | Path) -> AuxModalityMap:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"normals file not found: {path}")
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii").strip()
        parts = header.split()
        if len(parts) != 3 or parts[0] != "SN":
            raise ValueError(f"bad normals header {header!r} in {path}")
        h, w = int(parts[1]), int(parts[2])
        raw = fh.read(h * w * 3 * 4)
    values = np.frombuffer(raw, dtype="<f4").reshape(h, w, 3).copy()
    return AuxModalityMap(kind=AuxKind.SURFACE_NORMAL, values=values)


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    path = Path(path)
    payload = {
        "schema_version": manifest.schema_version,
        "records": [
            {
                "frame_path": r.frame_path,
                **({"saliency_path": r.saliency_path} if r.saliency_path else {}),
                **({"aux_paths": r.aux_paths} if r.aux_paths else {}),
                "split": r.split.value,
            }
            for r in manifest.records
        ],
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2))
    os.replace(tmp, path)


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    payload = json.loads(path.read_text())
    records = [
        ManifestRecord(
            frame_path=rec["frame_path"],
            saliency_path=rec.get("saliency_path"),
            aux_paths=rec.get("aux_paths", {}),
            split=Split(rec.get("split", "TRAIN")),
        )
        for rec in payload.get("records", [])
    ]
    return DatasetManifest(
        records=records,
        schema_version=int(payload.get("schema_version", MANIFEST_SCHEMA_VERSION)),
        root=path.parent,
    )


def validate_manifest(manifest: DatasetManifest) -> list[str]:
    """Check manifest invariants; violations are data, not exceptions.

    Returns one message per broken rule, each naming the offending record.
    """
    violations: list[str] = []
    for i, rec in enumerate(manifest.records):
        frame_path = manifest.resolve(rec.frame_path)
        if not frame_path.exists():
            violations.append(f"record {i}: frame_path not found ({rec.frame_path})")
            continue
        try:
            frame = load_frame(frame_path)
        except ValueError as exc:
            violations.append(f"record {i}: unreadable frame ({exc})")
            continue
        if rec.saliency_path is not None:
            sal_path = manifest.resolve(rec.saliency_path)
            if not sal_path.exists():
                violations.append(f"record {i}: saliency_path not found ({rec.saliency_path})")
            else:
                sal = load_saliency(sal_path)
                if sal.values.shape != (frame.height, frame.width):
                    violations.append(
                        f"record {i}: saliency dims {sal.values.shape} do not match "
                        f"frame dims {(frame.height, frame.width)}"
                    )
        for kind, rel in rec.aux_paths.items():
            aux_path = manifest.resolve(rel)
            if not aux_path.exists():
                violations.append(f"record {i}: aux_paths[{kind}] not found ({rel})")
    return violations

"""HTTP backend for human saliency annotation.

Serves frames that still need masks, leases each frame to one annotator at a
time (annotators abandon tabs, so leases expire rather than lock), accepts
painted masks as base64 PNGs, and exports a training manifest referencing the
latest revision per frame. Storage is flat files under a data root: portable,
diff-able, crash-safe via write-temp-then-rename.
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import os
import threading
import time
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
from PIL import Image

from .data import (
    DatasetManifest,
    Frame,
    ManifestRecord,
    SaliencyMap,
    SaliencySource,
    Split,
    load_frame,
    save_frame,
    save_manifest,
    validate_manifest,
)

DEFAULT_LEASE_MINUTES = 10.0


class SampleStrategy(Enum):
    UNIFORM = "uniform"
    EPISODE_BOUNDARY = "episode_boundary"


@dataclass
class AnnotationRecord:
    frame_id: str
    annotator: str
    created_at: float
    revision: int
    mask_sha256: str


def collect_rollout_frames(env, total_steps: int, seed: int = 0) -> tuple[list[Frame], list[int]]:
    """Random-policy rollout; returns frames plus indices of episode starts."""
    rng = np.random.default_rng(seed)
    frames: list[Frame] = []
    boundaries: list[int] = []
    episode_seed = seed
    frame, _ = env.reset(seed=episode_seed)
    boundaries.append(0)
    frames.append(frame)
    while len(frames) < total_steps:
        action = rng.uniform(-1.0, 1.0, size=env.action_dim)
        frame, _, done, _ = env.step(action)
        frames.append(frame)
        if done and len(frames) < total_steps:
            episode_seed += 1
            frame, _ = env.reset(seed=episode_seed)
            boundaries.append(len(frames))
            frames.append(frame)
    return frames[:total_steps], boundaries


def sample_frames(
    frames: list[Frame],
    n: int,
    strategy: SampleStrategy = SampleStrategy.UNIFORM,
    seed: int = 0,
    boundaries: list[int] | None = None,
) -> list[Frame]:
    """Pick n distinct frames from a rollout, deterministically per seed."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if n > len(frames):
        raise ValueError(f"requested {n} frames but only {len(frames)} available")
    rng = np.random.default_rng(seed)
    if strategy is SampleStrategy.EPISODE_BOUNDARY and boundaries:
        picked: list[int] = []
        for b in boundaries:
            if len(picked) >= n:
                break
            picked.append(b)
        remaining = [i for i in range(len(frames)) if i not in set(picked)]
        extra = rng.choice(len(remaining), size=n - len(picked), replace=False) if n > len(picked) else []
        picked += [remaining[int(i)] for i in np.sort(extra)]
        idx = sorted(picked)
    else:
        idx = sorted(int(i) for i in rng.choice(len(frames), size=n, replace=False))
    return [
        Frame(pixels=frames[i].pixels, frame_id=f"frame-{k:04d}")
        for k, i in enumerate(idx)
    ]


class AnnotationStore:
    """Flat-file pool + revisioned masks with lease-based queueing."""

    def __init__(
        self,
        data_root: str | Path,
        lease_minutes: float = DEFAULT_LEASE_MINUTES,
        clock=time.time,
    ):
        self.root = Path(data_root)
        self.frames_dir = self.root / "pool" / "frames"
        self.ann_dir = self.root / "annotations"
        self.lease_seconds = lease_minutes * 60.0
        self.clock = clock
        self._leases: dict[str, tuple[str, float]] = {}
        self._lock = threading.Lock()

    # -- pool ---------------------------------------------------------------
    def init_pool(self, frames: list[Frame]) -> None:
        self.frames_dir.mkdir(parents=True, exist_ok=True)
        ids = []
        for frame in frames:
            save_frame(frame, self.frames_dir / f"{frame.frame_id}.png")
            ids.append(frame.frame_id)
        payload = {"frame_ids": ids}
        tmp = self.root / "pool" / "pool.json.tmp"
        tmp.write_text(json.dumps(payload, indent=2))
        os.replace(tmp, self.root / "pool" / "pool.json")

    def pool_ids(self) -> list[str]:
        pool_file = self.root / "pool" / "pool.json"
        if not pool_file.exists():
            raise FileNotFoundError("annotation pool not initialized")
        return json.loads(pool_file.read_text())["frame_ids"]

    def frame_path(self, frame_id: str) -> Path:
        return self.frames_dir / f"{frame_id}.png"

    # -- leases -------------------------------------------------------------
    def next_frame(self, annotator: str) -> str | None:
        now = self.clock()
        with self._lock:
            for frame_id in self.pool_ids():
                if self.latest_revision(frame_id) > 0:
                    continue
                lease = self._leases.get(frame_id)
                if lease is not None and lease[0] != annotator and lease[1] > now:
                    continue
                self._leases[frame_id] = (annotator, now + self.lease_seconds)
                return frame_id
        return None

    # -- revisions ----------------------------------------------------------
    def _rev_dir(self, frame_id: str) -> Path:
        return self.ann_dir / frame_id

    def latest_revision(self, frame_id: str) -> int:
        d = self._rev_dir(frame_id)
        if not d.exists():
            return 0
        revs = [int(p.stem[3:]) for p in d.glob("rev*.png")]
        return max(revs, default=0)

    def revision_meta(self, frame_id: str, revision: int) -> dict:
        return json.loads((self._rev_dir(frame_id) / f"rev{revision}.json").read_text())

    def submit_mask(
        self, frame_id: str, mask_png: bytes, annotator: str, base_revision: int | None = None
    ) -> int:
        if frame_id not in set(self.pool_ids()):
            raise KeyError(f"unknown frame_id {frame_id!r}")
        frame = load_frame(self.frame_path(frame_id))
        mask_img = Image.open(io.BytesIO(mask_png))
        if mask_img.mode != "L":
            raise ValueError(f"mask must be 8-bit grayscale PNG, got mode {mask_img.mode!r}")
        if mask_img.size != (frame.width, frame.height):
            raise ValueError(
                f"mask dims {mask_img.size[::-1]} do not match frame {(frame.height, frame.width)}"
            )
        sha = hashlib.sha256(mask_png).hexdigest()
        with self._lock:
            current = self.latest_revision(frame_id)
            if base_revision is not None and base_revision != current:
                raise RevisionConflict(
                    f"frame {frame_id}: base revision {base_revision} != current {current}"
                )
            if current > 0:
                meta = self.revision_meta(frame_id, current)
                if meta["mask_sha256"] == sha:
                    return current  # idempotent re-post
            revision = current + 1
            d = self._rev_dir(frame_id)
            d.mkdir(parents=True, exist_ok=True)
            tmp_png = d / f"rev{revision}.png.tmp"
            tmp_png.write_bytes(mask_png)
            meta = {
                "frame_id": frame_id,
                "annotator": annotator,
                "created_at": self.clock(),
                "revision": revision,
                "mask_sha256": sha,
            }
            tmp_meta = d / f"rev{revision}.json.tmp"
            tmp_meta.write_text(json.dumps(meta))
            # PNG lands before metadata; a torn write leaves at most an orphan .tmp.
            os.replace(tmp_png, d / f"rev{revision}.png")
            os.replace(tmp_meta, d / f"rev{revision}.json")
            self._leases.pop(frame_id, None)
            return revision

    def get_mask(self, frame_id: str) -> tuple[bytes, int]:
        revision = self.latest_revision(frame_id)
        if revision == 0:
            raise KeyError(f"no annotation for frame {frame_id!r}")
        return (self._rev_dir(frame_id) / f"rev{revision}.png").read_bytes(), revision

    def progress(self) -> dict:
        ids = self.pool_ids()
        now = self.clock()
        annotated = sum(1 for f in ids if self.latest_revision(f) > 0)
        leased = sum(
            1
            for f, (_, exp) in self._leases.items()
            if exp > now and self.latest_revision(f) == 0
        )
        return {"total": len(ids), "annotated": annotated, "leased": leased}

    def export_manifest(self, out_path: str | Path | None = None) -> DatasetManifest:
        """Manifest referencing the latest revision per annotated frame."""
        out_path = Path(out_path) if out_path is not None else self.root / "manifest.json"
        records = []
        for frame_id in self.pool_ids():
            revision = self.latest_revision(frame_id)
            if revision == 0:
                continue
            records.append(
                ManifestRecord(
                    frame_path=os.path.relpath(self.frame_path(frame_id), out_path.parent),
                    saliency_path=os.path.relpath(
                        self._rev_dir(frame_id) / f"rev{revision}.png", out_path.parent
                    ),
                    split=Split.TRAIN,
                )
            )
        if not records:
            raise ValueError("no annotations to export")
        manifest = DatasetManifest(records=records, root=out_path.parent)
        save_manifest(manifest, out_path)
        violations = validate_manifest(manifest)
        if violations:
            raise RuntimeError(f"exported manifest is invalid: {violations}")
        return manifest


class RevisionConflict(Exception):
    pass


def create_app(store: AnnotationStore):
    """FastAPI app over an AnnotationStore; JSON bodies with base64 PNG masks."""
    from fastapi import FastAPI, Response
    from fastapi.responses import JSONResponse
    from fastapi.staticfiles import StaticFiles

    app = FastAPI(title="saliency annotation service")
    app.state.store = store

    @app.get("/frames/next")
    def frames_next(annotator: str = "anonymous"):
        try:
            frame_id = store.next_frame(annotator)
        except FileNotFoundError:
            return JSONResponse({"error": "pool not initialized"}, status_code=503)
        if frame_id is None:
            return Response(status_code=204)
        png = store.frame_path(frame_id).read_bytes()
        return {"frame_id": frame_id, "png_base64": base64.b64encode(png).decode("ascii")}

    @app.get("/frames/{frame_id}")
    def frames_get(frame_id: str):
        path = store.frame_path(frame_id)
        if not path.exists():
            return JSONResponse({"error": f"unknown frame {frame_id}"}, status_code=404)
        return Response(content=path.read_bytes(), media_type="image/png")

    @app.post("/annotations")
    def annotations_post(body: dict):
        frame_id = body.get("frame_id", "")
        annotator = body.get("annotator", "anonymous")
        base_revision = body.get("base_revision")
        try:
            mask_png = base64.b64decode(body["mask_png_base64"])
        except (KeyError, ValueError):
            return JSONResponse({"error": "mask_png_base64 missing or invalid"}, status_code=422)
        try:
            revision = store.submit_mask(frame_id, mask_png, annotator, base_revision)
        except KeyError as exc:
            return JSONResponse({"error": str(exc)}, status_code=404)
        except RevisionConflict as exc:
            return JSONResponse({"error": str(exc)}, status_code=409)
        except ValueError as exc:
            return JSONResponse({"error": str(exc)}, status_code=422)
        return {"revision": revision}

    @app.get("/annotations/{frame_id}")
    def annotations_get(frame_id: str):
        try:
            png, revision = store.get_mask(frame_id)
        except KeyError as exc:
            return JSONResponse({"error": str(exc)}, status_code=404)
        return {
            "frame_id": frame_id,
            "revision": revision,
            "mask_png_base64": base64.b64encode(png).decode("ascii"),
        }

    @app.get("/progress")
    def progress():
        try:
            return store.progress()
        except FileNotFoundError:
            return JSONResponse({"error": "pool not initialized"}, status_code=503)

    @app.post("/export")
    def export():
        try:
            manifest = store.export_manifest()
        except ValueError as exc:
            return JSONResponse({"error": str(exc)}, status_code=409)
        return {"manifest_path": str(store.root / "manifest.json"), "records": len(manifest.records)}

    ui_dir = Path(__file__).resolve().parents[2] / "frontend" / "dist"
    if ui_dir.exists():
        app.mount("/ui", StaticFiles(directory=str(ui_dir), html=True), name="ui")
    return app


def mask_to_saliency(mask_png: bytes) -> SaliencyMap:
    img = Image.open(io.BytesIO(mask_png))
    values = np.asarray(img, dtype=np.uint8).astype(np.float32) / 255.0
    return SaliencyMap(values=values, source=SaliencySource.HUMAN)

"""Deterministic synthetic reach environment with oracle saliency/depth/normals.

The agent (white disk) must move onto the target disk. The target shares its
body color palette with five distractor disks and is distinguished only by a
one-pixel ring of a specific hue, so the oracle saliency channel carries real
information rather than being decorative. Everything is rasterized with
numpy, fully determined by (seed, action sequence).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import AuxKind, AuxModalityMap, Frame, SaliencyMap, SaliencySource

RENDER_SIZE = 64
AGENT_RADIUS = 3.2
TARGET_RADIUS = 3.6
STEP_SCALE = 0.05
SUCCESS_DISTANCE = 0.05
HORIZON = 50
NUM_DISTRACTORS = 5

AGENT_COLOR = np.array([255, 255, 255], dtype=np.uint8)
BACKGROUND_COLOR = np.array([24, 24, 28], dtype=np.uint8)
RING_COLOR = np.array([96, 160, 128], dtype=np.uint8)  # the subtle cue
DISK_PALETTE = np.array(
    [
        [200, 80, 80],
        [80, 120, 200],
        [200, 160, 60],
        [140, 80, 180],
        [90, 170, 90],
        [200, 110, 150],
    ],
    dtype=np.uint8,
)

# Depth planes: background far (1.0), disks nearer in draw order.
BACKGROUND_DEPTH = 1.0


@dataclass
class Disk:
    pos: np.ndarray  # (2,) in [0,1]²
    color: np.ndarray  # (3,) uint8
    radius: float  # pixels
    depth: float


@dataclass
class ToyReachState:
    agent_pos: np.ndarray
    target_pos: np.ndarray
    distractors: list[Disk]
    target_color: np.ndarray
    t: int = 0
    horizon: int = HORIZON


def _pixel_centers(size: int) -> tuple[np.ndarray, np.ndarray]:
    coords = np.arange(size, dtype=np.float64) + 0.5
    ys, xs = np.meshgrid(coords, coords, indexing="ij")
    return ys, xs


_YS, _XS = _pixel_centers(RENDER_SIZE)


def _disk_mask(pos: np.ndarray, radius: float, size: int = RENDER_SIZE) -> np.ndarray:
    cy = pos[1] * size
    cx = pos[0] * size
    return (_YS - cy) ** 2 + (_XS - cx) ** 2 <= radius**2


def _ring_mask(pos: np.ndarray, radius: float, size: int = RENDER_SIZE) -> np.ndarray:
    # 1-pixel ring just inside the disk boundary
    cy = pos[1] * size
    cx = pos[0] * size
    d2 = (_YS - cy) ** 2 + (_XS - cx) ** 2
    return (d2 <= radius**2) & (d2 > (radius - 1.0) ** 2)


def render(state: ToyReachState, include_distractors: bool = True) -> Frame:
    img = np.empty((RENDER_SIZE, RENDER_SIZE, 3), dtype=np.uint8)
    img[:] = BACKGROUND_COLOR
    if include_distractors:
        for disk in state.distractors:
            img[_disk_mask(disk.pos, disk.radius)] = disk.color
    tmask = _disk_mask(state.target_pos, TARGET_RADIUS)
    img[tmask] = state.target_color
    img[_ring_mask(state.target_pos, TARGET_RADIUS)] = RING_COLOR
    img[_disk_mask(state.agent_pos, AGENT_RADIUS)] = AGENT_COLOR
    return Frame(pixels=img, frame_id=f"toy-t{state.t}")


def oracle_saliency(state: ToyReachState) -> SaliencyMap:
    mask = _disk_mask(state.agent_pos, AGENT_RADIUS) | _disk_mask(state.target_pos, TARGET_RADIUS)
    return SaliencyMap(values=mask.astype(np.float32), source=SaliencySource.ORACLE)


def oracle_depth(state: ToyReachState) -> AuxModalityMap:
    depth = np.full((RENDER_SIZE, RENDER_SIZE), BACKGROUND_DEPTH, dtype=np.float32)
    for disk in state.distractors:
        depth[_disk_mask(disk.pos, disk.radius)] = disk.depth
    depth[_disk_mask(state.target_pos, TARGET_RADIUS)] = 0.30
    depth[_disk_mask(state.agent_pos, AGENT_RADIUS)] = 0.15
    return AuxModalityMap(kind=AuxKind.DEPTH, values=depth[..., None])


def _sphere_cap_normals(normals: np.ndarray, pos: np.ndarray, radius: float) -> None:
    mask = _disk_mask(pos, radius)
    cy = pos[1] * RENDER_SIZE
    cx = pos[0] * RENDER_SIZE
    dx = (_XS - cx) / radius
    dy = (_YS - cy) / radius
    r2 = np.clip(dx**2 + dy**2, 0.0, 1.0)
    nz = np.sqrt(1.0 - r2)
    n = np.stack([dx, dy, nz], axis=-1)
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    normals[mask] = n[mask]


def oracle_normals(state: ToyReachState) -> AuxModalityMap:
    normals = np.zeros((RENDER_SIZE, RENDER_SIZE, 3), dtype=np.float64)
    normals[..., 2] = 1.0
    for disk in state.distractors:
        _sphere_cap_normals(normals, disk.pos, disk.radius)
    _sphere_cap_normals(normals, state.target_pos, TARGET_RADIUS)
    _sphere_cap_normals(normals, state.agent_pos, AGENT_RADIUS)
    return AuxModalityMap(kind=AuxKind.SURFACE_NORMAL, values=normals.astype(np.float32))


class ToyReachEnv:
    """Uniform env interface: reset(seed) -> (Frame, info); step(a) -> (Frame, r, done, info)."""

    action_dim = 2

    def __init__(self, horizon: int = HORIZON):
        self.horizon = horizon
        self.state: ToyReachState | None = None
        self._done = True

    def reset(self, seed: int = 0):
        rng = np.random.default_rng(seed)
        positions = self._sample_positions(rng, count=2 + NUM_DISTRACTORS)
        agent_pos, target_pos = positions[0], positions[1]
        target_color = DISK_PALETTE[rng.integers(0, len(DISK_PALETTE))].copy()
        distractors = []
        for i in range(NUM_DISTRACTORS):
            color = DISK_PALETTE[rng.integers(0, len(DISK_PALETTE))].copy()
            radius = float(rng.uniform(2.0, 4.5))
            distractors.append(
                Disk(pos=positions[2 + i], color=color, radius=radius, depth=0.45 + 0.08 * i)
            )
        self.state = ToyReachState(
            agent_pos=agent_pos,
            target_pos=target_pos,
            distractors=distractors,
            target_color=target_color,
            horizon=self.horizon,
        )
        self._done = False
        return render(self.state), self._info()

    @staticmethod
    def _sample_positions(rng: np.random.Generator, count: int, min_sep: float = 0.16) -> list[np.ndarray]:
        # Rejection-sample well-separated positions so no disks overlap at reset.
        positions: list[np.ndarray] = []
        while len(positions) < count:
            cand = rng.uniform(0.12, 0.88, size=2)
            if all(np.linalg.norm(cand - p) >= min_sep for p in positions):
                positions.append(cand)
        return positions

    def step(self, action):
        if self.state is None or self._done:
            raise RuntimeError("step called on a finished or unreset environment")
        action = np.clip(np.asarray(action, dtype=np.float64).reshape(2), -1.0, 1.0)
        self.state.agent_pos = np.clip(self.state.agent_pos + STEP_SCALE * action, 0.0, 1.0)
        self.state.t += 1
        distance = float(np.linalg.norm(self.state.agent_pos - self.state.target_pos))
        reward = -distance
        success = distance < SUCCESS_DISTANCE
        done = success or self.state.t >= self.state.horizon
        self._done = done
        return render(self.state), reward, done, self._info(success=success)

    def _info(self, success: bool = False) -> dict:
        assert self.state is not None
        return {
            "state": self.state,
            "agent_pos": self.state.agent_pos.copy(),
            "target_pos": self.state.target_pos.copy(),
            "distance": float(np.linalg.norm(self.state.agent_pos - self.state.target_pos)),
            "num_distractors": len(self.state.distractors),
            "success": success,
            "t": self.state.t,
        }


_REGISTRY: dict[str, type] = {}


def register_env(env_id: str, factory) -> None:
    _REGISTRY[env_id] = factory


def make_env(env_id: str, **kwargs):
    if env_id not in _REGISTRY:
        raise KeyError(f"unknown env id {env_id!r}; registered: {sorted(_REGISTRY)}")
    return _REGISTRY[env_id](**kwargs)


register_env("toy-reach", ToyReachEnv)

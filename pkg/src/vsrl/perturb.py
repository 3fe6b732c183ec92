"""Observation perturbations for generalization evaluation.

Wrapping an environment changes pixels only: rewards, termination, and
internal state are untouched under identical seeds and actions. COLOR blends
each frame with a solid color held fixed for the episode; VIDEO blends with
a looping clip indexed by the episode timestep.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .data import Frame, load_frame
from .metrics import EvalRecord, EvalReport, config_hash


class PerturbKind(Enum):
    NONE = "none"
    COLOR = "color"
    VIDEO = "video"


@dataclass
class PerturbConfig:
    kind: PerturbKind = PerturbKind.NONE
    strength: float = 0.5
    video_frames: list[Frame] = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.strength <= 1.0:
            raise ValueError("strength must lie in [0, 1]")
        if self.kind is PerturbKind.VIDEO and not self.video_frames:
            raise ValueError("VIDEO perturbation requires at least one video frame")

    def label(self) -> str:
        if self.kind is PerturbKind.NONE:
            return "none"
        return f"{self.kind.value}@{self.strength:g}"


@dataclass
class EpisodeOverlay:
    """Per-episode perturbation state: a fixed color and a frame counter."""

    color: np.ndarray | None = None
    t: int = 0


def start_episode(config: PerturbConfig, rng: np.random.Generator) -> EpisodeOverlay:
    color = None
    if config.kind is PerturbKind.COLOR:
        color = rng.integers(0, 256, size=3).astype(np.float64)
    return EpisodeOverlay(color=color, t=0)


def perturb_observation(frame: Frame, config: PerturbConfig, episode: EpisodeOverlay) -> Frame:
    if config.kind is PerturbKind.NONE or config.strength == 0.0:
        episode.t += 1
        return frame
    s = config.strength
    base = frame.pixels.astype(np.float64)
    if config.kind is PerturbKind.COLOR:
        overlay = episode.color[None, None, :]
    else:
        clip = config.video_frames[episode.t % len(config.video_frames)]
        overlay = clip.pixels.astype(np.float64)
    episode.t += 1
    blended = (1.0 - s) * base + s * overlay
    pixels = np.clip(np.round(blended), 0, 255).astype(np.uint8)
    return Frame(pixels=pixels, frame_id=frame.frame_id)


class PerturbedEnv:
    """Pass-through wrapper that perturbs returned frames and nothing else."""

    def __init__(self, env, config: PerturbConfig, background_mask_fn=None):
        self.env = env
        self.config = config
        self.background_mask_fn = background_mask_fn
        self._rng = np.random.default_rng(config.seed)
        self._episode = EpisodeOverlay()

    @property
    def action_dim(self) -> int:
        return self.env.action_dim

    def _apply(self, frame: Frame, info: dict) -> Frame:
        out = perturb_observation(frame, self.config, self._episode)
        if self.background_mask_fn is not None and out is not frame:
            # Optional hook: restore foreground pixels where the env can name them.
            mask = self.background_mask_fn(info)
            pixels = out.pixels.copy()
            pixels[mask] = frame.pixels[mask]
            out = Frame(pixels=pixels, frame_id=frame.frame_id)
        return out

    def reset(self, seed: int = 0):
        frame, info = self.env.reset(seed=seed)
        self._episode = start_episode(self.config, self._rng)
        return self._apply(frame, info), info

    def step(self, action):
        frame, reward, done, info = self.env.step(action)
        return self._apply(frame, info), reward, done, info


def wrap_env(env, config: PerturbConfig, background_mask_fn=None) -> PerturbedEnv:
    return PerturbedEnv(env, config, background_mask_fn)


def make_gradient_clip(n_frames: int = 16, size: int = 64, seed: int = 0) -> list[Frame]:
    """Small procedurally generated clip (moving color gradients); no assets needed."""
    rng = np.random.default_rng(seed)
    phases = rng.uniform(0, 2 * np.pi, size=3)
    freqs = rng.uniform(1.0, 2.5, size=3)
    ys, xs = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    frames = []
    for t in range(n_frames):
        shift = 2 * np.pi * t / n_frames
        chans = [
            127.5 * (1 + np.sin(2 * np.pi * freqs[c] * (xs + ys) / size + phases[c] + shift))
            for c in range(3)
        ]
        pixels = np.stack(chans, axis=-1).astype(np.uint8)
        frames.append(Frame(pixels=pixels, frame_id=f"clip-{t:03d}"))
    return frames


def load_video_frames(directory: str | Path) -> list[Frame]:
    """Load numbered PNGs (000.png, 001.png, ...) as a perturbation clip."""
    directory = Path(directory)
    paths = sorted(directory.glob("*.png"))
    if not paths:
        raise FileNotFoundError(f"no PNG frames found in {directory}")
    return [load_frame(p) for p in paths]


def eval_generalization(
    agent,
    env,
    configs: list[PerturbConfig],
    episodes: int,
    train_cfg,
    seed: int = 0,
) -> EvalReport:
    """Evaluate a trained agent under each perturbation config."""
    from .train import SaliencySourceFn, evaluate_policy

    report = EvalReport()
    if episodes == 0:
        return report
    sal_fn = SaliencySourceFn(train_cfg.saliency_source, train_cfg.predictor_ckpt)
    chash = config_hash(train_cfg.to_json())
    for config in configs:
        wrapped = wrap_env(env, config)
        success, avg_return = evaluate_policy(
            agent, wrapped, train_cfg, sal_fn, episodes, seed=20_000 + seed
        )
        report.append(
            EvalRecord(
                step=train_cfg.total_steps,
                seed=train_cfg.sac.seed,
                variant=_variant(train_cfg),
                task=train_cfg.env_id,
                success_rate=success,
                avg_return=avg_return,
                perturbation=config.label(),
                config_hash=chash,
            )
        )
    return report


def _variant(train_cfg) -> str:
    from .train import variant_name

    return variant_name(train_cfg)

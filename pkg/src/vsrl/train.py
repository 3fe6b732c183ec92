"""End-to-end RL training: rollout, replay, SAC updates, periodic evaluation.

The observation pipeline is
    env frame (+ saliency from oracle/predictor) -> fusion variant channels
    -> uint8 replay storage -> augmented float batches -> encoder -> SAC.
A run is fully determined by its TrainConfig (including seed).
"""

from __future__ import annotations

import hashlib
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import checkpoint as ckpt_io
from .augment import AugmentKind, rad_augment
from .data import Frame, SaliencyMap, SaliencySource
from .envs import make_env, oracle_saliency
from .fusion import FAST_STRIDES, FusionVariant, KeypointEncoder, PixelEncoder, VARIANT_CHANNELS, make_input
from .mae import MaeModel, Modality, PretrainKind, PretrainMode, load_mae
from .metrics import EvalRecord, EvalReport, config_hash
from .replay import ReplayBuffer
from .rl import SacAgent, SacConfig
from .saliency import build_model as build_predictor_model
from .saliency import load_checkpoint as load_predictor
from .saliency import predict_saliency


@dataclass
class TrainConfig:
    env_id: str = "toy-reach"
    encoder_kind: str = "cnn"  # cnn | mae
    fusion: FusionVariant = FusionVariant.RGB_S
    saliency_source: str = "oracle"  # oracle | predictor | none
    predictor_ckpt: str | None = None
    mae_ckpt: str | None = None
    total_steps: int = 50_000
    init_steps: int = 1_000
    eval_every: int = 5_000
    eval_episodes: int = 10
    buffer_capacity: int = 50_000
    augment_pad: int = 4
    augment_kind: AugmentKind = AugmentKind.RANDOM_SHIFT
    feature_dim: int = 50
    hidden_dim: int = 128
    conv_strides: tuple[int, ...] = FAST_STRIDES
    conv_channels: int = 32
    pool_input: int = 1
    encoder_arch: str = "conv"  # conv | keypoint
    image_size: int = 64
    action_repeat: int = 1  # env steps per policy decision; rewards are
    # discount-summed and the backup uses gamma**action_repeat
    n_step: int = 1  # multi-step returns over macro-transitions
    sac: SacConfig = field(default_factory=SacConfig)

    def to_json(self) -> dict:
        payload = self.__dict__.copy()
        payload["fusion"] = self.fusion.value
        payload["augment_kind"] = self.augment_kind.value
        payload["conv_strides"] = list(self.conv_strides)
        payload["sac"] = self.sac.__dict__.copy()
        return payload

    @classmethod
    def from_json(cls, payload: dict) -> "TrainConfig":
        payload = dict(payload)
        payload["fusion"] = FusionVariant(payload["fusion"])
        payload["augment_kind"] = AugmentKind(payload["augment_kind"])
        payload["conv_strides"] = tuple(payload["conv_strides"])
        payload["sac"] = SacConfig(**payload["sac"])
        return cls(**payload)


class SaliencySourceFn:
    """Per-observation saliency, cached by frame-content hash."""

    def __init__(self, kind: str, predictor_ckpt: str | None = None, cache_size: int = 4096):
        self.kind = kind
        self.cache: OrderedDict[bytes, SaliencyMap] = OrderedDict()
        self.cache_size = cache_size
        self.predictor = None
        self.predictor_model = None
        if kind == "predictor":
            if predictor_ckpt is None:
                raise ValueError("saliency_source 'predictor' needs a checkpoint path")
            self.predictor = load_predictor(predictor_ckpt)
            self.predictor_model = build_predictor_model(self.predictor)

    def __call__(self, frame: Frame, info: dict) -> SaliencyMap | None:
        if self.kind == "none":
            return None
        if self.kind == "oracle":
            return oracle_saliency(info["state"])
        key = hashlib.blake2b(frame.pixels.tobytes(), digest_size=16).digest()
        hit = self.cache.get(key)
        if hit is not None:
            self.cache.move_to_end(key)
            return hit
        sal = predict_saliency(self.predictor, frame, model=self.predictor_model)
        self.cache[key] = sal
        if len(self.cache) > self.cache_size:
            self.cache.popitem(last=False)
        return sal


class MaePolicyEncoder(nn.Module):
    """Adapts a pretrained MAE encoder to the B×C×H×W interface of the agent.

    The default is a frozen snapshot; pass finetune=True to let critic
    gradients flow into it.
    """

    def __init__(self, model: MaeModel, mode: PretrainMode, finetune: bool = False):
        super().__init__()
        self.model = model
        self.mode = mode
        self.feature_dim = model.config.width
        if not finetune:
            for p in self.model.parameters():
                p.requires_grad_(False)
        self.finetune = finetune

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        cfg = self.model.config
        p = cfg.patch_size
        b, c, h, w = x.shape
        gh, gw = h // p, w // p

        def tok(img: torch.Tensor) -> torch.Tensor:
            # B×C×H×W -> B×N×(P·P·C), row-major patches matching patchify()
            return (
                img.reshape(b, -1, gh, p, gw, p)
                .permute(0, 2, 4, 3, 5, 1)
                .reshape(b, gh * gw, -1)
            )

        batch = {Modality.RGB: tok(x[:, :3])}
        if self.mode.inference_uses_aux and c > 3:
            batch[self.mode.aux] = tok(x[:, 3:])
        ctx = torch.enable_grad() if self.finetune and self.training else torch.no_grad()
        with ctx:
            encoded, _ = self.model.encode(batch, plan=None)
            return encoded.mean(dim=1)


def build_encoder(cfg: TrainConfig) -> tuple[nn.Module, int, int]:
    """Returns (encoder module, feature_dim, observation channel count)."""
    channels = VARIANT_CHANNELS[cfg.fusion]
    if cfg.encoder_kind == "cnn":
        if cfg.encoder_arch == "keypoint":
            enc = KeypointEncoder(
                in_channels=channels,
                image_size=cfg.image_size,
                feature_dim=cfg.feature_dim,
                pool_input=cfg.pool_input,
            )
        else:
            enc = PixelEncoder(
                in_channels=channels,
                image_size=cfg.image_size,
                feature_dim=cfg.feature_dim,
                conv_channels=cfg.conv_channels,
                strides=cfg.conv_strides,
                pool_input=cfg.pool_input,
            )
        return enc, cfg.feature_dim, channels
    if cfg.encoder_kind == "mae":
        if cfg.mae_ckpt is None:
            raise ValueError("encoder_kind 'mae' needs mae_ckpt")
        model, mode = load_mae(cfg.mae_ckpt)
        if mode is None:
            mode = PretrainMode(mode=PretrainKind.RGB_ONLY)
        enc = MaePolicyEncoder(model, mode, finetune=model.config.finetune)
        obs_channels = 4 if mode.inference_uses_aux else 3
        return enc, enc.feature_dim, obs_channels
    raise ValueError(f"unknown encoder kind {cfg.encoder_kind!r}")


def observation_channels(cfg: TrainConfig, frame: Frame, info: dict, sal_fn: SaliencySourceFn) -> np.ndarray:
    if cfg.encoder_kind == "mae":
        rgb = frame.pixels.astype(np.float32).transpose(2, 0, 1) / 255.0
        sal = sal_fn(frame, info)
        if sal is None:
            return rgb
        return np.concatenate([rgb, sal.values[None].astype(np.float32)], axis=0)
    return make_input(cfg.fusion, frame, sal_fn(frame, info)).channels


def evaluate_policy(
    agent: SacAgent,
    env,
    cfg: TrainConfig,
    sal_fn: SaliencySourceFn,
    episodes: int,
    seed: int,
) -> tuple[float, float]:
    """Deterministic-policy rollouts; returns (success_rate, average return)."""
    successes, returns = [], []
    for ep in range(episodes):
        frame, info = env.reset(seed=seed + ep)
        obs = observation_channels(cfg, frame, info, sal_fn)
        done = False
        total = 0.0
        success = False
        while not done:
            action = agent.select_action(obs, deterministic=True)
            for _ in range(cfg.action_repeat):
                frame, reward, done, info = env.step(action)
                total += reward
                success = success or bool(info.get("success", False))
                if done:
                    break
            obs = observation_channels(cfg, frame, info, sal_fn)
        returns.append(total)
        successes.append(float(success))
    return float(np.mean(successes)), float(np.mean(returns))


def train_rl(
    env,
    cfg: TrainConfig,
    metrics_path: str | Path | None = None,
    ckpt_path: str | Path | None = None,
    log_fn=None,
) -> tuple[EvalReport, SacAgent]:
    seed = cfg.sac.seed
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    sal_fn = SaliencySourceFn(cfg.saliency_source, cfg.predictor_ckpt)
    encoder, feature_dim, channels = build_encoder(cfg)
    agent = SacAgent(
        feature_dim=feature_dim,
        action_dim=env.action_dim,
        config=cfg.sac,
        encoder=encoder,
        hidden_dim=cfg.hidden_dim,
    )
    gamma_macro = cfg.sac.gamma**cfg.action_repeat
    agent.backup_gamma = gamma_macro**cfg.n_step
    buffer = ReplayBuffer(
        capacity=cfg.buffer_capacity,
        obs_shape=(channels, cfg.image_size, cfg.image_size),
        action_dim=env.action_dim,
        seed=seed,
    )
    aug_gen = torch.Generator().manual_seed(seed)
    chash = config_hash(cfg.to_json())
    report = EvalReport()
    # Dedicated eval instance so periodic evaluation never disturbs the
    # training env's episode in progress.
    eval_env = make_env(cfg.env_id)

    def run_eval(step: int) -> None:
        success, avg_return = evaluate_policy(
            agent, eval_env, cfg, sal_fn, cfg.eval_episodes, seed=10_000 + seed
        )
        rec = EvalRecord(
            step=step,
            seed=seed,
            variant=variant_name(cfg),
            task=cfg.env_id,
            success_rate=success,
            avg_return=avg_return,
            config_hash=chash,
        )
        report.append(rec)
        if log_fn:
            log_fn(f"step {step}: success={success:.2f} return={avg_return:.2f}")

    run_eval(0)
    frame, info = env.reset(seed=seed)
    obs = observation_channels(cfg, frame, info, sal_fn)
    episode_seed = seed
    t0 = time.perf_counter()
    step = 0
    updates_done = 0
    next_eval = cfg.eval_every
    # n-step bookkeeping: each pending macro-transition accumulates the
    # discounted rewards of the following n_step−1 macro-transitions. At
    # episode end the partial windows flush with done=True, where the
    # bootstrap term vanishes and the shorter horizon is exact.
    pending: list[list] = []  # [obs, action, reward_sum, discount, count]

    def flush(next_obs_arr, done_flag, full_only: bool):
        while pending and (pending[0][4] >= cfg.n_step or not full_only):
            p_obs, p_act, p_rew, _, _ = pending.pop(0)
            buffer.add(p_obs, p_act, p_rew, next_obs_arr, done_flag)
            if full_only:
                break

    while step < cfg.total_steps:
        if step < cfg.init_steps:
            action = rng.uniform(-1.0, 1.0, size=env.action_dim).astype(np.float32)
        else:
            action = agent.select_action(obs, deterministic=False)
        # One macro-transition: the action is held for action_repeat env steps
        # with a discount-summed reward.
        reward_acc, discount, done = 0.0, 1.0, False
        for _ in range(cfg.action_repeat):
            try:
                frame, reward, done, info = env.step(action)
            except Exception as exc:
                raise RuntimeError(f"environment step failed at step {step}") from exc
            reward_acc += discount * reward
            discount *= cfg.sac.gamma
            step += 1
            if done or step >= cfg.total_steps:
                break
        next_obs = observation_channels(cfg, frame, info, sal_fn)
        for entry in pending:
            entry[2] += entry[3] * reward_acc
            entry[3] *= gamma_macro
            entry[4] += 1
        pending.append([obs, action, reward_acc, gamma_macro, 1])
        flush(next_obs, done, full_only=True)
        obs = next_obs
        if done:
            flush(next_obs, True, full_only=False)
            episode_seed += 1
            frame, info = env.reset(seed=episode_seed)
            obs = observation_channels(cfg, frame, info, sal_fn)

        if step > cfg.init_steps:
            while updates_done < (step - cfg.init_steps) // cfg.sac.update_every:
                batch = buffer.sample(cfg.sac.batch_size)
                if cfg.augment_pad > 0:
                    batch["obs"] = rad_augment(
                        batch["obs"], cfg.augment_kind, cfg.augment_pad, generator=aug_gen
                    ).numpy()
                    batch["next_obs"] = rad_augment(
                        batch["next_obs"], cfg.augment_kind, cfg.augment_pad, generator=aug_gen
                    ).numpy()
                agent.update(batch)
                updates_done += 1

        if step >= next_eval:
            run_eval(step)
            next_eval += cfg.eval_every

    if report.records[-1].step < cfg.total_steps and cfg.total_steps > 0:
        run_eval(cfg.total_steps)
    if log_fn:
        log_fn(f"finished {cfg.total_steps} steps in {time.perf_counter() - t0:.1f}s")

    if metrics_path is not None:
        from .metrics import write_jsonl

        write_jsonl(report.records, metrics_path)
    if ckpt_path is not None:
        save_agent(agent, cfg, ckpt_path)
    return report, agent


def variant_name(cfg: TrainConfig) -> str:
    if cfg.encoder_kind == "cnn":
        return cfg.fusion.value
    return f"mae_{cfg.saliency_source}"


def save_agent(agent: SacAgent, cfg: TrainConfig, path: str | Path) -> None:
    ckpt_io.save_archive(path, ckpt_io.RL_HEADER, {"train": cfg.to_json()}, agent.state_arrays())


def load_agent(path: str | Path, env) -> tuple[SacAgent, TrainConfig]:
    config, arrays = ckpt_io.load_archive(path, ckpt_io.RL_HEADER)
    cfg = TrainConfig.from_json(config["train"])
    encoder, feature_dim, _ = build_encoder(cfg)
    agent = SacAgent(
        feature_dim=feature_dim,
        action_dim=env.action_dim,
        config=cfg.sac,
        encoder=encoder,
        hidden_dim=cfg.hidden_dim,
    )
    agent.load_state_arrays(arrays)
    return agent, cfg

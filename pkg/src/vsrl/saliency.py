"""Few-shot dense saliency predictor: small U-Net trained on human-annotated frames.

The annotation budget is intentionally tiny (single digits of frames), so the
network is small, augmentation is on by default, and the expected workflow is
to overfit the annotated set and rely on conv equivariance for nearby frames.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint as ckpt_io
from .data import Frame, SaliencyMap, SaliencySource

AUG_FLIP = "FLIP"
AUG_CROP = "CROP"
AUG_COLOR_JITTER = "COLOR_JITTER"


@dataclass
class PredictorConfig:
    base_channels: int = 16
    depth_levels: int = 3
    learning_rate: float = 1e-3
    steps: int = 2000
    batch_size: int = 8
    augmentation: frozenset = frozenset({AUG_FLIP, AUG_CROP})
    seed: int = 0
    crop_pad: int = 4

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.depth_levels < 1:
            raise ValueError("depth_levels must be >= 1")
        self.augmentation = frozenset(self.augmentation)

    def to_json(self) -> dict:
        return {
            "base_channels": self.base_channels,
            "depth_levels": self.depth_levels,
            "learning_rate": self.learning_rate,
            "steps": self.steps,
            "batch_size": self.batch_size,
            "augmentation": sorted(self.augmentation),
            "seed": self.seed,
            "crop_pad": self.crop_pad,
        }

    @classmethod
    def from_json(cls, payload: dict) -> "PredictorConfig":
        payload = dict(payload)
        payload["augmentation"] = frozenset(payload.get("augmentation", []))
        return cls(**payload)


@dataclass
class PredictorCheckpoint:
    parameters: dict[str, np.ndarray]
    config: PredictorConfig
    train_loss_history: list[float] = field(default_factory=list)


def _conv_block(c_in: int, c_out: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, padding=1),
        nn.GroupNorm(1, c_out),
        nn.ReLU(inplace=True),
        nn.Conv2d(c_out, c_out, 3, padding=1),
        nn.GroupNorm(1, c_out),
        nn.ReLU(inplace=True),
    )


class SaliencyUNet(nn.Module):
    """Encoder-decoder with skip connections; sigmoid head produces [0,1] maps.

    GroupNorm instead of BatchNorm keeps inference independent of batch
    packing and training deterministic at batch size 1.
    """

    def __init__(self, base_channels: int = 16, depth_levels: int = 3, in_channels: int = 3):
        super().__init__()
        self.depth_levels = depth_levels
        chans = [base_channels * (2**i) for i in range(depth_levels)]
        self.inc = _conv_block(in_channels, chans[0])
        self.downs = nn.ModuleList(
            _conv_block(chans[i], chans[i + 1]) for i in range(depth_levels - 1)
        )
        self.ups = nn.ModuleList(
            nn.ConvTranspose2d(chans[i + 1], chans[i], 2, stride=2)
            for i in reversed(range(depth_levels - 1))
        )
        self.up_blocks = nn.ModuleList(
            _conv_block(2 * chans[i], chans[i]) for i in reversed(range(depth_levels - 1))
        )
        self.head = nn.Conv2d(chans[0], 1, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        skips = [self.inc(x)]
        for down in self.downs:
            skips.append(down(F.max_pool2d(skips[-1], 2)))
        h = skips[-1]
        for up, block, skip in zip(self.ups, self.up_blocks, reversed(skips[:-1])):
            h = up(h)
            h = block(torch.cat([skip, h], dim=1))
        return self.head(h)  # logits


def _stack_pairs(pairs) -> tuple[torch.Tensor, torch.Tensor]:
    frames, targets = [], []
    h, w = pairs[0][0].height, pairs[0][0].width
    for frame, sal in pairs:
        if (frame.height, frame.width) != (h, w):
            raise ValueError("training pairs must share identical dims")
        if sal.values.shape != (h, w):
            raise ValueError("saliency dims must match the paired frame")
        frames.append(frame.pixels.astype(np.float32).transpose(2, 0, 1) / 255.0)
        targets.append(sal.values.astype(np.float32)[None])
    return torch.from_numpy(np.stack(frames)), torch.from_numpy(np.stack(targets))


def _augment_batch(
    x: torch.Tensor, y: torch.Tensor, aug: frozenset, gen: torch.Generator, crop_pad: int
) -> tuple[torch.Tensor, torch.Tensor]:
    b, _, h, w = x.shape
    if AUG_FLIP in aug:
        flip = torch.rand(b, generator=gen) < 0.5
        x = torch.where(flip[:, None, None, None], x.flip(-1), x)
        y = torch.where(flip[:, None, None, None], y.flip(-1), y)
    if AUG_CROP in aug and crop_pad > 0:
        # Pad-then-crop with a shared offset per sample keeps frame/target aligned.
        xp = F.pad(x, [crop_pad] * 4, mode="replicate")
        yp = F.pad(y, [crop_pad] * 4, mode="replicate")
        offs = torch.randint(0, 2 * crop_pad + 1, (b, 2), generator=gen)
        xs = torch.empty_like(x)
        ys = torch.empty_like(y)
        for i in range(b):
            oy, ox = int(offs[i, 0]), int(offs[i, 1])
            xs[i] = xp[i, :, oy : oy + h, ox : ox + w]
            ys[i] = yp[i, :, oy : oy + h, ox : ox + w]
        x, y = xs, ys
    if AUG_COLOR_JITTER in aug:
        scale = 0.8 + 0.4 * torch.rand(b, 1, 1, 1, generator=gen)
        shift = 0.1 * (torch.rand(b, 1, 1, 1, generator=gen) - 0.5)
        x = (x * scale + shift).clamp(0.0, 1.0)
    return x, y


def train_predictor(pairs, config: PredictorConfig) -> PredictorCheckpoint:
    """Fit the U-Net on (frame, HUMAN saliency) pairs with per-pixel BCE."""
    if len(pairs) < 1:
        raise ValueError("need at least one (frame, saliency) pair")
    for _, sal in pairs:
        if sal.source is not SaliencySource.HUMAN:
            raise ValueError("train_predictor requires HUMAN-sourced saliency maps")
    torch.manual_seed(config.seed)
    model = SaliencyUNet(config.base_channels, config.depth_levels)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    frames, targets = _stack_pairs(pairs)
    gen = torch.Generator().manual_seed(config.seed)

    history: list[float] = []
    n = frames.shape[0]
    for step in range(config.steps):
        idx = torch.randint(0, n, (min(config.batch_size, n),), generator=gen)
        x, y = frames[idx], targets[idx]
        x, y = _augment_batch(x, y, config.augmentation, gen, config.crop_pad)
        logits = model(x)
        loss = F.binary_cross_entropy_with_logits(logits, y)
        if not torch.isfinite(loss):
            raise FloatingPointError(
                f"non-finite training loss at step {step}; learning rate likely divergent"
            )
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        history.append(loss.item())

    params = {k: v.detach().cpu().numpy().astype(np.float32) for k, v in model.state_dict().items()}
    return PredictorCheckpoint(parameters=params, config=config, train_loss_history=history)


def build_model(checkpoint: PredictorCheckpoint) -> SaliencyUNet:
    model = SaliencyUNet(checkpoint.config.base_channels, checkpoint.config.depth_levels)
    state = {k: torch.from_numpy(v) for k, v in checkpoint.parameters.items()}
    model.load_state_dict(state)
    model.eval()
    return model


def predict_saliency(checkpoint: PredictorCheckpoint, frame: Frame, model: SaliencyUNet | None = None) -> SaliencyMap:
    if model is None:
        model = build_model(checkpoint)
    x = torch.from_numpy(frame.pixels.astype(np.float32).transpose(2, 0, 1) / 255.0)
    with torch.no_grad():
        probs = torch.sigmoid(model(x.unsqueeze(0)))[0, 0]
    return SaliencyMap(values=probs.numpy().astype(np.float32), source=SaliencySource.PREDICTED)


def eval_saliency(pred: SaliencyMap, gt: SaliencyMap, threshold: float) -> dict[str, float]:
    if pred.values.shape != gt.values.shape:
        raise ValueError("saliency dims must match for evaluation")
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    p = pred.values >= threshold
    g = gt.values >= threshold
    union = float(np.logical_or(p, g).sum())
    inter = float(np.logical_and(p, g).sum())
    iou = 1.0 if union == 0 else inter / union
    mae = float(np.abs(pred.values - gt.values).mean())
    return {"iou": iou, "mae": mae}


def save_checkpoint(checkpoint: PredictorCheckpoint, path: str | Path) -> None:
    config = checkpoint.config.to_json()
    arrays = dict(checkpoint.parameters)
    arrays["train_loss_history"] = np.asarray(checkpoint.train_loss_history, dtype=np.float32)
    ckpt_io.save_archive(path, ckpt_io.SALIENCY_HEADER, config, arrays)


def load_checkpoint(path: str | Path) -> PredictorCheckpoint:
    config, arrays = ckpt_io.load_archive(path, ckpt_io.SALIENCY_HEADER)
    history = arrays.pop("train_loss_history").tolist()
    return PredictorCheckpoint(
        parameters=arrays,
        config=PredictorConfig.from_json(config),
        train_loss_history=history,
    )

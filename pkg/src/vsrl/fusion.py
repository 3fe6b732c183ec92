"""Input fusion variants for the CNN encoder and the encoder itself.

Four ways of feeding saliency to a jointly trained conv encoder: the map
alone, plain RGB, RGB masked by the map, or RGB with the map concatenated
as a fourth channel. The encoder output dim never depends on the variant,
so policy heads are variant-agnostic.
"""

from __future__ import annotations

import math

from dataclasses import dataclass
from enum import Enum

import numpy as np
import torch
import torch.nn as nn

from .data import Frame, SaliencyMap

FEATURE_DIM = 50
CONV_CHANNELS = 32
# RAD-family default: stride 2 on the first layer, 1 on the rest.
DEFAULT_STRIDES = (2, 1, 1, 1)
# Cheaper stack for CPU-budget toy runs: extra stride-2 layers shrink the
# flattened feature map ~5x at negligible cost to control performance.
FAST_STRIDES = (2, 2, 1, 1)


class FusionVariant(Enum):
    SALIENCY_ONLY = "saliency_only"
    RGB = "rgb"
    RGB_TIMES_SALIENCY = "rgb_x_saliency"
    RGB_S = "rgb_s"


VARIANT_CHANNELS = {
    FusionVariant.SALIENCY_ONLY: 1,
    FusionVariant.RGB: 3,
    FusionVariant.RGB_TIMES_SALIENCY: 3,
    FusionVariant.RGB_S: 4,
}


@dataclass(frozen=True)
class EncoderInput:
    """C×H×W float32 in [0,1] with per-channel labels."""

    channels: np.ndarray
    channel_semantics: tuple[str, ...]

    def __post_init__(self):
        if self.channels.ndim != 3:
            raise ValueError(f"encoder input must be C×H×W, got {self.channels.shape}")
        if self.channels.shape[0] != len(self.channel_semantics):
            raise ValueError("channel count does not match channel_semantics")


def make_input(
    variant: FusionVariant,
    frame: Frame,
    saliency: SaliencyMap | None = None,
    binarize_mask: bool = False,
) -> EncoderInput:
    if variant is not FusionVariant.RGB:
        if saliency is None:
            raise ValueError(f"variant {variant.value} requires a saliency map")
        if saliency.values.shape != (frame.height, frame.width):
            raise ValueError(
                f"saliency dims {saliency.values.shape} do not match frame "
                f"{(frame.height, frame.width)}"
            )
    rgb = frame.pixels.astype(np.float32).transpose(2, 0, 1) / 255.0
    if variant is FusionVariant.RGB:
        return EncoderInput(channels=rgb, channel_semantics=("R", "G", "B"))
    sal = saliency.values.astype(np.float32)
    if binarize_mask:
        sal = (sal >= 0.5).astype(np.float32)
    if variant is FusionVariant.SALIENCY_ONLY:
        return EncoderInput(channels=sal[None], channel_semantics=("S",))
    if variant is FusionVariant.RGB_TIMES_SALIENCY:
        return EncoderInput(channels=rgb * sal[None], channel_semantics=("R*S", "G*S", "B*S"))
    return EncoderInput(
        channels=np.concatenate([rgb, sal[None]], axis=0),
        channel_semantics=("R", "G", "B", "S"),
    )


class PixelEncoder(nn.Module):
    """Conv stack + linear projection, shared by critic and (detached) actor."""

    def __init__(
        self,
        in_channels: int,
        image_size: int,
        feature_dim: int = FEATURE_DIM,
        conv_channels: int = CONV_CHANNELS,
        strides: tuple[int, ...] = DEFAULT_STRIDES,
        pool_input: int = 1,
    ):
        super().__init__()
        convs = []
        c = in_channels
        size = image_size // pool_input
        for s in strides:
            convs.append(nn.Conv2d(c, conv_channels, kernel_size=3, stride=s))
            c = conv_channels
            size = (size - 3) // s + 1
            if size < 1:
                raise ValueError(f"image_size {image_size} too small for strides {strides}")
        self.convs = nn.ModuleList(convs)
        self.flat_dim = conv_channels * size * size
        self.fc = nn.Linear(self.flat_dim, feature_dim)
        self.ln = nn.LayerNorm(feature_dim)
        self.in_channels = in_channels
        self.feature_dim = feature_dim
        # Average pooling is linear, so blob centroids survive downsampling;
        # CPU conv cost drops ~pool² for desk-scale runs.
        self.pool_input = pool_input

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.in_channels:
            raise ValueError(f"expected {self.in_channels} input channels, got {x.shape[1]}")
        h = x
        if self.pool_input > 1:
            h = torch.nn.functional.avg_pool2d(h, self.pool_input)
        for conv in self.convs:
            h = torch.relu(conv(h))
        h = self.fc(h.reshape(h.shape[0], -1))
        return torch.tanh(self.ln(h))


class KeypointEncoder(nn.Module):
    """Conv stack + per-channel spatial softmax into expected (x, y) keypoints.

    Positions of salient blobs become near-linear functions of the features,
    which is what a reaching policy needs; an order of magnitude cheaper than
    the full conv encoder at desk scale.
    """

    def __init__(
        self,
        in_channels: int,
        image_size: int,
        feature_dim: int = FEATURE_DIM,
        conv_channels: int = 16,
        num_keypoints: int = 16,
        strides: tuple[int, ...] = (2, 2, 1),
        pool_input: int = 1,
    ):
        super().__init__()
        convs = []
        c = in_channels
        size = image_size // pool_input
        chans = [conv_channels] * (len(strides) - 1) + [num_keypoints]
        for ch, s in zip(chans, strides):
            convs.append(nn.Conv2d(c, ch, kernel_size=3, stride=s))
            c = ch
            size = (size - 3) // s + 1
        self.convs = nn.ModuleList(convs)
        self.map_size = size
        coords = torch.linspace(-1.0, 1.0, size)
        self.register_buffer("grid_x", coords.repeat(size, 1).reshape(-1))
        self.register_buffer("grid_y", coords.reshape(-1, 1).repeat(1, size).reshape(-1))
        # Learnable per-channel softmax sharpness; start sharp enough that
        # keypoints track blobs instead of the global centroid.
        self.log_temp = nn.Parameter(torch.full((num_keypoints, 1), math.log(5.0)))
        self.fc = nn.Linear(2 * num_keypoints, feature_dim)
        self.ln = nn.LayerNorm(feature_dim)
        self.in_channels = in_channels
        self.feature_dim = feature_dim
        self.pool_input = pool_input

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.in_channels:
            raise ValueError(f"expected {self.in_channels} input channels, got {x.shape[1]}")
        h = x
        if self.pool_input > 1:
            h = torch.nn.functional.avg_pool2d(h, self.pool_input)
        for conv in self.convs[:-1]:
            h = torch.relu(conv(h))
        h = self.convs[-1](h)
        b, k, _, _ = h.shape
        attn = torch.softmax(h.reshape(b, k, -1) * self.log_temp.exp(), dim=-1)
        kx = (attn * self.grid_x).sum(-1)
        ky = (attn * self.grid_y).sum(-1)
        feat = self.fc(torch.cat([kx, ky], dim=-1))
        return torch.tanh(self.ln(feat))


def cnn_encode(encoder: nn.Module, inp: EncoderInput) -> np.ndarray:
    """Encode a single fused observation; deterministic given params and input."""
    with torch.no_grad():
        x = torch.from_numpy(np.ascontiguousarray(inp.channels)).unsqueeze(0)
        x = x.to(next(encoder.parameters()).dtype)
        feat = encoder(x)[0]
    out = feat.cpu().numpy()
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("encoder produced non-finite features")
    return out

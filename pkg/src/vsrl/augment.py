"""Replay-batch image augmentation and the contrastive auxiliary loss.

Both augmentation kinds keep the output shape equal to the input shape: the
image is padded then cropped back, with an independent offset per batch
element and the SAME offset for every channel of one sample, so RGB and
saliency stay spatially registered.
"""

from __future__ import annotations

from enum import Enum

import numpy as np
import torch
import torch.nn.functional as F


class AugmentKind(Enum):
    RANDOM_CROP = "random_crop"
    RANDOM_SHIFT = "random_shift"


def rad_augment(
    batch: torch.Tensor | np.ndarray,
    kind: AugmentKind = AugmentKind.RANDOM_SHIFT,
    pad: int = 4,
    seed: int | None = None,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Pad-and-recrop augmentation over a B×C×H×W batch.

    RANDOM_SHIFT zero-pads (interior pixels are pure translates of the
    source); RANDOM_CROP replicate-pads so crops never introduce zeros.
    """
    if pad < 0:
        raise ValueError("pad must be >= 0")
    x = torch.as_tensor(batch)
    if x.ndim != 4:
        raise ValueError(f"expected B×C×H×W batch, got shape {tuple(x.shape)}")
    b, _, h, w = x.shape
    if pad >= h or pad >= w:
        raise ValueError(f"pad {pad} must be smaller than spatial dims {(h, w)}")
    if pad == 0:
        return x
    if generator is None:
        generator = torch.Generator()
        generator.manual_seed(0 if seed is None else seed)

    mode = "constant" if kind is AugmentKind.RANDOM_SHIFT else "replicate"
    padded = F.pad(x, [pad] * 4, mode=mode)
    offs = torch.randint(0, 2 * pad + 1, (b, 2), generator=generator)
    out = torch.empty_like(x)
    for i in range(b):
        oy, ox = int(offs[i, 0]), int(offs[i, 1])
        out[i] = padded[i, :, oy : oy + h, ox : ox + w]
    return out


def curl_loss(
    anchors: torch.Tensor,
    positives: torch.Tensor,
    W: torch.Tensor,
    temperature: float = 1.0,
) -> torch.Tensor:
    """InfoNCE over bilinear similarities; positives sit on the diagonal."""
    if anchors.shape[0] < 2:
        raise ValueError("contrastive loss needs a batch of at least 2")
    logits = anchors @ (W @ positives.t()) / temperature
    logits = logits - logits.max(dim=1, keepdim=True).values.detach()
    labels = torch.arange(anchors.shape[0], device=anchors.device)
    return F.cross_entropy(logits, labels)

"""Multimodal masked-autoencoder pretraining over RGB plus one auxiliary map.

Images are tokenized into per-modality patch grids, most tokens are masked,
and a shared transformer encoder plus small per-modality decoders reconstruct
the masked tokens. The pooled encoder output is the downstream policy
representation; the pretraining-only (PO) mode drops the auxiliary modality
entirely at inference time.

Desk-scale defaults (64×64 inputs, patch 8, width 128, 4 blocks) pretrain in
minutes on CPU.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import checkpoint as ckpt_io
from .data import AuxKind, AuxModalityMap, Frame, SaliencyMap


class Modality(Enum):
    RGB = "rgb"
    SALIENCY = "saliency"
    DEPTH = "depth"
    NORMAL = "normal"


MODALITY_CHANNELS = {
    Modality.RGB: 3,
    Modality.SALIENCY: 1,
    Modality.DEPTH: 1,
    Modality.NORMAL: 3,
}

# Canonical ordering used for budget remainders and token concatenation.
MODALITY_ORDER = [Modality.RGB, Modality.SALIENCY, Modality.DEPTH, Modality.NORMAL]


class MaskAllocation(Enum):
    UNIFORM = "uniform"
    DIRICHLET = "dirichlet"


class PretrainKind(Enum):
    RGB_ONLY = "rgb_only"
    RGB_PLUS_AUX = "rgb_plus_aux"


@dataclass(frozen=True)
class PretrainMode:
    mode: PretrainKind
    aux: Modality | None = None
    inference_uses_aux: bool = False

    def __post_init__(self):
        if (self.mode is PretrainKind.RGB_PLUS_AUX) != (self.aux is not None):
            raise ValueError("aux modality must be set iff mode is RGB_PLUS_AUX")
        if self.aux is Modality.RGB:
            raise ValueError("aux modality cannot be RGB")
        if self.inference_uses_aux and self.mode is not PretrainKind.RGB_PLUS_AUX:
            raise ValueError("inference_uses_aux requires RGB_PLUS_AUX pretraining")


@dataclass(frozen=True)
class PatchGrid:
    """Row-major N×D_patch tokens of one modality (N=(H/P)², D_patch=P·P·C)."""

    tokens: np.ndarray
    modality: Modality
    patch_size: int
    grid_h: int
    grid_w: int


@dataclass(frozen=True)
class MaskPlan:
    visible_indices: dict[Modality, np.ndarray]
    total_visible_budget: int
    seed: int


def patchify(image: np.ndarray, patch_size: int, modality: Modality = Modality.RGB) -> PatchGrid:
    if image.ndim == 2:
        image = image[..., None]
    h, w, c = image.shape
    if h % patch_size or w % patch_size:
        raise ValueError(f"image dims {(h, w)} not divisible by patch size {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    tokens = (
        image.reshape(gh, patch_size, gw, patch_size, c)
        .transpose(0, 2, 1, 3, 4)
        .reshape(gh * gw, patch_size * patch_size * c)
    )
    return PatchGrid(tokens=tokens, modality=modality, patch_size=patch_size, grid_h=gh, grid_w=gw)


def unpatchify(grid: PatchGrid, channels: int | None = None) -> np.ndarray:
    if channels is None:
        channels = MODALITY_CHANNELS[grid.modality]
    p, gh, gw = grid.patch_size, grid.grid_h, grid.grid_w
    image = (
        grid.tokens.reshape(gh, gw, p, p, channels)
        .transpose(0, 2, 1, 3, 4)
        .reshape(gh * p, gw * p, channels)
    )
    return image


def sample_mask(
    token_counts: dict[Modality, int],
    visible_budget: int,
    allocation: MaskAllocation = MaskAllocation.UNIFORM,
    seed: int = 0,
    alpha: float = 1.0,
) -> MaskPlan:
    """Split the visible-token budget across modalities and pick indices."""
    mods = [m for m in MODALITY_ORDER if m in token_counts]
    total = sum(token_counts[m] for m in mods)
    if visible_budget > total:
        raise ValueError(f"visible budget {visible_budget} exceeds total token count {total}")
    rng = np.random.default_rng(seed)

    if allocation is MaskAllocation.UNIFORM:
        base = visible_budget // len(mods)
        counts = {m: base for m in mods}
        counts[mods[0]] += visible_budget - base * len(mods)  # remainder to RGB
    else:
        shares = rng.dirichlet([alpha] * len(mods))
        raw = shares * visible_budget
        counts = {m: int(np.floor(r)) for m, r in zip(mods, raw)}
        remainder = visible_budget - sum(counts.values())
        by_frac = sorted(range(len(mods)), key=lambda i: raw[i] - np.floor(raw[i]), reverse=True)
        for i in range(remainder):
            counts[mods[by_frac[i % len(mods)]]] += 1

    # Clip to per-modality capacity; push overflow onto modalities with room.
    overflow = 0
    for m in mods:
        if counts[m] > token_counts[m]:
            overflow += counts[m] - token_counts[m]
            counts[m] = token_counts[m]
    for m in mods:
        if overflow == 0:
            break
        room = token_counts[m] - counts[m]
        take = min(room, overflow)
        counts[m] += take
        overflow -= take

    visible = {
        m: np.sort(rng.choice(token_counts[m], size=counts[m], replace=False))
        for m in mods
    }
    return MaskPlan(visible_indices=visible, total_visible_budget=visible_budget, seed=seed)


def _sincos_1d(dim: int, positions: np.ndarray) -> np.ndarray:
    omega = 1.0 / (10000 ** (np.arange(dim // 2, dtype=np.float64) / (dim / 2)))
    angles = np.outer(positions, omega)
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def sincos_pos_embed_2d(dim: int, grid_h: int, grid_w: int) -> np.ndarray:
    ys, xs = np.meshgrid(np.arange(grid_h), np.arange(grid_w), indexing="ij")
    emb = np.concatenate(
        [_sincos_1d(dim // 2, ys.reshape(-1)), _sincos_1d(dim // 2, xs.reshape(-1))], axis=1
    )
    return emb.astype(np.float32)


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


@dataclass
class MaeConfig:
    image_size: int = 64
    patch_size: int = 8
    width: int = 128
    blocks: int = 4
    heads: int = 4
    dec_width: int = 64
    dec_blocks: int = 1
    mask_ratio: float = 0.75
    allocation: MaskAllocation = MaskAllocation.UNIFORM
    dirichlet_alpha: float = 1.0
    norm_pix: bool = False
    po_mask_tokens: bool = False
    finetune: bool = False
    modalities: tuple[Modality, ...] = (Modality.RGB, Modality.SALIENCY)

    def to_json(self) -> dict:
        payload = self.__dict__.copy()
        payload["allocation"] = self.allocation.value
        payload["modalities"] = [m.value for m in self.modalities]
        return payload

    @classmethod
    def from_json(cls, payload: dict) -> "MaeConfig":
        payload = dict(payload)
        payload["allocation"] = MaskAllocation(payload["allocation"])
        payload["modalities"] = tuple(Modality(m) for m in payload["modalities"])
        return cls(**payload)

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def tokens_per_modality(self) -> int:
        return self.grid_size**2


class MaeModel(nn.Module):
    """Shared encoder, per-modality projections and decoders, one mask token."""

    def __init__(self, config: MaeConfig):
        super().__init__()
        self.config = config
        g = config.grid_size
        d_patch = {m: config.patch_size**2 * MODALITY_CHANNELS[m] for m in config.modalities}

        self.input_proj = nn.ModuleDict(
            {m.value: nn.Linear(d_patch[m], config.width) for m in config.modalities}
        )
        self.modality_embed = nn.ParameterDict(
            {m.value: nn.Parameter(torch.zeros(config.width)) for m in config.modalities}
        )
        self.register_buffer(
            "pos_embed", torch.from_numpy(sincos_pos_embed_2d(config.width, g, g))
        )
        self.blocks = nn.ModuleList(Block(config.width, config.heads) for _ in range(config.blocks))
        self.norm = nn.LayerNorm(config.width)

        self.mask_token = nn.Parameter(torch.zeros(config.width))
        self.register_buffer(
            "dec_pos_embed", torch.from_numpy(sincos_pos_embed_2d(config.dec_width, g, g))
        )
        self.dec_proj = nn.ModuleDict(
            {m.value: nn.Linear(config.width, config.dec_width) for m in config.modalities}
        )
        self.dec_blocks = nn.ModuleDict(
            {
                m.value: nn.ModuleList(
                    Block(config.dec_width, max(1, config.heads // 2))
                    for _ in range(config.dec_blocks)
                )
                for m in config.modalities
            }
        )
        self.dec_norm = nn.ModuleDict(
            {m.value: nn.LayerNorm(config.dec_width) for m in config.modalities}
        )
        self.dec_out = nn.ModuleDict(
            {m.value: nn.Linear(config.dec_width, d_patch[m]) for m in config.modalities}
        )
        self._init_weights()

    def _init_weights(self):
        for p in [self.mask_token, *self.modality_embed.values()]:
            nn.init.normal_(p, std=0.02)
        for mod in self.modules():
            if isinstance(mod, nn.Linear):
                nn.init.xavier_uniform_(mod.weight)
                if mod.bias is not None:
                    nn.init.zeros_(mod.bias)

    def embed_tokens(self, batch: dict[Modality, torch.Tensor], plan: MaskPlan | None):
        """Project visible tokens of each modality; returns (B,V,width) plus spans."""
        parts = []
        spans: dict[Modality, tuple[int, int]] = {}
        offset = 0
        for m in MODALITY_ORDER:
            if m not in batch:
                continue
            tokens = batch[m]
            if plan is not None:
                idx = torch.as_tensor(plan.visible_indices[m], dtype=torch.long)
                tokens = tokens[:, idx]
                pos = self.pos_embed[idx]
            else:
                pos = self.pos_embed
            x = self.input_proj[m.value](tokens) + pos + self.modality_embed[m.value]
            parts.append(x)
            spans[m] = (offset, offset + x.shape[1])
            offset += x.shape[1]
        return torch.cat(parts, dim=1), spans

    def encode(self, batch: dict[Modality, torch.Tensor], plan: MaskPlan | None = None):
        x, spans = self.embed_tokens(batch, plan)
        for block in self.blocks:
            x = block(x)
        return self.norm(x), spans

    def decode(
        self,
        encoded: torch.Tensor,
        spans: dict[Modality, tuple[int, int]],
        plan: MaskPlan,
        batch_size: int,
    ) -> dict[Modality, torch.Tensor]:
        n = self.config.tokens_per_modality
        recons = {}
        for m, (lo, hi) in spans.items():
            full = self.mask_token.expand(batch_size, n, -1).clone()
            idx = torch.as_tensor(plan.visible_indices[m], dtype=torch.long)
            if len(idx):
                full[:, idx] = encoded[:, lo:hi]
            h = self.dec_proj[m.value](full) + self.dec_pos_embed
            for block in self.dec_blocks[m.value]:
                h = block(h)
            recons[m] = self.dec_out[m.value](self.dec_norm[m.value](h))
        return recons


def masked_reconstruction_loss(
    reconstructions: dict[Modality, torch.Tensor],
    targets: dict[Modality, torch.Tensor],
    plan: MaskPlan,
    norm_pix: bool = False,
) -> torch.Tensor:
    """MSE over masked token positions only, averaged across modalities.

    Visible positions never enter the loss, so perturbing a reconstruction
    there changes nothing.
    """
    per_modality = []
    for m, rec in reconstructions.items():
        tgt = targets[m]
        if norm_pix:
            mean = tgt.mean(dim=-1, keepdim=True)
            var = tgt.var(dim=-1, keepdim=True)
            tgt = (tgt - mean) / (var + 1e-6).sqrt()
        n = rec.shape[1]
        masked = np.setdiff1d(np.arange(n), plan.visible_indices[m])
        if len(masked) == 0:
            continue
        idx = torch.as_tensor(masked, dtype=torch.long)
        per_modality.append(((rec[:, idx] - tgt[:, idx]) ** 2).mean())
    if not per_modality:
        return torch.zeros((), dtype=next(iter(reconstructions.values())).dtype)
    return torch.stack(per_modality).mean()


def mae_forward(
    model: MaeModel, batch: dict[Modality, torch.Tensor], plan: MaskPlan
) -> dict:
    for m, tokens in batch.items():
        if tokens.shape[1] != model.config.tokens_per_modality:
            raise ValueError(
                f"{m.value} token count {tokens.shape[1]} inconsistent with model grid"
            )
    encoded, spans = model.encode(batch, plan)
    recons = model.decode(encoded, spans, plan, batch_size=next(iter(batch.values())).shape[0])
    loss = masked_reconstruction_loss(recons, batch, plan, norm_pix=model.config.norm_pix)
    if not torch.isfinite(loss):
        raise FloatingPointError("non-finite MAE loss")
    return {"reconstructions": recons, "loss": loss}


def frame_to_tokens(frame: Frame, patch_size: int) -> np.ndarray:
    return patchify(frame.pixels.astype(np.float32) / 255.0, patch_size, Modality.RGB).tokens


def map_to_tokens(values: np.ndarray, patch_size: int, modality: Modality) -> np.ndarray:
    return patchify(values.astype(np.float32), patch_size, modality).tokens


def encode_for_policy(
    model: MaeModel,
    mode: PretrainMode,
    frame: Frame,
    saliency: SaliencyMap | None = None,
    aux: AuxModalityMap | None = None,
) -> np.ndarray:
    """Mean-pooled all-token encoder representation for the downstream policy."""
    cfg = model.config
    aux_supplied = saliency is not None or aux is not None
    if mode.inference_uses_aux and not aux_supplied:
        raise ValueError("this mode consumes the auxiliary modality at inference; none supplied")
    if not mode.inference_uses_aux and aux_supplied:
        raise ValueError("auxiliary input supplied but this mode is RGB-only at inference")

    batch: dict[Modality, torch.Tensor] = {
        Modality.RGB: torch.from_numpy(frame_to_tokens(frame, cfg.patch_size)).unsqueeze(0)
    }
    if mode.inference_uses_aux:
        assert mode.aux is not None
        if mode.aux is Modality.SALIENCY:
            if saliency is None:
                raise ValueError("saliency map required for this mode")
            values = saliency.values
        else:
            if aux is None:
                raise ValueError(f"{mode.aux.value} map required for this mode")
            values = aux.values
        batch[mode.aux] = torch.from_numpy(
            map_to_tokens(values, cfg.patch_size, mode.aux)
        ).unsqueeze(0)
    elif mode.mode is PretrainKind.RGB_PLUS_AUX and cfg.po_mask_tokens:
        # PO variant behind a flag: substitute mask tokens for the aux modality
        # instead of dropping it.
        assert mode.aux is not None
        n = cfg.tokens_per_modality
        with torch.no_grad():
            x_rgb = (
                model.input_proj[Modality.RGB.value](batch[Modality.RGB])
                + model.pos_embed
                + model.modality_embed[Modality.RGB.value]
            )
            x_aux = (
                model.mask_token.expand(1, n, -1)
                + model.pos_embed
                + model.modality_embed[mode.aux.value]
            )
            x = torch.cat([x_rgb, x_aux], dim=1)
            for block in model.blocks:
                x = block(x)
            return model.norm(x).mean(dim=1)[0].numpy()

    with torch.no_grad():
        encoded, _ = model.encode(batch, plan=None)
    return encoded.mean(dim=1)[0].numpy()


def linear_probe(representations, targets, seed: int = 0, ridge: float = 1e-3) -> dict:
    """Closed-form ridge regression probe with a fixed 75/25 split."""
    X = np.asarray(representations, dtype=np.float64)
    Y = np.asarray(targets, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    n = X.shape[0]
    if n < 8:
        raise ValueError("linear probe needs at least 8 examples")
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    n_train = int(round(n * 0.75))
    train, val = order[:n_train], order[n_train:]

    Xb = np.concatenate([X, np.ones((n, 1))], axis=1)
    reg = ridge * np.eye(Xb.shape[1])
    reg[-1, -1] = 0.0  # intercept unpenalized
    A = Xb[train].T @ Xb[train] + reg
    W = np.linalg.solve(A, Xb[train].T @ Y[train])
    val_mse = float(((Xb[val] @ W - Y[val]) ** 2).mean())
    return {"val_mse": val_mse, "weights": W}


@dataclass
class PretrainResult:
    model: MaeModel
    loss_history: list[float] = field(default_factory=list)


def pretrain(
    images: dict[Modality, np.ndarray],
    config: MaeConfig,
    steps: int,
    batch_size: int = 16,
    lr: float = 1e-3,
    seed: int = 0,
) -> PretrainResult:
    """Run the masked-reconstruction pretraining loop over in-memory images.

    `images` maps each modality to an (N, H, W, C) float array in [0,1].
    """
    torch.manual_seed(seed)
    model = MaeModel(config)
    opt = torch.optim.AdamW(model.parameters(), lr=lr)
    rng = np.random.default_rng(seed)

    mods = [m for m in MODALITY_ORDER if m in images]
    tokens = {
        m: torch.from_numpy(
            np.stack([patchify(img, config.patch_size, m).tokens for img in images[m]])
        ).float()
        for m in mods
    }
    n_images = tokens[mods[0]].shape[0]
    token_counts = {m: config.tokens_per_modality for m in mods}
    budget = int(round((1.0 - config.mask_ratio) * sum(token_counts.values())))

    history = []
    for step in range(steps):
        idx = rng.integers(0, n_images, size=min(batch_size, n_images))
        batch = {m: tokens[m][idx] for m in mods}
        plan = sample_mask(
            token_counts,
            budget,
            allocation=config.allocation,
            seed=int(rng.integers(0, 2**31 - 1)),
            alpha=config.dirichlet_alpha,
        )
        out = mae_forward(model, batch, plan)
        opt.zero_grad(set_to_none=True)
        out["loss"].backward()
        opt.step()
        history.append(out["loss"].item())
    model.eval()
    return PretrainResult(model=model, loss_history=history)


def save_mae(result_or_model, path: str | Path, mode: PretrainMode | None = None) -> None:
    model = result_or_model.model if isinstance(result_or_model, PretrainResult) else result_or_model
    history = result_or_model.loss_history if isinstance(result_or_model, PretrainResult) else []
    config = model.config.to_json()
    if mode is not None:
        config["pretrain_mode"] = {
            "mode": mode.mode.value,
            "aux": mode.aux.value if mode.aux else None,
            "inference_uses_aux": mode.inference_uses_aux,
        }
    arrays = {k: v.detach().cpu().numpy().astype(np.float32) for k, v in model.state_dict().items()}
    arrays["loss_history"] = np.asarray(history, dtype=np.float32)
    ckpt_io.save_archive(path, ckpt_io.MAE_HEADER, config, arrays)


def load_mae(path: str | Path) -> tuple[MaeModel, PretrainMode | None]:
    config, arrays = ckpt_io.load_archive(path, ckpt_io.MAE_HEADER)
    arrays.pop("loss_history", None)
    mode_payload = config.pop("pretrain_mode", None)
    model = MaeModel(MaeConfig.from_json(config))
    model.load_state_dict({k: torch.from_numpy(v) for k, v in arrays.items()})
    model.eval()
    mode = None
    if mode_payload:
        mode = PretrainMode(
            mode=PretrainKind(mode_payload["mode"]),
            aux=Modality(mode_payload["aux"]) if mode_payload["aux"] else None,
            inference_uses_aux=bool(mode_payload["inference_uses_aux"]),
        )
    return model, mode

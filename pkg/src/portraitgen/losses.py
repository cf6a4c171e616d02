"""Training objectives: noise MSE, identity cosine loss, attention localization."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import List, Optional, Sequence, Tuple, Union

import torch
import torch.nn.functional as F

from .conditioning import cosine_similarity
from .schedule import NoiseSchedule, one_step_reverse


@dataclass
class LossWeights:
    beta: float = 0.8                 # identity-token attention ceiling inside the face
    gamma: float = 0.1                # expression-token ceiling
    lambda_id_loc: float = 0.001
    mu_expr_loc: float = 0.01
    R_t: int = 250                    # identity loss only for t <= R_t
    face_region_loss_fraction: float = 0.5
    identity_weight: float = 1.0      # ablation knob; 0 drops the identity loss

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0 or not 0.0 <= self.gamma <= 1.0:
            raise ValueError("beta and gamma must lie in [0, 1]")
        if self.lambda_id_loc < 0 or self.mu_expr_loc < 0 or self.identity_weight < 0:
            raise ValueError("loss weights must be non-negative")
        if self.R_t < 1:
            raise ValueError("R_t must be >= 1")
        if not 0.0 <= self.face_region_loss_fraction <= 1.0:
            raise ValueError("face_region_loss_fraction must lie in [0, 1]")

    def check_schedule(self, T: int):
        if self.R_t > T:
            raise ValueError(f"R_t={self.R_t} exceeds T={T}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossReport:
    noise: float
    identity: float
    localization: float
    total: float
    gated: bool = False   # True when t > R_t switched the identity loss off


class IdentityCodec:
    """Pixel space is the latent space: E and D only move the channel axis."""

    def encode(self, image: torch.Tensor) -> torch.Tensor:
        return image.movedim(-1, -3)

    def decode(self, latent: torch.Tensor) -> torch.Tensor:
        return latent.movedim(-3, -1)


# --- noise ------------------------------------------------------------------

def noise_loss(eps_pred: torch.Tensor, eps_true: torch.Tensor,
               region_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Mean squared error, optionally over mask >= 0.5 positions only.

    ``region_mask`` is spatial (H x W) and broadcasts over channels.
    """
    if eps_pred.shape != eps_true.shape:
        raise ValueError(f"shape mismatch: {tuple(eps_pred.shape)} vs {tuple(eps_true.shape)}")
    sq = (eps_pred - eps_true) ** 2
    if region_mask is None:
        return sq.mean()
    sel = (torch.as_tensor(region_mask) >= 0.5).to(sq.dtype)
    sel = sel.expand_as(sq) if sel.ndim == sq.ndim else sel.unsqueeze(-3).expand_as(sq)
    count = sel.sum()
    if count == 0:
        raise ValueError("face region is empty (no mask value >= 0.5)")
    return (sq * sel).sum() / count


def batched_noise_loss(eps_pred: torch.Tensor, eps_true: torch.Tensor,
                       region_masks: torch.Tensor, use_region: torch.Tensor) -> torch.Tensor:
    """Per-sample noise loss for B x C x H x W; ``use_region`` picks masked rows."""
    sq = ((eps_pred - eps_true) ** 2)
    full = sq.mean(dim=(1, 2, 3))
    sel = (region_masks >= 0.5).to(sq.dtype).unsqueeze(1).expand_as(sq)
    count = sel.sum(dim=(1, 2, 3))
    if bool(((count == 0) & use_region).any()):
        raise ValueError("face region is empty (no mask value >= 0.5)")
    masked = (sq * sel).sum(dim=(1, 2, 3)) / count.clamp_min(1.0)
    return torch.where(use_region, masked, full)


# --- masks ------------------------------------------------------------------

def resample_mask(mask: torch.Tensor, target: Union[int, Tuple[int, int]]) -> torch.Tensor:
    """Area-average a (... x H x W) mask down to ``target`` resolution."""
    mask = torch.as_tensor(mask)
    th, tw = (target, target) if isinstance(target, int) else target
    h, w = mask.shape[-2:]
    if th > h or tw > w:
        raise ValueError(f"cannot upsample mask {h}x{w} to {th}x{tw}")
    if (th, tw) == (h, w):
        return mask
    lead = mask.shape[:-2]
    flat = mask.reshape(-1, 1, h, w)
    if h % th == 0 and w % tw == 0:
        out = F.avg_pool2d(flat, (h // th, w // tw))
    else:
        out = F.adaptive_avg_pool2d(flat, (th, tw))
    return out.reshape(*lead, th, tw)


class FaceMask:
    """Full-resolution mask plus lazily resampled per-layer copies."""

    def __init__(self, full: torch.Tensor):
        self.full = torch.as_tensor(full)
        if self.full.min() < 0 or self.full.max() > 1:
            raise ValueError("face mask values must lie in [0, 1]")
        self._cache = {}

    def at(self, resolution: Tuple[int, int]) -> torch.Tensor:
        resolution = tuple(resolution)
        if resolution not in self._cache:
            self._cache[resolution] = resample_mask(self.full, resolution)
        return self._cache[resolution]

    def layers(self, resolutions: Sequence[Tuple[int, int]]) -> List[torch.Tensor]:
        return [self.at(r) for r in resolutions]


# --- localization -----------------------------------------------------------

def truncated_localization(amap: torch.Tensor, mask: torch.Tensor, ceiling: float) -> torch.Tensor:
    """mean(A (1 - M)) + mean(relu(ceiling - A) M) over the last two axes."""
    if amap.shape[-2:] != mask.shape[-2:]:
        raise ValueError(f"resolution mismatch: map {tuple(amap.shape[-2:])} vs mask {tuple(mask.shape[-2:])}")
    mask = mask.to(amap.dtype)
    outside = (amap * (1.0 - mask)).mean(dim=(-2, -1))
    inside = (torch.relu(ceiling - amap) * mask).mean(dim=(-2, -1))
    return outside + inside


def localization_loss(attn, masks, identity_index, emotion_index, weights: LossWeights) -> torch.Tensor:
    """Attention localization loss averaged over layers.

    ``attn`` is an AttentionRecord (maps ``n x H x W`` or ``B x n x H x W``);
    ``masks`` a FaceMask or a list of per-layer masks. For batches, the
    indices are sequences and an emotion index of ``None`` drops that row's
    expression term. Returns a scalar, or a B-vector for batches.
    """
    maps = attn.maps
    if isinstance(masks, FaceMask):
        layer_masks = masks.layers([m.shape[-2:] for m in maps])
    else:
        layer_masks = list(masks)
    if len(layer_masks) != len(maps):
        raise ValueError("need one mask per attention layer")
    batched = maps[0].ndim == 4
    if not batched:
        maps = [m.unsqueeze(0) for m in maps]
        layer_masks = [m.unsqueeze(0) for m in layer_masks]
        identity_index = [identity_index]
        emotion_index = [emotion_index]
    b = maps[0].shape[0]
    rows = torch.arange(b)
    id_idx = torch.as_tensor(list(identity_index), dtype=torch.long)
    has_emo = torch.tensor([e is not None for e in emotion_index])
    emo_idx = torch.as_tensor([e if e is not None else 0 for e in emotion_index], dtype=torch.long)
    n_layers = len(maps)
    total = torch.zeros(b, dtype=maps[0].dtype)
    for amap, mask in zip(maps, layer_masks):
        mask = mask.to(amap.dtype)
        if mask.ndim == 2:
            mask = mask.expand(b, *mask.shape)
        total = total + weights.lambda_id_loc * truncated_localization(amap[rows, id_idx], mask, weights.beta) / n_layers
        if bool(has_emo.any()):
            emo = weights.mu_expr_loc * truncated_localization(amap[rows, emo_idx], mask, weights.gamma) / n_layers
            total = total + torch.where(has_emo, emo, torch.zeros_like(emo))
    return total if batched else total[0]


# --- identity ---------------------------------------------------------------

def identity_loss(zt, eps_pred, t: int, sched: NoiseSchedule, codec, bbox, reference_face,
                  embedder, weights: LossWeights) -> torch.Tensor:
    """1 - cos(phi(f), phi(crop(D(z0_hat)))) for t <= R_t, else exactly 0."""
    if not 1 <= int(t) <= sched.T:
        raise ValueError(f"timestep out of range [1, {sched.T}]: {t}")
    if int(t) > weights.R_t:
        return torch.zeros((), dtype=eps_pred.dtype)
    z0_hat = one_step_reverse(zt, eps_pred, int(t), sched)
    x0_hat = codec.decode(z0_hat)
    x0, y0, x1, y1 = bbox
    face_hat = x0_hat[..., y0:y1, x0:x1, :]
    ref = torch.as_tensor(reference_face, dtype=eps_pred.dtype)
    return 1.0 - cosine_similarity(embedder(ref), embedder(face_hat))


def total_loss(noise, identity, localization, gated: bool = False) -> Tuple[torch.Tensor, LossReport]:
    """Sum the three components; returns the differentiable total and a report."""
    total = noise + identity + localization
    report = LossReport(float(noise), float(identity), float(localization), float(total), gated)
    return total, report

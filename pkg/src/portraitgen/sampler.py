"""Guided deterministic sampling and region-composited multi-subject sampling."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
import torch

from .conditioning import FULL, TEXT_ONLY, UNCONDITIONAL
from .model import PortraitModel
from .schedule import one_step_reverse
from .trainer import substream

BACKGROUND_PROMPT = "a plain background"


@dataclass
class SamplerConfig:
    num_steps: int = 50
    guidance_scale: float = 5.0
    seed: int = 0
    method: str = "euler"

    def __post_init__(self):
        if self.num_steps < 1:
            raise ValueError("num_steps must be >= 1")
        if self.guidance_scale < 0:
            raise ValueError("guidance_scale must be >= 0")
        if self.method != "euler":
            raise ValueError(f"unsupported method {self.method!r}")


@dataclass
class RegionSpec:
    region_mask: np.ndarray          # H x W in [0, 1]
    prompt: str
    reference_face: Optional[np.ndarray] = None


def cfg_combine(eps_uncond, eps_cond, s: float):
    if s == 1:
        return eps_cond
    if s == 0:
        return eps_uncond
    return eps_uncond + s * (eps_cond - eps_uncond)


def timesteps(T: int, num_steps: int) -> List[int]:
    """Descending 1-indexed steps from T towards 1, at most ``num_steps`` of them."""
    ts = np.round(np.linspace(T, 1, num_steps)).astype(int)
    out = []
    for t in ts:
        if not out or t != out[-1]:
            out.append(int(t))
    return out


def initial_noise(shape, seed: int, dtype=torch.float32) -> torch.Tensor:
    return torch.as_tensor(substream(seed, "sampler").standard_normal(tuple(shape)), dtype=dtype)


def noise_digest(z: torch.Tensor) -> str:
    return hashlib.sha256(z.detach().cpu().numpy().tobytes()).hexdigest()[:16]


def _contexts(model: PortraitModel, prompt: str, reference_face) -> torch.Tensor:
    """Unconditional and conditional context rows, stacked 2 x n x D."""
    face_vec = None
    if reference_face is not None:
        face_vec = model.face_vector(reference_face)
        seq, _ = model.text(prompt)
        if seq.identity_index is None:
            raise ValueError(f"face provided but no identity token in {prompt!r}")
    branch = FULL if face_vec is not None else TEXT_ONLY
    ctx, _, _ = model.context([prompt, prompt], [None, face_vec], [UNCONDITIONAL, branch])
    return ctx


def _euler(model: PortraitModel, z: torch.Tensor, contexts: torch.Tensor, weights: Optional[torch.Tensor],
           config: SamplerConfig, trace=None) -> torch.Tensor:
    """Probability-flow Euler over ``R`` region contexts (contexts: R x 2 x n x D).

    ``weights`` (R x H x W) are per-pixel region weights; ``None`` means a
    single region without mixing.
    """
    sched = model.schedule
    steps = timesteps(sched.T, config.num_steps)
    r = contexts.shape[0]
    # at scale 1 the unconditional branch has no effect, so it is not evaluated
    cond_only = config.guidance_scale == 1.0
    flat_ctx = contexts[:, 1] if cond_only else contexts.reshape(2 * r, *contexts.shape[2:])
    n = flat_ctx.shape[0]
    for k, t in enumerate(steps):
        zz = z.unsqueeze(0).expand(n, *z.shape)
        eps, _ = model.unet(zz, torch.full((n,), t, dtype=torch.long), flat_ctx, capture=False)
        if cond_only:
            guided = eps
        else:
            eps = eps.reshape(r, 2, *z.shape)
            guided = torch.stack([cfg_combine(eps[i, 0], eps[i, 1], config.guidance_scale) for i in range(r)])
        if weights is None:
            combined = guided[0]
        else:
            combined = combine_predictions(guided, weights)
        if trace is not None:
            trace.append((t, combined))
        if k == len(steps) - 1:
            z = one_step_reverse(z, combined, t, sched)
        else:
            t_next = steps[k + 1]
            ab, ab_next = float(sched.alpha_bar(t)), float(sched.alpha_bar(t_next))
            sig, sig_next = float(np.sqrt((1 - ab) / ab)), float(np.sqrt((1 - ab_next) / ab_next))
            y = z / float(np.sqrt(ab)) + (sig_next - sig) * combined
            z = float(np.sqrt(ab_next)) * y
    return z


@torch.no_grad()
def sample(prompt: str, reference_face, model: PortraitModel, config: SamplerConfig,
           image_size: int = 32, trace=None) -> np.ndarray:
    """Generate one H x W x 3 image in [0, 1]."""
    ctx = _contexts(model, prompt, reference_face).unsqueeze(0)
    z = initial_noise((model.unet.config.in_channels, image_size, image_size), config.seed, model.dtype)
    z0 = _euler(model, z, ctx, None, config, trace)
    return model.codec.decode(z0).clamp(0.0, 1.0).cpu().numpy()


def compose_weights(masks: Sequence[np.ndarray]) -> np.ndarray:
    """Stack region masks, appending a background region for uncovered area."""
    stack = np.stack([np.asarray(m, dtype=np.float64) for m in masks])
    if stack.min() < 0 or stack.max() > 1:
        raise ValueError("region masks must lie in [0, 1]")
    rest = np.clip(1.0 - stack.sum(axis=0), 0.0, 1.0)
    if rest.max() > 0:
        stack = np.concatenate([stack, rest[None]], axis=0)
    if (stack.sum(axis=0) <= 0).any():
        raise ValueError("zero total region weight at some pixel")
    return stack


def combine_predictions(preds: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """Per-pixel weighted average of R x C x H x W predictions with R x H x W weights."""
    total = weights.sum(dim=0)
    if bool((total <= 0).any()):
        raise ValueError("zero total region weight at some pixel")
    w = weights.unsqueeze(1)
    return (w * preds).sum(dim=0) / total


@torch.no_grad()
def multi_subject_sample(regions: Sequence[RegionSpec], model: PortraitModel, config: SamplerConfig,
                         image_size: int = 32, trace=None) -> np.ndarray:
    if not regions:
        raise ValueError("need at least one region")
    masks = [r.region_mask for r in regions]
    weights = compose_weights(masks)
    ctxs = [_contexts(model, r.prompt, r.reference_face) for r in regions]
    if weights.shape[0] > len(regions):
        ctxs.append(_contexts(model, BACKGROUND_PROMPT, None))
    contexts = torch.stack(ctxs)
    z = initial_noise((model.unet.config.in_channels, image_size, image_size), config.seed, model.dtype)
    z0 = _euler(model, z, contexts, torch.as_tensor(weights, dtype=model.dtype), config, trace)
    return model.codec.decode(z0).clamp(0.0, 1.0).cpu().numpy()


@torch.no_grad()
def sample_batch(prompts: Sequence[str], faces: Sequence, model: PortraitModel, config: SamplerConfig,
                 seeds: Sequence[int], image_size: int = 32) -> np.ndarray:
    """Independent single-subject generations run as one batch (B x H x W x 3)."""
    sched = model.schedule
    ctx = torch.cat([_contexts(model, p, f) for p, f in zip(prompts, faces)])   # 2B x n x D
    b = len(prompts)
    z = torch.stack([initial_noise((model.unet.config.in_channels, image_size, image_size), s, model.dtype)
                     for s in seeds])
    steps = timesteps(sched.T, config.num_steps)
    for k, t in enumerate(steps):
        zz = z.repeat_interleave(2, dim=0)
        eps, _ = model.unet(zz, torch.full((2 * b,), t, dtype=torch.long), ctx, capture=False)
        eps = eps.reshape(b, 2, *z.shape[1:])
        guided = cfg_combine(eps[:, 0], eps[:, 1], config.guidance_scale)
        if k == len(steps) - 1:
            z = one_step_reverse(z, guided, t, sched)
        else:
            t_next = steps[k + 1]
            ab, ab_next = float(sched.alpha_bar(t)), float(sched.alpha_bar(t_next))
            sig, sig_next = float(np.sqrt((1 - ab) / ab)), float(np.sqrt((1 - ab_next) / ab_next))
            z = float(np.sqrt(ab_next)) * (z / float(np.sqrt(ab)) + (sig_next - sig) * guided)
    return model.codec.decode(z).clamp(0.0, 1.0).cpu().numpy()

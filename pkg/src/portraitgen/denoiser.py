"""Small conditional UNet with cross-attention at every resolution.

Every cross-attention layer reports its head-averaged token maps, so the
localization loss can read them straight off the forward pass.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class DenoiserConfig:
    in_channels: int = 3
    widths: Tuple[int, ...] = (16, 32, 64)
    text_dim: int = 64
    attn_dim: int = 16
    heads: int = 1
    time_dim: int = 32
    zero_init_out: bool = False
    skip_schedule: Optional[Tuple[float, float, int]] = None   # (beta_start, beta_end, T)
    output: str = "v"        # "v": eps rebuilt from a v-like head; "eps": direct

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if self.output not in ("v", "eps"):
            raise ValueError(f"unknown output parametrization {self.output!r}")
        if self.skip_schedule is not None:
            b0, b1, T = self.skip_schedule
            self.skip_schedule = (float(b0), float(b1), int(T))
        if len(self.widths) != 3:
            raise ValueError("the UNet has exactly three resolution levels")
        if not 1 <= self.heads <= 2:
            raise ValueError("heads must be 1 or 2")
        if self.attn_dim % self.heads:
            raise ValueError("attn_dim must be divisible by heads")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        if self.skip_schedule is not None:
            d["skip_schedule"] = list(self.skip_schedule)
        return d


DESK_GRADCHECK = dict(widths=(4, 8, 8), text_dim=16, attn_dim=4, heads=2, time_dim=8)


@dataclass
class AttentionRecord:
    maps: List[torch.Tensor] = field(default_factory=list)   # each B x n x H_l x W_l
    resolutions: List[Tuple[int, int]] = field(default_factory=list)

    def __len__(self):
        return len(self.maps)

    def token_maps(self, index: Sequence[int]) -> List[torch.Tensor]:
        """Per-layer maps of one token per batch row (``index[b]``), B x H_l x W_l."""
        idx = torch.as_tensor(list(index), dtype=torch.long)
        rows = torch.arange(len(idx))
        return [m[rows, idx] for m in self.maps]


def _groups(c: int) -> int:
    return math.gcd(c, 4)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class CrossAttention(nn.Module):
    """softmax(Q K^T / sqrt(d)) V with Q from pixels and K, V from text rows."""

    def __init__(self, channels: int, text_dim: int, attn_dim: int, heads: int = 1):
        super().__init__()
        self.channels = channels
        self.text_dim = text_dim
        self.heads = heads
        self.head_dim = attn_dim // heads
        self.norm = nn.GroupNorm(_groups(channels), channels)
        self.to_q = nn.Linear(channels, attn_dim, bias=False)
        self.to_k = nn.Linear(text_dim, attn_dim, bias=False)
        self.to_v = nn.Linear(text_dim, attn_dim, bias=False)
        self.to_out = nn.Linear(attn_dim, channels)

    def forward(self, x: torch.Tensor, context: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        b, c, h, w = x.shape
        if c != self.channels or context.shape[-1] != self.text_dim:
            raise ValueError(f"width mismatch: features {c}/{self.channels}, "
                             f"context {context.shape[-1]}/{self.text_dim}")
        q = self.to_q(self.norm(x).flatten(2).transpose(1, 2))       # b, hw, d
        k = self.to_k(context)                                       # b, n, d
        v = self.to_v(context)
        q = q.reshape(b, h * w, self.heads, self.head_dim).transpose(1, 2)
        k = k.reshape(b, -1, self.heads, self.head_dim).transpose(1, 2)
        v = v.reshape(b, -1, self.heads, self.head_dim).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(self.head_dim), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, h * w, -1)
        out = self.to_out(out).transpose(1, 2).reshape(b, c, h, w)
        token_map = attn.mean(dim=1).transpose(1, 2).reshape(b, -1, h, w)
        return x + out, token_map


def cross_attention(features: torch.Tensor, context: torch.Tensor, layer: CrossAttention):
    """Apply one cross-attention layer; returns (features, tokens x H x W map).

    Accepts unbatched ``C x H x W`` features with ``n x D`` context as well.
    """
    squeeze = features.ndim == 3
    if squeeze:
        features, context = features.unsqueeze(0), context.unsqueeze(0)
    out, amap = layer(features, context)
    if squeeze:
        return out[0], amap[0]
    return out, amap


class ResBlock(nn.Module):
    def __init__(self, channels: int, time_dim: int):
        super().__init__()
        self.norm = nn.GroupNorm(_groups(channels), channels)
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)
        self.time = nn.Linear(time_dim, channels)

    def forward(self, x, temb):
        h = self.conv(F.silu(self.norm(x)))
        return x + h + self.time(temb)[:, :, None, None]


class UNet(nn.Module):
    """Three-level UNet; attention layers: 3 on the way down, 3 on the way up."""

    def __init__(self, config: Optional[DenoiserConfig] = None):
        super().__init__()
        cfg = config or DenoiserConfig()
        self.config = cfg
        c1, c2, c3 = cfg.widths
        td = cfg.time_dim
        self.time_mlp = nn.Sequential(nn.Linear(td, td), nn.SiLU(), nn.Linear(td, td))
        self.conv_in = nn.Conv2d(cfg.in_channels, c1, 3, padding=1)

        def attn(c):
            return CrossAttention(c, cfg.text_dim, cfg.attn_dim, cfg.heads)

        self.down1 = ResBlock(c1, td)
        self.attn_d1 = attn(c1)
        self.pool1 = nn.Conv2d(c1, c2, 3, stride=2, padding=1)
        self.down2 = ResBlock(c2, td)
        self.attn_d2 = attn(c2)
        self.pool2 = nn.Conv2d(c2, c3, 3, stride=2, padding=1)
        self.mid = nn.Conv2d(c3, c3, 3, padding=1, groups=_groups(c3))
        self.mid_global = nn.Linear(c3, c3)     # pooled summary, broadcast back over the map
        self.mid_time = nn.Linear(td, c3)
        self.attn_d3 = attn(c3)
        self.attn_u3 = attn(c3)
        self.up2_proj = nn.Conv2d(c3, c2, 1)
        self.up2 = ResBlock(c2, td)
        self.attn_u2 = attn(c2)
        self.up1_proj = nn.Conv2d(c2, c1, 1)
        self.up1 = ResBlock(c1, td)
        self.attn_u1 = attn(c1)
        self.norm_out = nn.GroupNorm(_groups(c1), c1)
        self.conv_out = nn.Conv2d(c1, cfg.in_channels, 3, padding=1)
        # eps = sqrt(abar_t) * conv_out(...) + skip_gain * sqrt(1 - abar_t) * z_t.
        # The convs then predict a v-like target, and the implied clean image
        # sqrt(abar) z - sqrt(1 - abar) F stays bounded even at very low SNR.
        self.skip_gain = nn.Parameter(torch.ones(()))
        if cfg.skip_schedule is not None and cfg.output == "v":
            b0, b1, T = cfg.skip_schedule
            abar = torch.cumprod(1.0 - torch.linspace(b0, b1, T, dtype=torch.float64), 0)
            self.register_buffer("skip_coef", torch.sqrt(1.0 - abar), persistent=False)
            self.register_buffer("out_coef", torch.sqrt(abar), persistent=False)
        else:
            self.skip_coef = None
            self.out_coef = None
        if cfg.zero_init_out:
            nn.init.zeros_(self.conv_out.weight)
            nn.init.zeros_(self.conv_out.bias)
            nn.init.zeros_(self.skip_gain)

    @property
    def num_attention_layers(self) -> int:
        return 6

    def forward(self, zt: torch.Tensor, t: torch.Tensor, context: torch.Tensor,
                capture: bool = True):
        """zt: B x C x H x W, t: B (1-indexed steps), context: B x n x D."""
        temb = self.time_mlp(timestep_embedding(t, self.config.time_dim).to(zt.dtype))
        maps: List[torch.Tensor] = []

        def run(layer, h):
            h, m = layer(h, context)
            maps.append(m)
            return h

        h1 = run(self.attn_d1, self.down1(self.conv_in(zt), temb))
        h2 = run(self.attn_d2, self.down2(self.pool1(h1), temb))
        h3 = self.pool2(h2)
        a3 = F.silu(h3)
        h3 = (h3 + self.mid(a3) + self.mid_global(a3.mean(dim=(2, 3)))[:, :, None, None]
              + self.mid_time(temb)[:, :, None, None])
        h3 = run(self.attn_d3, h3)
        h3 = run(self.attn_u3, h3)
        u2 = self.up2_proj(F.interpolate(h3, scale_factor=2, mode="nearest")) + h2
        u2 = run(self.attn_u2, self.up2(u2, temb))
        u1 = self.up1_proj(F.interpolate(u2, scale_factor=2, mode="nearest")) + h1
        u1 = run(self.attn_u1, self.up1(u1, temb))
        eps = self.conv_out(F.silu(self.norm_out(u1)))
        if self.skip_coef is not None:
            idx = t.long() - 1
            a = self.out_coef[idx].to(zt.dtype)[:, None, None, None]
            c = self.skip_coef[idx].to(zt.dtype)[:, None, None, None]
            eps = a * eps + self.skip_gain * c * zt
        if not capture:
            return eps, None
        record = AttentionRecord(maps, [tuple(m.shape[-2:]) for m in maps])
        return eps, record


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def predict_noise(model: UNet, zt: torch.Tensor, t, cond_embeddings: torch.Tensor, capture: bool = True):
    """Noise prediction for one latent (C x H x W) or a batch (B x C x H x W)."""
    single = zt.ndim == 3
    if single:
        zt = zt.unsqueeze(0)
        cond_embeddings = cond_embeddings.unsqueeze(0)
    if not torch.isfinite(zt).all():
        raise ValueError("non-finite latent")
    tt = torch.as_tensor(t, dtype=torch.long).reshape(-1)
    if tt.numel() == 1 and zt.shape[0] > 1:
        tt = tt.expand(zt.shape[0])
    eps, record = model(zt, tt, cond_embeddings, capture=capture)
    if single:
        eps = eps[0]
        if record is not None:
            record = AttentionRecord([m[0] for m in record.maps], record.resolutions)
    return eps, record

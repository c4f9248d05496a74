"""Small conditional U-Net: FiLM time modulation, cross-attention at the two coarsest levels."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


class ControlChannelError(ValueError):
    pass


@dataclass(frozen=True)
class DenoiserConfig:
    widths: tuple[int, ...] = (32, 64, 64)
    cond_dim: int = 64
    heads: int = 4
    time_dim: int = 128
    control: bool = False
    groups: int = 8

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ValueError("need at least two resolution levels")

    @property
    def in_channels(self) -> int:
        return 3 + int(self.control)

    def to_dict(self):
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["widths"] = tuple(d["widths"])
        return cls(**d)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half).to(t.device)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class ResBlock(nn.Module):
    def __init__(self, cin, cout, time_dim, groups):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.film = nn.Linear(time_dim, 2 * cout)
        self.norm2 = nn.GroupNorm(groups, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        scale, shift = self.film(temb)[:, :, None, None].chunk(2, dim=1)
        h = self.norm2(h) * (1 + scale) + shift
        h = self.conv2(F.silu(h))
        return h + self.skip(x)


class CrossAttention(nn.Module):
    def __init__(self, channels, cond_dim, heads, groups):
        super().__init__()
        self.heads = heads
        self.norm = nn.GroupNorm(groups, channels)
        self.q = nn.Linear(channels, channels)
        self.kv = nn.Linear(cond_dim, 2 * channels)
        self.out = nn.Linear(channels, channels)

    def forward(self, x, cond):
        b, c, h, w = x.shape
        hd = c // self.heads
        q = self.q(self.norm(x).flatten(2).transpose(1, 2)).view(b, h * w, self.heads, hd).transpose(1, 2)
        k, v = self.kv(cond).chunk(2, dim=-1)
        k = k.reshape(b, -1, self.heads, hd).transpose(1, 2)
        v = v.reshape(b, -1, self.heads, hd).transpose(1, 2)
        att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(hd), dim=-1)
        a = (att @ v).transpose(1, 2).reshape(b, h * w, c)
        return x + self.out(a).transpose(1, 2).reshape(b, c, h, w)


class Denoiser(nn.Module):
    """Predicts the noise eps from (z_t, t, c). Input resolution must be divisible by 2**(levels-1)."""

    def __init__(self, cfg: DenoiserConfig = DenoiserConfig()):
        super().__init__()
        self.cfg = cfg
        w, td, g = cfg.widths, cfg.time_dim, cfg.groups
        self.time_mlp = nn.Sequential(nn.Linear(td, td), nn.SiLU(), nn.Linear(td, td))
        self.stem = nn.Conv2d(cfg.in_channels, w[0], 3, padding=1)
        levels = len(w)
        attn_levels = {levels - 2, levels - 1}
        self.down_blocks = nn.ModuleList()
        self.down_attn = nn.ModuleList()
        self.downsample = nn.ModuleList()
        for i in range(levels - 1):
            self.down_blocks.append(ResBlock(w[i], w[i], td, g))
            self.down_attn.append(CrossAttention(w[i], cfg.cond_dim, cfg.heads, g) if i in attn_levels else nn.Identity())
            self.downsample.append(nn.Conv2d(w[i], w[i + 1], 3, stride=2, padding=1))
        self.mid1 = ResBlock(w[-1], w[-1], td, g)
        self.mid_attn = CrossAttention(w[-1], cfg.cond_dim, cfg.heads, g)
        self.mid2 = ResBlock(w[-1], w[-1], td, g)
        self.upsample = nn.ModuleList()
        self.up_blocks = nn.ModuleList()
        self.up_attn = nn.ModuleList()
        for i in reversed(range(levels - 1)):
            self.upsample.append(nn.Conv2d(w[i + 1], w[i], 3, padding=1))
            self.up_blocks.append(ResBlock(2 * w[i], w[i], td, g))
            self.up_attn.append(CrossAttention(w[i], cfg.cond_dim, cfg.heads, g) if i in attn_levels else nn.Identity())
        self.head = nn.Sequential(nn.GroupNorm(g, w[0]), nn.SiLU(), nn.Conv2d(w[0], 3, 3, padding=1))

    def forward(self, z, t, cond):
        if z.shape[1] != self.cfg.in_channels:
            raise ControlChannelError(
                f"denoiser expects {self.cfg.in_channels} input channels (control={self.cfg.control}), got {z.shape[1]}"
            )
        temb = self.time_mlp(timestep_embedding(t, self.cfg.time_dim).to(z.dtype))
        h = self.stem(z)
        skips = []
        for block, attn, down in zip(self.down_blocks, self.down_attn, self.downsample):
            h = block(h, temb)
            h = attn(h, cond) if isinstance(attn, CrossAttention) else h
            skips.append(h)
            h = down(h)
        h = self.mid2(self.mid_attn(self.mid1(h, temb), cond), temb)
        for up, block, attn in zip(self.upsample, self.up_blocks, self.up_attn):
            h = up(F.interpolate(h, scale_factor=2.0, mode="nearest"))
            h = block(torch.cat([h, skips.pop()], dim=1), temb)
            h = attn(h, cond) if isinstance(attn, CrossAttention) else h
        return self.head(h)

"""Small spatio-temporal UNet predicting v.

Layout convention: latents are (B, F, C, h, w). Convolutions and spatial
attention act per frame, temporal attention per spatial location across
frames, and cross-attention reads the reference tokens.
"""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from einops import rearrange
from torch import nn

from .errors import InvalidArgument, InvalidShape


def sinusoidal_embedding(x: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = x.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([args.cos(), args.sin()], dim=-1)


def _groups(ch: int) -> int:
    return math.gcd(ch, 8)


class ResBlock(nn.Module):
    def __init__(self, in_ch, out_ch, time_dim):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_ch)
        self.norm2 = nn.GroupNorm(_groups(out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, temb):
        # x: (N, C, h, w) with N = B * F; temb: (N, time_dim)
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class Attention(nn.Module):
    """Pre-norm multi-head attention with a residual connection."""

    def __init__(self, dim, heads=4, context_dim=None, zero_out=False):
        super().__init__()
        if dim % heads:
            raise InvalidArgument(f"width {dim} not divisible by {heads} heads")
        self.heads = heads
        self.norm = nn.LayerNorm(dim)
        self.context_norm = nn.LayerNorm(context_dim) if context_dim else None
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_kv = nn.Linear(context_dim or dim, 2 * dim, bias=False)
        self.to_out = nn.Linear(dim, dim)
        if zero_out:
            nn.init.zeros_(self.to_out.weight)
            nn.init.zeros_(self.to_out.bias)

    def forward(self, x, context=None, pos=None):
        h = self.norm(x)
        if pos is not None:
            h = h + pos
        ctx = h if context is None else self.context_norm(context)
        q = self.to_q(h)
        k, v = self.to_kv(ctx).chunk(2, dim=-1)
        q, k, v = (rearrange(z, "n l (h d) -> n h l d", h=self.heads) for z in (q, k, v))
        attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1]), dim=-1)
        out = rearrange(attn @ v, "n h l d -> n l (h d)")
        return x + self.to_out(out)


class AttnBlock(nn.Module):
    """Spatial self-attention, then temporal self-attention, then cross-attention."""

    def __init__(self, dim, token_dim, heads=4, temporal=True):
        super().__init__()
        self.spatial = Attention(dim, heads)
        self.temporal = Attention(dim, heads, zero_out=True) if temporal else None
        self.cross = Attention(dim, heads, context_dim=token_dim, zero_out=True)

    def forward(self, x, frames, tokens):
        # x: (B*F, C, h, w); tokens: (B, N, d)
        N, C, H, W = x.shape
        s = rearrange(x, "n c h w -> n (h w) c")
        s = self.spatial(s)
        if self.temporal is not None:
            t = rearrange(s, "(b f) l c -> (b l) f c", f=frames)
            pos = sinusoidal_embedding(torch.arange(frames), C).to(x.dtype)
            t = self.temporal(t, pos=pos)
            s = rearrange(t, "(b l) f c -> (b f) l c", l=H * W)
        ctx = tokens.repeat_interleave(frames, dim=0)
        s = self.cross(s, context=ctx)
        return rearrange(s, "n (h w) c -> n c h w", h=H, w=W)


class Denoiser(nn.Module):
    """Two-level UNet. Spatial conditions enter through the input convolution(s).

    ``conv_in`` reads (noisy latent, pose features). ``enable_inpainting``
    adds a second, zero-initialised input convolution for (mask features,
    inpainting features) whose output is summed with ``conv_in``'s.
    """

    def __init__(self, latent_channels=4, cond_channels=8, base_width=64, token_dim=64,
                 heads=4, temporal=True, time_dim=128):
        super().__init__()
        if base_width < 1 or latent_channels < 1 or cond_channels < 1:
            raise InvalidArgument("channel widths must be positive")
        w, w2 = base_width, 2 * base_width
        self.latent_channels = latent_channels
        self.cond_channels = cond_channels
        self.time_dim = time_dim
        self.time_mlp = nn.Sequential(nn.Linear(time_dim, time_dim), nn.SiLU(), nn.Linear(time_dim, time_dim))
        self.conv_in = nn.Conv2d(latent_channels + cond_channels, w, 3, padding=1)
        self.inpaint_in = None
        self.res0 = ResBlock(w, w, time_dim)
        self.attn0 = AttnBlock(w, token_dim, heads, temporal)
        self.down = nn.Conv2d(w, w2, 3, stride=2, padding=1)
        self.res1 = ResBlock(w2, w2, time_dim)
        self.attn1 = AttnBlock(w2, token_dim, heads, temporal)
        self.mid = ResBlock(w2, w2, time_dim)
        self.up = nn.Conv2d(w2, w, 3, padding=1)
        self.res_up = ResBlock(2 * w, w, time_dim)
        self.attn_up = AttnBlock(w, token_dim, heads, temporal)
        self.norm_out = nn.GroupNorm(_groups(w), w)
        self.conv_out = nn.Conv2d(w, latent_channels, 3, padding=1)

    def enable_inpainting(self):
        if self.inpaint_in is None:
            conv = nn.Conv2d(self.cond_channels + self.latent_channels, self.conv_in.out_channels,
                             3, padding=1, bias=False)
            nn.init.zeros_(conv.weight)
            self.inpaint_in = conv.to(self.conv_in.weight.dtype)
        return self

    def forward(self, x_t, t, cond):
        if x_t.ndim != 5 or x_t.shape[2] != self.latent_channels:
            raise InvalidShape(f"expected (B, F, {self.latent_channels}, h, w), got {tuple(x_t.shape)}")
        B, Fr, _, h, w = x_t.shape
        if cond.pose_feat.shape[:2] != (B, Fr) or cond.pose_feat.shape[-2:] != (h, w):
            raise InvalidShape("pose features do not match the latent grid")
        if self.inpaint_in is not None and (cond.mask_feat is None or cond.inpaint_feat is None):
            raise InvalidShape("inpainting model needs mask and inpainting features")
        if self.inpaint_in is None and cond.mask_feat is not None:
            raise InvalidShape("pose-only model received mask/inpainting features")
        t = torch.as_tensor(t).reshape(-1).expand(B)
        temb = self.time_mlp(sinusoidal_embedding(t, self.time_dim).to(x_t.dtype))
        temb = temb.repeat_interleave(Fr, dim=0)

        def frames(z):
            return z.reshape(B * Fr, *z.shape[2:])

        hdn = self.conv_in(frames(torch.cat([x_t, cond.pose_feat], dim=2)))
        if self.inpaint_in is not None:
            hdn = hdn + self.inpaint_in(frames(torch.cat([cond.mask_feat, cond.inpaint_feat], dim=2)))
        tokens = cond.ref_tokens
        h0 = self.attn0(self.res0(hdn, temb), Fr, tokens)
        h1 = self.attn1(self.res1(self.down(h0), temb), Fr, tokens)
        h1 = self.mid(h1, temb)
        u = self.up(F.interpolate(h1, scale_factor=2, mode="nearest"))
        u = self.attn_up(self.res_up(torch.cat([u, h0], dim=1), temb), Fr, tokens)
        out = self.conv_out(F.silu(self.norm_out(u)))
        return out.reshape(B, Fr, *out.shape[1:])


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())

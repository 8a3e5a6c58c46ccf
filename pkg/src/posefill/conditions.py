"""Condition encoders: pose, mask and reference guidance, plus condition dropout.

Spatial conditions are brought to the latent grid by small strided conv
stacks. The reference image becomes a token sequence: one global token from a
pooled encoder over (image, mask, pose) and ``n_local`` tokens from the
autoencoder latent of the image.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import InvalidArgument, InvalidShape

GROUPS = ("reference", "pose", "inpaint")


class DownsampleEncoder(nn.Module):
    """conv -> [stride-2 conv] x log2(factor) -> conv, SiLU between layers.

    Used (with different channel counts) for pose maps, masks and the
    learnable head of the hybrid inpainting encoder.
    """

    def __init__(self, in_ch: int, out_ch: int, factor: int = 4, width: int = 32,
                 zero_init: bool = True):
        super().__init__()
        if factor < 1 or factor & (factor - 1):
            raise InvalidArgument("factor must be a power of two")
        self.factor = factor
        layers = [nn.Conv2d(in_ch, width, 3, padding=1), nn.SiLU()]
        for _ in range(int(math.log2(factor))):
            layers += [nn.Conv2d(width, width, 3, stride=2, padding=1), nn.SiLU()]
        self.body = nn.Sequential(*layers)
        self.out = nn.Conv2d(width, out_ch, 3, padding=1)
        if zero_init:
            nn.init.zeros_(self.out.weight)
            nn.init.zeros_(self.out.bias)

    def forward(self, x):
        if x.shape[-1] % self.factor or x.shape[-2] % self.factor:
            raise InvalidShape(f"resolution {tuple(x.shape[-2:])} not divisible by {self.factor}")
        lead = x.shape[:-3]
        y = self.out(self.body(x.reshape(-1, *x.shape[-3:])))
        return y.reshape(*lead, *y.shape[1:])


class ReferenceEncoder(nn.Module):
    """Reference image -> [global] + local tokens of width ``dim``."""

    def __init__(self, latent_channels: int, latent_size: int, factor: int, dim: int = 64,
                 n_local: int = 16, width: int = 32, use_ref_mask: bool = True):
        super().__init__()
        side = int(round(math.sqrt(n_local)))
        if side * side != n_local or latent_size % side:
            raise InvalidArgument("n_local must be a square whose side divides the latent size")
        self.use_ref_mask = use_ref_mask
        self.n_local = n_local
        self.dim = dim
        # global branch: image (3) + mask (1) + pose map (3)
        self.global_conv = DownsampleEncoder(7, width, factor * 2, width, zero_init=False)
        self.global_mlp = nn.Sequential(nn.Linear(width, dim), nn.SiLU(), nn.Linear(dim, dim))
        # local branch: per-position MLP on latents, then strided convs down to side x side
        self.local_mlp = nn.Sequential(nn.Conv2d(latent_channels, width, 1), nn.SiLU(),
                                       nn.Conv2d(width, width, 1), nn.SiLU())
        convs = []
        s = latent_size
        while s > side:
            convs += [nn.Conv2d(width, width, 3, stride=2, padding=1), nn.SiLU()]
            s //= 2
        self.local_down = nn.Sequential(*convs)
        self.local_proj = nn.Conv2d(width, dim, 1)
        self.local_pos = nn.Parameter(torch.randn(n_local, dim) * 0.02)
        self.null_tokens = nn.Parameter(torch.zeros(1 + n_local, dim))

    @property
    def n_tokens(self) -> int:
        return 1 + self.n_local

    def forward(self, image, ref_mask, ref_pose, image_latent):
        """image (B,3,H,W), ref_mask (B,1,H,W), ref_pose (B,3,H,W), image_latent (B,C_z,h,w)."""
        if not self.use_ref_mask:
            ref_mask = torch.zeros_like(ref_mask)
        g = self.global_conv(torch.cat([image, ref_mask, ref_pose], dim=1))
        g = self.global_mlp(g.mean(dim=(-2, -1)))[:, None]
        loc = self.local_proj(self.local_down(self.local_mlp(image_latent)))
        loc = loc.flatten(2).transpose(1, 2) + self.local_pos
        return torch.cat([g, loc], dim=1)


@dataclass
class ConditionSet:
    """Batched conditions. Spatial features are (B, F, C, h, w); tokens (B, N, d).

    ``mask_feat`` and ``inpaint_feat`` are None for a pose-only (phase-1) model.
    ``dropped`` maps each group to a (B,) bool tensor.
    """
    pose_feat: torch.Tensor
    ref_tokens: torch.Tensor
    mask_feat: torch.Tensor | None = None
    inpaint_feat: torch.Tensor | None = None
    dropped: dict = field(default_factory=dict)

    @property
    def batch(self) -> int:
        return self.pose_feat.shape[0]


def build_condition_set(pose_feat, mask_feat, inpaint_feat, ref_tokens) -> ConditionSet:
    grids = {tuple(f.shape[-2:]) for f in (pose_feat, mask_feat, inpaint_feat) if f is not None}
    frames = {f.shape[:-3] for f in (pose_feat, mask_feat, inpaint_feat) if f is not None}
    if len(grids) != 1 or len(frames) != 1:
        raise InvalidShape(f"condition grids disagree: {sorted(grids)} / {sorted(frames)}")
    if ref_tokens.shape[0] != pose_feat.shape[0]:
        raise InvalidShape("reference tokens and spatial features have different batch sizes")
    B = pose_feat.shape[0]
    return ConditionSet(pose_feat, ref_tokens, mask_feat, inpaint_feat,
                        {g: torch.zeros(B, dtype=torch.bool) for g in GROUPS})


def dropout_conditions(cond: ConditionSet, p: float, rng: np.random.Generator,
                       null_tokens: torch.Tensor) -> ConditionSet:
    """Independently replace each group with its null value with probability ``p``.

    Groups: reference tokens (-> learned ``null_tokens``), pose features
    (-> zeros), mask + inpaint features jointly (-> zeros). Draws are per
    batch element, three per element, in group order.
    """
    if not 0 <= p <= 1:
        raise InvalidArgument(f"dropout probability {p} outside [0, 1]")
    if p == 0:
        return cond
    B = cond.batch
    draws = rng.random((B, len(GROUPS))) < p
    flags = {g: torch.from_numpy(draws[:, i].copy()) | cond.dropped.get(g, torch.zeros(B, dtype=torch.bool))
             for i, g in enumerate(GROUPS)}

    def gate(x, drop):
        if x is None:
            return None
        keep = (~drop).to(x.dtype).reshape(-1, *([1] * (x.ndim - 1)))
        return x * keep

    ref_drop = flags["reference"].reshape(-1, 1, 1)
    tokens = torch.where(ref_drop, null_tokens.to(cond.ref_tokens.dtype).expand_as(cond.ref_tokens),
                         cond.ref_tokens)
    return replace(cond, pose_feat=gate(cond.pose_feat, flags["pose"]),
                   mask_feat=gate(cond.mask_feat, flags["inpaint"]),
                   inpaint_feat=gate(cond.inpaint_feat, flags["inpaint"]),
                   ref_tokens=tokens, dropped=flags)


def null_conditions(cond: ConditionSet, null_tokens: torch.Tensor) -> ConditionSet:
    """Every group dropped: the unconditional branch for guidance."""
    return dropout_conditions(cond, 1.0, np.random.default_rng(0), null_tokens)

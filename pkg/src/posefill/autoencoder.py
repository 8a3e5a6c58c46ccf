"""Deterministic conv autoencoder defining the latent space.

Stands in for a pre-trained image VAE: frames are compressed 4x per side into
``latent_channels`` channels. ``identity=True`` bypasses the networks so that
latents are the pixels themselves.
"""
from __future__ import annotations

import hashlib

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import InvalidDataset, InvalidShape
from .masks import MaskClip, apply_mask


class ResBlock2d(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)
        # residual branch starts at zero; keeps the unnormalised stack stable
        nn.init.zeros_(self.conv2.weight)
        nn.init.zeros_(self.conv2.bias)

    def forward(self, x):
        return x + self.conv2(F.silu(self.conv1(F.silu(x))))


class FrameAutoencoder(nn.Module):
    def __init__(self, latent_channels: int = 4, width: int = 32, identity: bool = False):
        super().__init__()
        self.identity = identity
        self.width = width
        self.latent_channels = 3 if identity else latent_channels
        self.factor = 1 if identity else 4
        self.register_buffer("latent_scale", torch.ones(()))
        self.train_steps = 0
        self.seed = None
        if identity:
            return
        w = width
        self.encoder = nn.Sequential(
            nn.Conv2d(3, w, 3, padding=1), nn.SiLU(),
            nn.Conv2d(w, 2 * w, 3, stride=2, padding=1), ResBlock2d(2 * w),
            nn.Conv2d(2 * w, 4 * w, 3, stride=2, padding=1), ResBlock2d(4 * w), ResBlock2d(4 * w),
            nn.SiLU(), nn.Conv2d(4 * w, latent_channels, 3, padding=1))
        self.decoder = nn.Sequential(
            nn.Conv2d(latent_channels, 4 * w, 3, padding=1), ResBlock2d(4 * w), ResBlock2d(4 * w),
            nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(4 * w, 2 * w, 3, padding=1),
            ResBlock2d(2 * w),
            nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(2 * w, w, 3, padding=1),
            nn.SiLU(), nn.Conv2d(w, 3, 3, padding=1))

    def _frames(self, video: torch.Tensor):
        if video.shape[-1] % self.factor or video.shape[-2] % self.factor:
            raise InvalidShape(f"spatial dims {tuple(video.shape[-2:])} not divisible by {self.factor}")
        lead = video.shape[:-3]
        return video.reshape(-1, *video.shape[-3:]), lead

    def encode_raw(self, video: torch.Tensor) -> torch.Tensor:
        x, lead = self._frames(video)
        z = x if self.identity else self.encoder(x)
        return z.reshape(*lead, *z.shape[1:])

    def encode(self, video: torch.Tensor) -> torch.Tensor:
        """(..., 3, H, W) -> (..., C_z, H/4, W/4), scaled to roughly unit variance."""
        return self.encode_raw(video) * self.latent_scale

    def decode(self, latent: torch.Tensor) -> torch.Tensor:
        z, lead = latent.reshape(-1, *latent.shape[-3:]), latent.shape[:-3]
        if self.identity:
            x = z / self.latent_scale
        else:
            x = self.decoder(z / self.latent_scale)
        return x.reshape(*lead, *x.shape[1:])

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k, v in sorted(self.state_dict().items()):
            h.update(k.encode())
            h.update(v.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()


def _as_tensor(frames) -> torch.Tensor:
    return frames if torch.is_tensor(frames) else torch.from_numpy(np.ascontiguousarray(frames, dtype=np.float32))


def train_autoencoder(frames, steps: int = 3000, seed: int = 0, latent_channels: int = 4,
                      width: int = 32, batch_size: int = 16, lr: float = 5e-4,
                      log_every: int = 0) -> FrameAutoencoder:
    """Fit the autoencoder to an (N, 3, H, W) frame set with pixel MSE, then freeze it."""
    frames = _as_tensor(frames)
    if frames.ndim != 4 or frames.shape[0] < 256:
        raise InvalidDataset(f"need at least 256 frames shaped N x 3 x H x W, got {tuple(frames.shape)}")
    gen = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    ae = FrameAutoencoder(latent_channels, width)
    opt = torch.optim.Adam(ae.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=lr, total_steps=max(steps, 1), pct_start=0.1)
    ae.train()
    for step in range(steps):
        idx = torch.randint(0, frames.shape[0], (batch_size,), generator=gen)
        x = frames[idx]
        flip = torch.rand(batch_size, generator=gen) < 0.5
        x = torch.where(flip[:, None, None, None], x.flip(-1), x)
        loss = F.mse_loss(ae.decode(ae.encode(x)), x)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        nn.utils.clip_grad_norm_(ae.parameters(), 1.0)
        opt.step()
        sched.step()
        if log_every and step % log_every == 0:
            print(f"ae step {step:5d} mse {loss.item():.5f}")
    ae.eval()
    with torch.no_grad():
        z = torch.cat([ae.encode_raw(frames[i:i + 256]) for i in range(0, frames.shape[0], 256)])
        ae.latent_scale.fill_(1.0 / float(z.std()))
    ae.train_steps = steps
    ae.seed = seed
    for p in ae.parameters():
        p.requires_grad_(False)
    return ae


@torch.no_grad()
def reconstruct(video, ae: FrameAutoencoder) -> torch.Tensor:
    return ae.decode(ae.encode(_as_tensor(video)))


@torch.no_grad()
def reconstruction_error_experiment(clips, masks, ae: FrameAutoencoder) -> dict:
    """Background reconstruction MSE when encoding complete vs masked frames.

    Both errors are measured against the original video and only over the
    pixels the mask leaves visible.
    """
    se_complete = se_masked = 0.0
    count = 0
    for video, mask in zip(clips, masks):
        v = _as_tensor(video)
        m = mask.data if isinstance(mask, MaskClip) else np.asarray(mask)
        keep = torch.from_numpy(1 - m.astype(np.float32)).expand_as(v).bool()
        rc = reconstruct(v, ae)
        rm = reconstruct(apply_mask(v, MaskClip(m)), ae)
        se_complete += float(((rc - v) ** 2)[keep].double().sum())
        se_masked += float(((rm - v) ** 2)[keep].double().sum())
        count += int(keep.sum())
    return {"complete_err": se_complete / count, "masked_err": se_masked / count}

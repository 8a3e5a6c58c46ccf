"""Two-branch encoder for the masked video.

The frozen autoencoder encodes the masked frames; a light learnable head sees
the masked frames together with the mask and adds a correction on the same
latent grid. Its last layer starts at zero, so initially the output is the
frozen encoding exactly.
"""
from __future__ import annotations

import torch
from torch import nn

from .autoencoder import FrameAutoencoder
from .conditions import DownsampleEncoder
from .errors import InvalidShape


class HybridInpaintEncoder(nn.Module):
    def __init__(self, ae: FrameAutoencoder, width: int = 32, use_head: bool = True):
        super().__init__()
        # kept outside the module tree so it is never trained or saved twice
        self.__dict__["ae"] = ae
        self.use_head = use_head
        self.head = DownsampleEncoder(4, ae.latent_channels, ae.factor, width, zero_init=True) if use_head else None

    def frozen_branch(self, masked_video: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return self.ae.encode(masked_video)

    def forward(self, masked_video: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        if masked_video.shape[:-3] != mask.shape[:-3] or masked_video.shape[-2:] != mask.shape[-2:]:
            raise InvalidShape(f"masked video {tuple(masked_video.shape)} vs mask {tuple(mask.shape)}")
        z = self.frozen_branch(masked_video).to(masked_video.dtype)
        if self.head is None:
            return z
        return z + self.head(torch.cat([masked_video, mask.to(masked_video.dtype)], dim=-3))


def encode_masked(masked_video, mask, encoder: HybridInpaintEncoder):
    return encoder(masked_video, mask)

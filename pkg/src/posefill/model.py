"""The full conditioned denoising model and its configuration."""
from __future__ import annotations

from dataclasses import dataclass, asdict

import torch
from torch import nn

from .autoencoder import FrameAutoencoder
from .conditions import ConditionSet, DownsampleEncoder, ReferenceEncoder, build_condition_set
from .denoiser import Denoiser
from .hybrid import HybridInpaintEncoder


@dataclass
class ModelConfig:
    cond_channels: int = 8
    token_dim: int = 64
    n_local_tokens: int = 16
    base_width: int = 64
    encoder_width: int = 32
    heads: int = 4
    time_dim: int = 128
    temporal: bool = True
    use_ref_mask: bool = True
    use_inpaint_head: bool = True

    def to_dict(self):
        return asdict(self)


class InpaintingModel(nn.Module):
    """Pose encoder + reference encoder + denoiser; after ``enable_inpainting``
    also a mask encoder and the hybrid inpainting encoder.

    The autoencoder is referenced, not owned: it is frozen and saved separately.
    """

    def __init__(self, ae: FrameAutoencoder, image_size: int, cfg: ModelConfig | None = None):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        self.__dict__["ae"] = ae
        self.image_size = image_size
        cz, f = ae.latent_channels, ae.factor
        self.pose_encoder = DownsampleEncoder(3, cfg.cond_channels, f, cfg.encoder_width, zero_init=True)
        self.ref_encoder = ReferenceEncoder(cz, image_size // f, f, cfg.token_dim, cfg.n_local_tokens,
                                            cfg.encoder_width, cfg.use_ref_mask)
        self.denoiser = Denoiser(cz, cfg.cond_channels, cfg.base_width, cfg.token_dim, cfg.heads,
                                 cfg.temporal, cfg.time_dim)
        self.mask_encoder = None
        self.inpaint_encoder = None

    @property
    def phase(self) -> int:
        return 1 if self.mask_encoder is None else 2

    def enable_inpainting(self):
        """Add the phase-2 branches so that outputs are unchanged at initialisation."""
        if self.mask_encoder is not None:
            return self
        dtype = self.denoiser.conv_in.weight.dtype
        cfg, ae = self.cfg, self.ae
        # The denoiser's new input conv is zero, so this encoder must not also
        # start at zero or neither would receive gradient.
        self.mask_encoder = DownsampleEncoder(1, cfg.cond_channels, ae.factor, cfg.encoder_width,
                                              zero_init=False).to(dtype)
        self.inpaint_encoder = HybridInpaintEncoder(ae, cfg.encoder_width, cfg.use_inpaint_head).to(dtype)
        self.denoiser.enable_inpainting()
        return self

    def encode_reference(self, image, ref_mask, ref_pose):
        """Batched reference tensors (B, C, H, W) -> tokens (B, 1 + n, d)."""
        with torch.no_grad():
            latent = self.ae.encode(image.to(self.ae.latent_scale.dtype)).to(image.dtype)
        return self.ref_encoder(image, ref_mask, ref_pose, latent)

    def encode_conditions(self, pose_map, ref_image, ref_mask, ref_pose,
                          masked_video=None, mask=None) -> ConditionSet:
        pose_feat = self.pose_encoder(pose_map)
        tokens = self.encode_reference(ref_image, ref_mask, ref_pose)
        mask_feat = inpaint_feat = None
        if self.mask_encoder is not None:
            mask_feat = self.mask_encoder(mask)
            inpaint_feat = self.inpaint_encoder(masked_video, mask)
        return build_condition_set(pose_feat, mask_feat, inpaint_feat, tokens)

    @property
    def null_tokens(self):
        return self.ref_encoder.null_tokens

    def forward(self, x_t, t, cond: ConditionSet):
        return self.denoiser(x_t, t, cond)

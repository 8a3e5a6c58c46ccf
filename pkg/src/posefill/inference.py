"""Character replacement and insertion with a trained model."""
from __future__ import annotations

import numpy as np
import torch

from .conditions import null_conditions
from .errors import InvalidArgument, InvalidRegion, ValidationError
from .masks import FORMS, MaskClip, MaskPolicy, apply_mask, make_form
from .model import InpaintingModel
from .schedule import DiffusionSchedule, SamplerConfig, sample
from .synthetic import Clip, ReferenceBundle, render_pose_map


def _t(x) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32))


@torch.no_grad()
def generate(model: InpaintingModel, sched: DiffusionSchedule, pose_map: np.ndarray,
             reference: ReferenceBundle, video: np.ndarray | None = None,
             mask: MaskClip | None = None, sampler: SamplerConfig | None = None) -> np.ndarray:
    """Sample a clip (F, 3, H, W) in [-1, 1].

    A phase-2 model fills ``mask`` in ``video``; a phase-1 model ignores both.
    """
    sampler = sampler or SamplerConfig()
    model.eval()
    F_, _, H, W = pose_map.shape
    masked = mask_t = None
    if model.phase == 2:
        if video is None or mask is None:
            raise InvalidArgument("an inpainting model needs the input video and a mask")
        if video.shape[0] != F_ or mask.shape != (F_, 1, H, W):
            raise InvalidArgument("video, mask and pose sequence disagree in shape")
        masked = apply_mask(_t(video), mask)[None]
        mask_t = _t(mask.data)[None]
    cond = model.encode_conditions(_t(pose_map)[None], _t(reference.image)[None],
                                   _t(reference.ref_mask)[None], _t(reference.ref_pose_map)[None],
                                   masked, mask_t)
    cond_null = null_conditions(cond, model.null_tokens)
    ae = model.ae
    shape = (1, F_, ae.latent_channels, H // ae.factor, W // ae.factor)
    noise = _t(np.random.default_rng(sampler.seed).standard_normal(shape))
    z = sample(model, noise, cond, cond_null, sampler, sched)
    return ae.decode(z[0]).clamp(-1, 1).numpy()


def replace_character(model, sched, clip: Clip, reference: ReferenceBundle, mask_form: str = "inflated",
                      policy: MaskPolicy | None = None, sampler: SamplerConfig | None = None,
                      mask_seed: int = 0, radius: int | None = None) -> tuple[np.ndarray, MaskClip]:
    """Swap the clip's character for ``reference`` while keeping its motion."""
    if mask_form not in FORMS:
        raise InvalidArgument(f"unknown mask form {mask_form!r}; choose from {', '.join(FORMS)}")
    mask = make_form(clip.mask, mask_form, policy, np.random.default_rng(mask_seed), radius=radius)
    out = generate(model, sched, clip.pose.pose_map, reference, clip.video, mask, sampler)
    return out, mask


def rectangle_region(frames: int, size: int, box) -> MaskClip:
    """Region (x0, y0, x1, y1), half-open pixel bounds, repeated over all frames."""
    x0, y0, x1, y1 = (int(v) for v in box)
    if not (0 <= x0 < x1 <= size and 0 <= y0 < y1 <= size):
        raise InvalidRegion(f"rectangle {box} does not fit a {size}x{size} frame")
    data = np.zeros((frames, 1, size, size), dtype=np.uint8)
    data[:, :, y0:y1, x0:x1] = 1
    return MaskClip(data, "bbox")


def check_pose_in_region(keypoints: np.ndarray, region: MaskClip):
    """Every visible keypoint must land on a region pixel of its frame."""
    F_, _, H, W = region.shape
    if keypoints.shape[0] != F_:
        raise ValidationError(f"pose has {keypoints.shape[0]} frames, region has {F_}")
    for f in range(F_):
        for x, y, vis in keypoints[f]:
            if vis <= 0:
                continue
            px, py = int(np.floor(x * W)), int(np.floor(y * H))
            if not (0 <= px < W and 0 <= py < H) or not region.data[f, 0, py, px]:
                raise ValidationError(f"frame {f}: keypoint ({x:.3f}, {y:.3f}) lies outside the region")


def insert_character(model, sched, background_video: np.ndarray, reference: ReferenceBundle,
                     keypoints: np.ndarray, region: MaskClip,
                     sampler: SamplerConfig | None = None) -> np.ndarray:
    """Add a character driven by ``keypoints`` inside ``region`` of a background clip."""
    if region.shape[0] != background_video.shape[0] or region.shape[-2:] != background_video.shape[-2:]:
        raise InvalidRegion("region and background clip differ in shape")
    check_pose_in_region(keypoints, region)
    pose_map = render_pose_map(keypoints, background_video.shape[-1])
    return generate(model, sched, pose_map, reference, background_video, region, sampler)

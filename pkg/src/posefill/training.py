"""Mask-focused objective and the two-phase training procedure.

Phase 1 learns pose- and reference-driven generation on complete clips.
Phase 2 migrates that model (new inputs start at zero) and trains it to fill
masked regions of the clip. All randomness per step (clip, mask form,
timestep, noise, condition dropout) comes from one numpy Generator whose state
is part of ``TrainState``, so runs are reproducible and resumable.
"""
from __future__ import annotations

import copy
import csv
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .autoencoder import FrameAutoencoder, train_autoencoder
from .conditions import dropout_conditions
from .errors import InvalidArgument, InvalidDataset, InvalidShape, MigrationError
from .masks import MaskClip, MaskPolicy, apply_mask, sample_mask_form
from .model import InpaintingModel, ModelConfig
from .schedule import DiffusionSchedule, forward_marginal, make_schedule, v_target
from .synthetic import Clip, make_identity, make_motion, make_reference, render_clip

LOSS_COLUMNS = ("step", "loss_total", "loss_base", "loss_masked")
LR_SCHEDULES = ("constant", "cosine")


@dataclass
class TrainConfig:
    phase: int = 1
    alpha: float = 5.0
    lr: float = 3e-5
    dropout_p: float = 0.1
    steps: int = 2000
    batch_size: int = 1
    seed: int = 0
    mask_policy: MaskPolicy = field(default_factory=MaskPolicy)
    # divide the masked term by the mask's share of elements instead of all elements
    normalize_mask_area: bool = False
    # "constant", or "cosine": linear warmup then cosine decay to zero at ``steps``
    lr_schedule: str = "constant"
    warmup_steps: int = 0

    def __post_init__(self):
        if self.phase not in (1, 2):
            raise InvalidArgument(f"phase must be 1 or 2, got {self.phase}")
        if self.alpha < 0:
            raise InvalidArgument("alpha must be non-negative")
        if not 0 <= self.dropout_p <= 1:
            raise InvalidArgument("dropout_p must lie in [0, 1]")
        if self.steps < 0 or self.batch_size < 1 or self.lr <= 0:
            raise InvalidArgument("steps >= 0, batch_size >= 1 and lr > 0 required")
        if self.lr_schedule not in LR_SCHEDULES or self.warmup_steps < 0:
            raise InvalidArgument(f"lr_schedule must be one of {LR_SCHEDULES}, warmup_steps >= 0")

    def lr_at(self, step: int) -> float:
        """Learning rate for the update that takes the state from ``step`` to ``step + 1``."""
        if self.lr_schedule == "constant":
            return self.lr
        if step < self.warmup_steps:
            return self.lr * (step + 1) / self.warmup_steps
        span = max(self.steps - self.warmup_steps, 1)
        frac = min((step - self.warmup_steps) / span, 1.0)
        return self.lr * 0.5 * (1 + math.cos(math.pi * frac))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mask_policy"] = self.mask_policy.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "mask_policy" in d:
            mp = d["mask_policy"]
            d["mask_policy"] = mp if isinstance(mp, MaskPolicy) else MaskPolicy.from_dict(mp)
        return cls(**d)


# Loss ----------------------------------------------------------------------

def loss_terms(v, v_hat, mask, normalize_mask_area: bool = False):
    """(base, masked) terms; ``mask`` broadcasts against ``v``."""
    if tuple(v.shape) != tuple(v_hat.shape):
        raise InvalidShape(f"target {tuple(v.shape)} vs prediction {tuple(v_hat.shape)}")
    err = (v - v_hat) ** 2
    base = err.mean()
    m = torch.as_tensor(mask, dtype=err.dtype).expand_as(err)
    masked = (m * err).mean()
    if normalize_mask_area:
        share = m.mean()
        masked = masked / share if share > 0 else masked
    return base, masked


def mask_focused_loss(v, v_hat, mask, alpha: float, normalize_mask_area: bool = False):
    """mean((v - v_hat)^2) + alpha * mean((mask * (v - v_hat))^2)."""
    if alpha < 0:
        raise InvalidArgument("alpha must be non-negative")
    base, masked = loss_terms(v, v_hat, mask, normalize_mask_area)
    return base + alpha * masked


def downsample_mask_to_latent(mask, factor: int = 4) -> torch.Tensor:
    """Max-pool a pixel mask (..., 1, H, W) onto the latent grid."""
    data = mask.data if isinstance(mask, MaskClip) else mask
    m = torch.as_tensor(np.asarray(data) if not torch.is_tensor(data) else data).float()
    if m.shape[-1] % factor or m.shape[-2] % factor:
        raise InvalidShape(f"mask {tuple(m.shape[-2:])} not divisible by {factor}")
    lead = m.shape[:-3]
    out = F.max_pool2d(m.reshape(-1, *m.shape[-3:]), factor)
    return out.reshape(*lead, *out.shape[1:])


# Autoencoder -------------------------------------------------------------------

def autoencoder_corpus(clips: list[Clip], pretrain_clips: int, seed: int) -> np.ndarray:
    """Frames of ``clips`` plus ``pretrain_clips`` freshly rendered generic clips.

    The generic clips play the part of the broad data a pretrained image
    autoencoder would have seen.
    """
    if not clips:
        raise InvalidDataset("the training set is empty")
    size, frames = clips[0].video.shape[-1], clips[0].video.shape[0]
    extra = []
    for ss in np.random.SeedSequence(seed).spawn(pretrain_clips):
        id_ss, mo_ss = ss.spawn(2)
        extra.append(render_clip(make_identity(np.random.default_rng(id_ss), size),
                                 make_motion(np.random.default_rng(mo_ss), frames, size)).video)
    return np.concatenate([c.video for c in clips] + extra).astype(np.float32)


def fit_autoencoder(clips: list[Clip], pretrain_clips: int = 64, seed: int = 0, **kw) -> FrameAutoencoder:
    return train_autoencoder(autoencoder_corpus(clips, pretrain_clips, seed), seed=seed, **kw)


# Data ------------------------------------------------------------------------

@dataclass
class ClipRecord:
    """Tensors of one training clip, precomputed once."""
    video: torch.Tensor        # F x 3 x H x W
    latent: torch.Tensor       # F x C_z x h x w
    pose_map: torch.Tensor     # F x 3 x H x W
    precise: MaskClip
    ref_image: torch.Tensor    # 3 x H x W
    ref_mask: torch.Tensor     # 1 x H x W
    ref_pose: torch.Tensor     # 3 x H x W
    clip_id: str


def prepare_clips(clips: list[Clip], ae: FrameAutoencoder) -> list[ClipRecord]:
    if not clips:
        raise InvalidDataset("the training set is empty")
    out = []
    for c in clips:
        if c.identity is None:
            raise InvalidDataset(f"clip {c.clip_id!r} has no character to learn from")
        ref = make_reference(c.identity)
        video = torch.from_numpy(np.ascontiguousarray(c.video, dtype=np.float32))
        with torch.no_grad():
            latent = ae.encode(video)
        out.append(ClipRecord(video, latent, torch.from_numpy(c.pose.pose_map.astype(np.float32)),
                              c.mask, torch.from_numpy(ref.image.astype(np.float32)),
                              torch.from_numpy(ref.ref_mask.astype(np.float32)),
                              torch.from_numpy(ref.ref_pose_map.astype(np.float32)), c.clip_id))
    return out


# State -----------------------------------------------------------------------

@dataclass
class TrainState:
    model: InpaintingModel
    optimizer: torch.optim.Optimizer
    config: TrainConfig
    sched: DiffusionSchedule
    rng: np.random.Generator
    step: int = 0
    losses: list = field(default_factory=list)   # rows of LOSS_COLUMNS
    completed: bool = False

    @property
    def phase(self) -> int:
        return self.model.phase


def make_optimizer(model: InpaintingModel, lr: float) -> torch.optim.Adam:
    params = [p for p in model.parameters() if p.requires_grad]
    return torch.optim.Adam(params, lr=lr, betas=(0.9, 0.999))


def new_state(ae: FrameAutoencoder, image_size: int, config: TrainConfig,
              model_cfg: ModelConfig | None = None, sched: DiffusionSchedule | None = None) -> TrainState:
    """Fresh phase-1 state; parameters are initialised from ``config.seed``."""
    if config.phase != 1:
        raise InvalidArgument("fresh states start at phase 1; use init_phase2_from_phase1")
    torch.manual_seed(config.seed)
    model = InpaintingModel(ae, image_size, model_cfg)
    return TrainState(model, make_optimizer(model, config.lr), config, sched or make_schedule(1000),
                      np.random.default_rng(config.seed))


def init_phase2_from_phase1(state1: TrainState, config: TrainConfig | None = None,
                            use_inpaint_head: bool | None = None) -> TrainState:
    """Copy a phase-1 model, add the inpainting inputs and start a fresh optimiser.

    New weights that feed the denoiser start at zero, so at step 0 the phase-2
    model gives exactly the phase-1 output whenever the new features are zero.
    ``use_inpaint_head=False`` keeps only the frozen autoencoder branch of the
    inpainting encoder (the default follows the phase-1 model config).
    """
    if state1.phase != 1:
        raise MigrationError("migration needs a phase-1 state")
    if not state1.completed:
        raise MigrationError(f"phase 1 stopped at step {state1.step} of {state1.config.steps}")
    den = state1.model.denoiser
    cz, cc = den.latent_channels, den.cond_channels
    if den.conv_in.in_channels != cz + cc:
        raise MigrationError(f"input conv reads {den.conv_in.in_channels} channels, expected {cz + cc}")
    cfg = config or TrainConfig(**{**state1.config.to_dict(), "phase": 2,
                                   "mask_policy": state1.config.mask_policy})
    if cfg.phase != 2:
        raise MigrationError("the target configuration must be phase 2")
    model = copy.deepcopy(state1.model)
    model.__dict__["ae"] = state1.model.ae
    if use_inpaint_head is not None:
        model.cfg = replace(model.cfg, use_inpaint_head=use_inpaint_head)
    torch.manual_seed(cfg.seed)
    model.enable_inpainting()
    if model.inpaint_encoder is not None:
        model.inpaint_encoder.__dict__["ae"] = state1.model.ae
    return TrainState(model, make_optimizer(model, cfg.lr), cfg, state1.sched,
                      np.random.default_rng(cfg.seed))


# Steps -----------------------------------------------------------------------

def _stack(records, name):
    return torch.stack([getattr(r, name) for r in records])


def build_batch(state: TrainState, data: list[ClipRecord]):
    """Draw clips and (in phase 2) mask forms. Draw order: clip indices, then
    one mask form per clip in order; blend donors are the other clips' masks."""
    rng, cfg = state.rng, state.config
    idx = rng.integers(0, len(data), size=cfg.batch_size)
    recs = [data[i] for i in idx]
    batch = {name: _stack(recs, name) for name in
             ("video", "latent", "pose_map", "ref_image", "ref_mask", "ref_pose")}
    if state.phase == 2:
        masks = [sample_mask_form(r.precise, cfg.mask_policy, rng,
                                  donor_pool=[d.precise for d in data if d is not r]) for r in recs]
        mask = torch.from_numpy(np.stack([m.data for m in masks]).astype(np.float32))
        batch["mask"] = mask
        batch["masked_video"] = torch.stack([apply_mask(r.video, m) for r, m in zip(recs, masks)])
    return batch


def compute_loss(state: TrainState, batch: dict):
    """Noise the batch, run the model, return (total, base, masked) tensors."""
    model, cfg, rng, sched = state.model, state.config, state.rng, state.sched
    x0 = batch["latent"]
    B = x0.shape[0]
    cond = model.encode_conditions(batch["pose_map"], batch["ref_image"], batch["ref_mask"],
                                   batch["ref_pose"], batch.get("masked_video"), batch.get("mask"))
    cond = dropout_conditions(cond, cfg.dropout_p, rng, model.null_tokens)
    t = rng.integers(1, sched.T + 1, size=B)
    eps = torch.from_numpy(rng.standard_normal(tuple(x0.shape)).astype(np.float32)).to(x0.dtype)
    x_t = forward_marginal(x0, t, eps, sched)
    v = v_target(x0, eps, t, sched)
    v_hat = model(x_t, torch.from_numpy(t), cond)
    if "mask" in batch:
        lmask = downsample_mask_to_latent(batch["mask"], model.ae.factor).to(v.dtype)
    else:
        lmask = torch.zeros((), dtype=v.dtype)
    base, masked = loss_terms(v, v_hat, lmask, cfg.normalize_mask_area)
    alpha = cfg.alpha if state.phase == 2 else 0.0
    return base + alpha * masked, base, masked


def train_step(state: TrainState, data: list[ClipRecord]) -> tuple[float, float, float]:
    state.model.train()
    batch = build_batch(state, data)
    total, base, masked = compute_loss(state, batch)
    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    for group in state.optimizer.param_groups:
        group["lr"] = state.config.lr_at(state.step)
    state.optimizer.step()
    state.step += 1
    row = (state.step, total.item(), base.item(), masked.item())
    state.losses.append(row)
    return row[1:]


def run(state: TrainState, data: list[ClipRecord], steps: int | None = None,
        callback=None, log_every: int = 0) -> TrainState:
    """Train until ``config.steps`` (or for ``steps`` more steps).

    ``callback(state)`` runs after every step, e.g. for periodic checkpoints.
    """
    target = state.config.steps if steps is None else state.step + steps
    while state.step < target:
        total, _, _ = train_step(state, data)
        if log_every and state.step % log_every == 0:
            print(f"phase {state.phase} step {state.step:6d} loss {total:.5f}", flush=True)
        if callback is not None:
            callback(state)
    state.completed = state.step >= state.config.steps
    return state


def train_phase1(clips: list[Clip], ae: FrameAutoencoder, config: TrainConfig,
                 model_cfg: ModelConfig | None = None, **kw) -> TrainState:
    if config.phase != 1:
        raise InvalidArgument("train_phase1 needs a phase-1 config")
    data = prepare_clips(clips, ae)
    state = new_state(ae, data[0].video.shape[-1], config, model_cfg)
    return run(state, data, **kw)


def train_phase2(clips: list[Clip], state: TrainState, config: TrainConfig | None = None,
                 **kw) -> TrainState:
    """Continue a migrated state (or migrate a phase-1 state first)."""
    if state.phase == 1:
        state = init_phase2_from_phase1(state, config)
    data = prepare_clips(clips, state.model.ae)
    return run(state, data, **kw)


def write_loss_csv(losses, path):
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOSS_COLUMNS)
        for step, total, base, masked in losses:
            w.writerow([step, repr(total), repr(base), repr(masked)])

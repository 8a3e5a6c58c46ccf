"""Shared pieces of the overfit experiments behind the slow acceptance criteria.

Setup: a 4 identities x 2 motions grid of 32x32x16 clips with equal limb
lengths, so replacing the character of one clip with another identity of the
same motion has a ground-truth answer that is itself a training clip.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import torch

from posefill.autoencoder import FrameAutoencoder
from posefill.masks import inflate_mask
from posefill.metrics import EvalReport, evaluate
from posefill.model import ModelConfig
from posefill.schedule import SamplerConfig
from posefill.synthetic import Clip, load_dataset, make_dataset, make_reference, replacement_oracle
from posefill.inference import generate
from posefill.training import (TrainConfig, fit_autoencoder, init_phase2_from_phase1, prepare_clips,
                               run, train_phase1)


@dataclass
class Plan:
    size: int = 32
    frames: int = 16
    identities: int = 4
    motions: int = 2
    data_seed: int = 11
    ae_steps: int = 9000
    ae_pretrain_clips: int = 64
    phase1_steps: int = 8000
    phase2_steps: int = 6000
    lr: float = 5e-4
    lr_schedule: str = "cosine"
    warmup_steps: int = 100
    seed: int = 0
    min_radius: int = 2
    sampler: SamplerConfig = field(default_factory=lambda: SamplerConfig(steps=50, guidance_scale=1.0, seed=0))
    model: ModelConfig = field(default_factory=ModelConfig)


def grid_clips(plan: Plan, root) -> list[Clip]:
    n = plan.identities * plan.motions
    make_dataset(n, plan.data_seed, root, plan.size, plan.frames,
                 grid=(plan.identities, plan.motions), limb_jitter=0.0)
    return load_dataset(root)


def train_autoencoder_for(clips, plan: Plan, log_every=0) -> FrameAutoencoder:
    return fit_autoencoder(clips, pretrain_clips=plan.ae_pretrain_clips, seed=plan.seed,
                           steps=plan.ae_steps, log_every=log_every)


def _optim(plan: Plan) -> dict:
    return dict(lr=plan.lr, lr_schedule=plan.lr_schedule, warmup_steps=plan.warmup_steps)


def phase1(clips, ae, plan: Plan, use_ref_mask=True, log_every=0):
    cfg = TrainConfig(phase=1, steps=plan.phase1_steps, seed=plan.seed, **_optim(plan))
    model_cfg = ModelConfig(**{**plan.model.to_dict(), "use_ref_mask": use_ref_mask})
    return train_phase1(clips, ae, cfg, model_cfg, log_every=log_every)


def phase2(clips, state1, plan: Plan, use_inpaint_head=True, log_every=0):
    cfg = TrainConfig(phase=2, steps=plan.phase2_steps, seed=plan.seed + 1, **_optim(plan))
    state = init_phase2_from_phase1(state1, cfg, use_inpaint_head)
    return run(state, prepare_clips(clips, state.model.ae), log_every=log_every)


def swap_partner(i: int, plan: Plan) -> int:
    """Clip with the next identity and the same motion."""
    motion, ident = divmod(i, plan.identities)
    return motion * plan.identities + (ident + 1) % plan.identities


def replacement_mask(clip_a: Clip, clip_b: Clip, min_radius: int):
    """Inflated mask of A, grown until it also covers B's silhouette."""
    r = min_radius
    while True:
        m = inflate_mask(clip_a.mask, r)
        if m.contains(clip_b.mask):
            return m
        r += 1


@torch.no_grad()
def replacement_eval(state, clips, plan: Plan) -> EvalReport:
    """Replace every clip's character by its swap partner's and score against the oracle."""
    outs, truths, masks = [], [], []
    for i, a in enumerate(clips):
        b = clips[swap_partner(i, plan)]
        mask = replacement_mask(a, b, plan.min_radius)
        truth = replacement_oracle(a, b.identity)
        out = generate(state.model, state.sched, a.pose.pose_map, make_reference(b.identity),
                       a.video, mask, plan.sampler)
        outs.append(out)
        truths.append(truth)
        masks.append(mask)
    return evaluate(outs, truths, masks)


class Timer:
    def __init__(self):
        self.t0 = time.perf_counter()

    def __call__(self) -> float:
        return time.perf_counter() - self.t0

"""Noise schedule, forward diffusion, v-targets, DDIM stepping and guidance.

Step indices are 1-based (t = 1..T); index 0 denotes the clean signal with
alpha_bar = 1. Schedule arithmetic is float64; tensors keep their own dtype.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from .errors import InvalidArgument, InvalidStep, InvalidStepPair, ModelContractViolation, UnsupportedSchedule

BETA_START = 1e-4
BETA_END = 2e-2


@dataclass(frozen=True)
class DiffusionSchedule:
    beta: np.ndarray
    alpha_bar: np.ndarray = field(init=False)

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64).copy()
        if beta.ndim != 1 or beta.size < 1:
            raise InvalidArgument("beta must be a non-empty 1-D array")
        if not np.all((beta > 0) & (beta < 1)):
            raise InvalidArgument("every beta must lie strictly inside (0, 1)")
        beta.setflags(write=False)
        abar = np.cumprod(1.0 - beta)
        abar.setflags(write=False)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha_bar", abar)

    @property
    def T(self) -> int:
        return int(self.beta.size)

    def check_step(self, t, allow_zero: bool = False):
        lo = 0 if allow_zero else 1
        arr = np.asarray(t.cpu() if torch.is_tensor(t) else t)
        if arr.size == 0 or np.any(arr < lo) or np.any(arr > self.T):
            raise InvalidStep(f"step {t!r} outside [{lo}, {self.T}]")

    def abar(self, t) -> np.ndarray:
        """alpha_bar at step(s) ``t`` with alpha_bar(0) = 1."""
        self.check_step(t, allow_zero=True)
        arr = np.asarray(t.cpu() if torch.is_tensor(t) else t, dtype=np.int64)
        padded = np.concatenate([[1.0], self.alpha_bar])
        return padded[arr]

    def to_dict(self) -> dict:
        return {"T": self.T, "beta": [float(b) for b in self.beta]}

    @classmethod
    def from_dict(cls, d: dict) -> "DiffusionSchedule":
        sched = cls(np.asarray(d["beta"], dtype=np.float64))
        if sched.T != int(d["T"]):
            raise InvalidArgument("schedule length does not match recorded T")
        return sched


def make_schedule(T: int, kind: str = "linear", beta_start: float = BETA_START,
                  beta_end: float = BETA_END) -> DiffusionSchedule:
    if int(T) != T or T < 1:
        raise InvalidArgument(f"T must be a positive integer, got {T!r}")
    if kind != "linear":
        raise UnsupportedSchedule(f"unknown schedule kind {kind!r}")
    if T == 1:
        beta = np.array([beta_start], dtype=np.float64)
    else:
        beta = np.linspace(beta_start, beta_end, int(T), dtype=np.float64)
    return DiffusionSchedule(beta)


# Closed forms in terms of a given alpha_bar. ``abar`` is a float or an array
# broadcast against the leading (batch) axis of x.

def _bcast(abar, like):
    a = np.asarray(abar, dtype=np.float64)
    if torch.is_tensor(like):
        a = torch.as_tensor(a, dtype=like.dtype, device=like.device)
        if a.ndim == 1:
            a = a.reshape(-1, *([1] * (like.ndim - 1)))
        return a.sqrt(), (1 - a).sqrt()
    if a.ndim == 1:
        a = a.reshape(-1, *([1] * (np.ndim(like) - 1)))
    return np.sqrt(a), np.sqrt(1 - a)


def marginal(x0, eps, abar):
    s, n = _bcast(abar, x0)
    return s * x0 + n * eps


def velocity(x0, eps, abar):
    s, n = _bcast(abar, x0)
    return s * eps - n * x0


def split_prediction(x_t, v_hat, abar):
    """Recover (x0_hat, eps_hat) from a noised latent and a v prediction."""
    s, n = _bcast(abar, x_t)
    return s * x_t - n * v_hat, n * x_t + s * v_hat


def _check_pair(x0, eps):
    if tuple(x0.shape) != tuple(eps.shape):
        raise InvalidArgument(f"shape mismatch {tuple(x0.shape)} vs {tuple(eps.shape)}")


def forward_marginal(x0, t, eps, sched: DiffusionSchedule):
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    sched.check_step(t)
    _check_pair(x0, eps)
    return marginal(x0, eps, sched.abar(t))


def v_target(x0, eps, t, sched: DiffusionSchedule):
    sched.check_step(t)
    _check_pair(x0, eps)
    return velocity(x0, eps, sched.abar(t))


def ddim_step(x_t, v_hat, t: int, t_prev: int, sched: DiffusionSchedule):
    """Deterministic (eta = 0) DDIM update from step t to t_prev."""
    if t_prev >= t:
        raise InvalidStepPair(f"t_prev={t_prev} must be below t={t}")
    sched.check_step(t)
    sched.check_step(t_prev, allow_zero=True)
    if tuple(v_hat.shape) != tuple(x_t.shape):
        raise InvalidArgument("v_hat and x_t shapes differ")
    x0_hat, eps_hat = split_prediction(x_t, v_hat, sched.abar(t))
    return marginal(x0_hat, eps_hat, sched.abar(t_prev))


def cfg_combine(v_cond, v_uncond, scale: float):
    if scale == 1:
        return v_cond
    if scale == 0:
        return v_uncond
    return v_uncond + scale * (v_cond - v_uncond)


@dataclass
class SamplerConfig:
    steps: int = 50
    guidance_scale: float = 1.0
    eta: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise InvalidArgument("steps must be >= 1")
        if self.guidance_scale < 0:
            raise InvalidArgument("guidance_scale must be >= 0")
        if self.eta != 0:
            raise InvalidArgument("only deterministic DDIM (eta = 0) is supported")


def timestep_sequence(steps: int, T: int) -> list[int]:
    """Uniformly strided, strictly decreasing steps starting at T."""
    if steps > T:
        raise InvalidArgument(f"steps={steps} exceeds T={T}")
    stride = T / steps
    return [int(round(T - i * stride)) for i in range(steps)]


def sample(denoiser: Callable, init_noise, cond, cond_null, cfg: SamplerConfig,
           sched: DiffusionSchedule):
    """Run DDIM from pure noise to a clean latent.

    ``denoiser(x, t, cond)`` returns a v prediction shaped like ``x``; ``t`` is
    passed as a python int. The unconditional pass is skipped when the guidance
    scale is exactly 1, and the conditional one when it is exactly 0.
    """
    ts = timestep_sequence(cfg.steps, sched.T)
    x = init_noise
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        v_c = denoiser(x, t, cond) if cfg.guidance_scale != 0 else None
        v_u = denoiser(x, t, cond_null) if cfg.guidance_scale != 1 else None
        for v in (v_c, v_u):
            if v is not None and tuple(v.shape) != tuple(x.shape):
                raise ModelContractViolation(
                    f"denoiser returned {tuple(v.shape)} for input {tuple(x.shape)}")
        v = cfg_combine(v_c, v_u, cfg.guidance_scale)
        x = ddim_step(x, v, t, t_prev, sched)
    return x


"""PSNR, SSIM and region-split MSE for clips in [-1, 1]."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidRegion, InvalidShape
from .masks import MaskClip

PEAK = 2.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def _arr(x) -> np.ndarray:
    if hasattr(x, "detach"):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def _region(region, like: np.ndarray) -> np.ndarray:
    m = region.data if isinstance(region, MaskClip) else np.asarray(region)
    return np.broadcast_to(m.astype(bool), like.shape)


def mse(a, b, region=None) -> float:
    a, b = _arr(a), _arr(b)
    if a.shape != b.shape:
        raise InvalidShape(f"shape mismatch {a.shape} vs {b.shape}")
    d = (a - b) ** 2
    if region is None:
        return float(d.mean())
    sel = _region(region, d)
    if not sel.any():
        raise InvalidRegion("region is empty")
    return float(d[sel].mean())


def psnr_from_mse(err: float, peak: float = PEAK) -> float:
    return math.inf if err == 0 else 10 * math.log10(peak * peak / err)


def psnr(a, b, region=None) -> float:
    """10 log10(peak^2 / MSE) with peak 2; infinite for identical inputs."""
    return psnr_from_mse(mse(a, b, region))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-ax ** 2 / (2 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim_map(x: np.ndarray, y: np.ndarray, L: float = PEAK) -> np.ndarray:
    """SSIM at every fully-covered window position of the trailing two axes."""
    w = gaussian_window()
    if x.shape[-1] < SSIM_WINDOW or x.shape[-2] < SSIM_WINDOW:
        raise InvalidShape(f"frames smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    c1, c2 = (0.01 * L) ** 2, (0.03 * L) ** 2

    def filt(z):
        return np.einsum("...ij,ij->...", sliding_window_view(z, w.shape, axis=(-2, -1)), w)

    mx, my = filt(x), filt(y)
    vx = filt(x * x) - mx * mx
    vy = filt(y * y) - my * my
    cxy = filt(x * y) - mx * my
    return ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))


def ssim(a, b) -> float:
    """Mean windowed SSIM over frames, channels and window positions."""
    a, b = _arr(a), _arr(b)
    if a.shape != b.shape:
        raise InvalidShape(f"shape mismatch {a.shape} vs {b.shape}")
    return float(ssim_map(a, b).mean())


@dataclass
class EvalReport:
    psnr_full: float
    psnr_masked_region: float
    psnr_unmasked_region: float
    ssim_full: float
    mse_masked: float
    mse_unmasked: float
    per_clip: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))


def _clip_report(generated, truth, mask) -> EvalReport:
    g, t = _arr(generated), _arr(truth)
    m = _region(mask, g)
    full = mse(g, t)
    mm = float(((g - t) ** 2)[m].mean()) if m.any() else math.nan
    mu = float(((g - t) ** 2)[~m].mean()) if (~m).any() else math.nan
    return EvalReport(psnr_from_mse(full),
                      psnr_from_mse(mm) if m.any() else math.nan,
                      psnr_from_mse(mu) if (~m).any() else math.nan,
                      ssim(g, t), mm, mu)


def evaluate(generated, truth, mask) -> EvalReport:
    """Score one clip, or a list of clips (aggregate = mean of per-clip values)."""
    if isinstance(generated, (list, tuple)):
        reports = [_clip_report(g, t, m) for g, t, m in zip(generated, truth, mask)]
        keys = ("psnr_full", "psnr_masked_region", "psnr_unmasked_region", "ssim_full",
                "mse_masked", "mse_unmasked")
        agg = {k: float(np.mean([getattr(r, k) for r in reports])) for k in keys}
        return EvalReport(**agg, per_clip=[{k: getattr(r, k) for k in keys} for r in reports])
    return _clip_report(generated, truth, mask)


def format_table(report: EvalReport) -> str:
    rows = [("PSNR full (dB)", report.psnr_full),
            ("PSNR masked region (dB)", report.psnr_masked_region),
            ("PSNR unmasked region (dB)", report.psnr_unmasked_region),
            ("SSIM full", report.ssim_full),
            ("MSE masked", report.mse_masked),
            ("MSE unmasked", report.mse_unmasked)]
    width = max(len(r[0]) for r in rows)
    lines = [f"{name:<{width}}  {value:10.4f}" for name, value in rows]
    lines.append("(LPIPS and FVD are not computed: they need pretrained networks)")
    return "\n".join(lines)

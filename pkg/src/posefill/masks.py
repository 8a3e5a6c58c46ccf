"""Training-time mask forms for the fill region and helpers to apply them.

Masks are uint8 arrays shaped (F, 1, H, W) with 1 marking pixels to
synthesize. Every constructor returns a superset of the precise silhouette.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import InvalidArgument, InvalidMask

FORMS = ("precise", "bbox", "inflated", "blended", "edge_destruction")


@dataclass(frozen=True)
class MaskClip:
    data: np.ndarray
    form_tag: str = "precise"

    def __post_init__(self):
        d = np.asarray(self.data)
        if d.ndim != 4 or d.shape[1] != 1:
            raise InvalidMask(f"mask must be F x 1 x H x W, got {d.shape}")
        if not np.all((d == 0) | (d == 1)):
            raise InvalidMask("mask values must be exactly 0 or 1")
        if self.form_tag not in FORMS:
            raise InvalidMask(f"unknown form tag {self.form_tag!r}")
        object.__setattr__(self, "data", d.astype(np.uint8, copy=False))

    @property
    def shape(self):
        return self.data.shape

    def area(self) -> int:
        return int(self.data.sum())

    def contains(self, other: "MaskClip") -> bool:
        return bool(np.all(self.data >= other.data))


@dataclass
class MaskPolicy:
    form_weights: dict = field(default_factory=lambda: {f: 0.2 for f in FORMS})
    inflate_radius_range: tuple = (1, 6)
    blend_count_range: tuple = (1, 2)
    blend_shift_fraction: float = 0.25
    edge_shape_count_range: tuple = (1, 4)
    edge_shape_radius_range: tuple = (1, 4)
    bbox_per_clip: bool = False
    seed: int = 0

    def __post_init__(self):
        unknown = set(self.form_weights) - set(FORMS)
        if unknown:
            raise InvalidArgument(f"unknown mask forms {sorted(unknown)}")
        w = np.array([self.form_weights.get(f, 0.0) for f in FORMS], dtype=np.float64)
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise InvalidArgument("form weights must be non-negative and sum to 1")
        for name in ("inflate_radius_range", "blend_count_range",
                     "edge_shape_count_range", "edge_shape_radius_range"):
            lo, hi = getattr(self, name)
            if lo < 0 or lo > hi:
                raise InvalidArgument(f"{name} must satisfy 0 <= min <= max")
            setattr(self, name, (int(lo), int(hi)))

    @property
    def probabilities(self) -> np.ndarray:
        return np.array([self.form_weights.get(f, 0.0) for f in FORMS], dtype=np.float64)

    @classmethod
    def only(cls, form: str, **kw) -> "MaskPolicy":
        return cls(form_weights={f: float(f == form) for f in FORMS}, **kw)

    def to_dict(self) -> dict:
        return {
            "form_weights": dict(self.form_weights),
            "inflate_radius_range": list(self.inflate_radius_range),
            "blend_count_range": list(self.blend_count_range),
            "blend_shift_fraction": self.blend_shift_fraction,
            "edge_shape_count_range": list(self.edge_shape_count_range),
            "edge_shape_radius_range": list(self.edge_shape_radius_range),
            "bbox_per_clip": self.bbox_per_clip,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MaskPolicy":
        d = dict(d)
        for k in ("inflate_radius_range", "blend_count_range",
                  "edge_shape_count_range", "edge_shape_radius_range"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def disk(radius: int) -> np.ndarray:
    """Euclidean disk structuring element of the given integer radius."""
    r = int(radius)
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return (yy * yy + xx * xx <= r * r)


def precise_mask(seg) -> MaskClip:
    seg = np.asarray(seg)
    if seg.ndim == 3:
        seg = seg[:, None]
    return MaskClip(seg, "precise")


def bbox_mask(precise: MaskClip, per_clip: bool = False) -> MaskClip:
    src = precise.data
    out = np.zeros_like(src)
    if per_clip:
        rows = np.flatnonzero(src.any(axis=(0, 1, 3)))
        cols = np.flatnonzero(src.any(axis=(0, 1, 2)))
        if rows.size:
            out[:, :, rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1] = 1
        return MaskClip(out, "bbox")
    for f in range(src.shape[0]):
        fg = src[f, 0]
        rows = np.flatnonzero(fg.any(axis=1))
        if rows.size == 0:
            continue
        cols = np.flatnonzero(fg.any(axis=0))
        out[f, 0, rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1] = 1
    return MaskClip(out, "bbox")


def _dilate(data: np.ndarray, radius: int) -> np.ndarray:
    if radius == 0:
        return data.copy()
    struct = disk(radius)[None, None]
    return ndimage.binary_dilation(data.astype(bool), structure=struct).astype(np.uint8)


def inflate_mask(precise: MaskClip, radius: int) -> MaskClip:
    if radius < 0:
        raise InvalidArgument(f"radius must be >= 0, got {radius}")
    return MaskClip(_dilate(precise.data, int(radius)), "inflated")


def shift_mask(data: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Translate spatially; content pushed past the border is dropped."""
    out = np.zeros_like(data)
    H, W = data.shape[-2:]
    ys, yd = (slice(0, H - dy), slice(dy, H)) if dy >= 0 else (slice(-dy, H), slice(0, H + dy))
    xs, xd = (slice(0, W - dx), slice(dx, W)) if dx >= 0 else (slice(-dx, W), slice(0, W + dx))
    if abs(dy) < H and abs(dx) < W:
        out[..., yd, xd] = data[..., ys, xs]
    return out


def blend_mask(precise: MaskClip, donors: Sequence[MaskClip], offsets=None,
               rng: np.random.Generator | None = None, max_shift: int = 0) -> MaskClip:
    """Union of the precise mask with spatially shifted donor masks.

    When ``offsets`` is None they are drawn uniformly from
    [-max_shift, max_shift] per axis using ``rng``.
    """
    out = precise.data.copy()
    for i, donor in enumerate(donors):
        if donor.shape != precise.shape:
            raise InvalidArgument("donor mask shape differs from precise mask")
        if offsets is not None:
            dy, dx = offsets[i]
        else:
            dy, dx = rng.integers(-max_shift, max_shift + 1, size=2)
        out |= shift_mask(donor.data, int(dy), int(dx))
    return MaskClip(out, "blended")


def boundary_pixels(frame: np.ndarray) -> np.ndarray:
    """Foreground pixels with a 4-neighbour in the background (outside counts as background)."""
    fg = frame.astype(bool)
    interior = ndimage.binary_erosion(fg, structure=ndimage.generate_binary_structure(2, 1),
                                      border_value=0)
    return fg & ~interior


def edge_destruction_mask(precise: MaskClip, policy: MaskPolicy,
                          rng: np.random.Generator) -> MaskClip:
    out = precise.data.copy()
    H, W = out.shape[-2:]
    yy, xx = np.mgrid[0:H, 0:W]
    c_lo, c_hi = policy.edge_shape_count_range
    r_lo, r_hi = policy.edge_shape_radius_range
    for f in range(out.shape[0]):
        edge = np.argwhere(boundary_pixels(precise.data[f, 0]))
        if len(edge) == 0:
            continue
        n = int(rng.integers(c_lo, c_hi + 1))
        for _ in range(n):
            cy, cx = edge[rng.integers(len(edge))]
            r = int(rng.integers(r_lo, r_hi + 1))
            out[f, 0][(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = 1
    return MaskClip(out, "edge_destruction")


def sample_mask_form(precise: MaskClip, policy: MaskPolicy, rng: np.random.Generator,
                     donor_pool: Sequence[MaskClip] = ()) -> MaskClip:
    """Draw one of the five forms according to ``policy.form_weights``.

    Blend donors come from ``donor_pool`` (masks of other clips) or, when it is
    empty, from the same clip rolled in time.
    """
    form = FORMS[int(rng.choice(len(FORMS), p=policy.probabilities))]
    if form == "precise":
        return MaskClip(precise.data.copy(), "precise")
    if form == "bbox":
        return bbox_mask(precise, per_clip=policy.bbox_per_clip)
    if form == "inflated":
        lo, hi = policy.inflate_radius_range
        return inflate_mask(precise, int(rng.integers(lo, hi + 1)))
    if form == "blended":
        lo, hi = policy.blend_count_range
        donors = []
        for _ in range(int(rng.integers(lo, hi + 1))):
            if len(donor_pool):
                donors.append(donor_pool[int(rng.integers(len(donor_pool)))])
            else:
                roll = int(rng.integers(1, max(precise.shape[0], 2)))
                donors.append(MaskClip(np.roll(precise.data, roll, axis=0)))
        max_shift = int(policy.blend_shift_fraction * precise.shape[-1])
        return blend_mask(precise, donors, rng=rng, max_shift=max_shift)
    return edge_destruction_mask(precise, policy, rng)


def make_form(precise: MaskClip, form: str, policy: MaskPolicy | None = None,
              rng: np.random.Generator | None = None, radius: int | None = None) -> MaskClip:
    """Build a named form deterministically (used at inference time)."""
    if form not in FORMS:
        raise InvalidArgument(f"unknown mask form {form!r}; choose from {FORMS}")
    policy = policy or MaskPolicy()
    rng = rng if rng is not None else np.random.default_rng(policy.seed)
    if form == "inflated" and radius is not None:
        return inflate_mask(precise, radius)
    return sample_mask_form(precise, MaskPolicy.only(form, **{
        k: v for k, v in policy.to_dict().items() if k != "form_weights"}), rng)


def apply_mask(video, mask: MaskClip):
    """Zero the fill region: video * (1 - mask). Works for numpy or torch video."""
    m = mask.data if isinstance(mask, MaskClip) else np.asarray(mask)
    if video.shape[0] != m.shape[0] or tuple(video.shape[-2:]) != tuple(m.shape[-2:]):
        raise InvalidArgument(f"video {tuple(video.shape)} and mask {m.shape} are incompatible")
    if hasattr(video, "new_tensor"):
        import torch
        hole = torch.from_numpy(m.astype(bool)).to(video.device)
        return torch.where(hole, torch.zeros((), dtype=video.dtype), video)
    video = np.asarray(video)
    return np.where(m.astype(bool), np.zeros((), dtype=video.dtype), video)

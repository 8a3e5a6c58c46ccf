"""Static labelled image grids for inspecting clips and masks."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .masks import MaskClip
from .synthetic import to_uint8

LABEL_HEIGHT = 12


def mask_to_video(mask: MaskClip) -> np.ndarray:
    """Binary mask as a white-on-black clip in [-1, 1]."""
    return np.repeat(mask.data.astype(np.float32) * 2 - 1, 3, axis=1)


def overlay_mask(video: np.ndarray, mask: MaskClip, color=(1.0, -1.0, -1.0), weight=0.5) -> np.ndarray:
    tint = np.asarray(color, dtype=np.float32)[None, :, None, None]
    m = mask.data.astype(np.float32)
    return video * (1 - weight * m) + tint * weight * m


def frame_indices(frames: int, count: int = 4) -> list[int]:
    return sorted({int(round(i)) for i in np.linspace(0, frames - 1, min(count, frames))})


def labeled_grid(columns, frames: list[int] | None = None, scale: int = 2) -> Image.Image:
    """``columns`` is a list of (label, clip F x 3 x H x W); rows are frames."""
    F_, _, H, W = columns[0][1].shape
    frames = frames if frames is not None else frame_indices(F_)
    h, w = H * scale, W * scale
    canvas = Image.new("RGB", (w * len(columns), LABEL_HEIGHT + h * len(frames)), (255, 255, 255))
    draw = ImageDraw.Draw(canvas)
    for c, (label, clip) in enumerate(columns):
        draw.text((c * w + 2, 0), label, fill=(0, 0, 0))
        tiles = to_uint8(clip[frames])
        for r, tile in enumerate(tiles):
            img = Image.fromarray(tile).resize((w, h), Image.NEAREST)
            canvas.paste(img, (c * w, LABEL_HEIGHT + r * h))
    return canvas


def save_grid(columns, path, frames=None, scale: int = 2) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    labeled_grid(columns, frames, scale).save(path)
    return path

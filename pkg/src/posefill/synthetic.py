"""Procedural stick-figure videos with exact poses, silhouettes and references.

A figure is 13 joints joined by 12 capsule-shaped bones, composited over a
scrolling band-limited texture. Because everything is rendered analytically
the silhouette mask, keypoints and a ground-truth "replace this character
with that one" video are all available exactly.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import InvalidArgument, InvalidDataset
from .masks import MaskClip

K = 13
JOINT_NAMES = ("pelvis", "neck", "head", "l_shoulder", "l_elbow", "l_wrist",
               "r_shoulder", "r_elbow", "r_wrist", "l_knee", "l_ankle", "r_knee", "r_ankle")
# (parent, child, part); bones are listed in kinematic order.
BONES = ((0, 1, "torso"), (1, 2, "head"),
         (1, 3, "l_arm"), (3, 4, "l_arm"), (4, 5, "l_arm"),
         (1, 6, "r_arm"), (6, 7, "r_arm"), (7, 8, "r_arm"),
         (0, 9, "l_leg"), (9, 10, "l_leg"), (0, 11, "r_leg"), (11, 12, "r_leg"))
PARTS = ("head", "torso", "l_arm", "r_arm", "l_leg", "r_leg")
DRAW_ORDER = ("l_leg", "r_leg", "torso", "l_arm", "r_arm", "head")
# Bone lengths as a fraction of the frame size.
BASE_LENGTHS = np.array([0.17, 0.06, 0.06, 0.10, 0.09, 0.06, 0.10, 0.09, 0.13, 0.12, 0.13, 0.12])
MAX_LIMB_JITTER = 0.1
LIMB_RADIUS = (0.035, 0.05)
TORSO_RADIUS = (0.055, 0.075)
HEAD_RADIUS = (0.055, 0.07)
MARGIN = 2
# Rest directions (radians; 0 points down the image, pi/2 points to +x).
REST_ANGLES = np.array([np.pi, np.pi, -np.pi / 2, -0.25, -0.15, np.pi / 2, 0.25, 0.15,
                        -0.12, -0.05, 0.12, 0.05])
SWING = np.array([0.12, 0.15, 0.2, 0.9, 0.7, 0.2, 0.9, 0.7, 0.45, 0.4, 0.45, 0.4])
TPOSE_ANGLES = np.array([np.pi, np.pi, -np.pi / 2, -np.pi / 2, -np.pi / 2, np.pi / 2,
                         np.pi / 2, np.pi / 2, -0.15, -0.15, 0.15, 0.15])
POSE_PALETTE = np.array([
    [1.0, 0.0, 0.0], [1.0, 0.5, 0.0], [1.0, 1.0, 0.0], [0.5, 1.0, 0.0], [0.0, 1.0, 0.0],
    [0.0, 1.0, 0.5], [0.0, 1.0, 1.0], [0.0, 0.5, 1.0], [0.0, 0.0, 1.0], [0.5, 0.0, 1.0],
    [1.0, 0.0, 1.0], [1.0, 0.0, 0.5]])


@dataclass
class IdentitySpec:
    identity_id: str
    size: int
    lengths: list          # 12 bone lengths in pixels
    colors: dict           # part -> [r, g, b] on the 8-bit grid, in [0, 1]
    limb_radius: float
    torso_radius: float
    head_radius: float

    def radius(self, part: str) -> float:
        return {"torso": self.torso_radius, "head": self.head_radius}.get(part, self.limb_radius)


@dataclass
class MotionSpec:
    size: int
    angles: list           # F x 12 absolute bone directions
    root: list             # F x 2 pelvis position (x, y) in pixels
    scroll_velocity: float
    texture_seed: int

    @property
    def frames(self) -> int:
        return len(self.angles)


@dataclass
class PoseSequence:
    keypoints: np.ndarray  # F x K x 3, (x, y) normalized to [0, 1], visibility
    pose_map: np.ndarray   # F x 3 x H x W in [0, 1]


@dataclass
class ReferenceBundle:
    image: np.ndarray      # 3 x H x W in [-1, 1], zero outside ref_mask
    ref_mask: np.ndarray   # 1 x H x W uint8
    ref_pose_map: np.ndarray
    identity_id: str


@dataclass
class Clip:
    video: np.ndarray      # F x 3 x H x W float32 in [-1, 1]
    mask: MaskClip
    pose: PoseSequence
    identity: IdentitySpec
    motion: MotionSpec
    clip_id: str = ""


def _quantize(c):
    return (np.round(np.clip(c, 0, 1) * 255) / 255).tolist()


def make_identity(rng: np.random.Generator, size: int = 64, identity_id: str | None = None,
                  limb_jitter: float = MAX_LIMB_JITTER) -> IdentitySpec:
    if not 0 <= limb_jitter <= MAX_LIMB_JITTER:
        raise InvalidArgument(f"limb_jitter must lie in [0, {MAX_LIMB_JITTER}]")
    jitter = rng.uniform(-limb_jitter, limb_jitter, size=len(BONES))
    lengths = (BASE_LENGTHS * (1 + jitter) * size).tolist()
    colors = {p: _quantize(rng.uniform(0.05, 1.0, size=3)) for p in PARTS}
    ident = identity_id or f"id{int(rng.integers(1 << 31)):010d}"
    return IdentitySpec(ident, size, lengths, colors,
                        float(rng.uniform(*LIMB_RADIUS) * size),
                        float(rng.uniform(*TORSO_RADIUS) * size),
                        float(rng.uniform(*HEAD_RADIUS) * size))


def forward_kinematics(lengths, angles, root) -> np.ndarray:
    """Joint positions (F x K x 2, as x, y) from bone directions and the pelvis."""
    angles = np.atleast_2d(np.asarray(angles, dtype=np.float64))
    root = np.atleast_2d(np.asarray(root, dtype=np.float64))
    lengths = np.asarray(lengths, dtype=np.float64)
    pos = np.zeros((angles.shape[0], K, 2))
    pos[:, 0] = root
    for b, (p, c, _) in enumerate(BONES):
        d = np.stack([np.sin(angles[:, b]), np.cos(angles[:, b])], axis=-1)
        pos[:, c] = pos[:, p] + lengths[b] * d
    return pos


def _extent_ok(angles, root, size) -> bool:
    """Whether every identity the sampler can produce stays inside the frame.

    Joint coordinates are linear in the bone lengths, so their extremes over
    the length box sit at its vertices and are found per coordinate.
    """
    lo_len = BASE_LENGTHS * (1 - MAX_LIMB_JITTER) * size
    hi_len = BASE_LENGTHS * (1 + MAX_LIMB_JITTER) * size
    r = max(LIMB_RADIUS[1], TORSO_RADIUS[1], HEAD_RADIUS[1]) * size
    angles = np.atleast_2d(angles)
    root = np.atleast_2d(root)
    lo = np.repeat(root[:, None, :], K, axis=1).copy()
    hi = lo.copy()
    for b, (p, c, _) in enumerate(BONES):
        d = np.stack([np.sin(angles[:, b]), np.cos(angles[:, b])], axis=-1)
        a, bb = lo_len[b] * d, hi_len[b] * d
        lo[:, c] = lo[:, p] + np.minimum(a, bb)
        hi[:, c] = hi[:, p] + np.maximum(a, bb)
    return bool(lo.min() - r >= MARGIN and hi.max() + r <= size - 1 - MARGIN)


def make_motion(rng: np.random.Generator, frames: int = 16, size: int = 64,
                max_tries: int = 1000) -> MotionSpec:
    if frames < 2:
        raise InvalidArgument("a motion needs at least 2 frames")
    for _ in range(max_tries):
        tt = np.arange(frames, dtype=np.float64)
        freq = rng.uniform(0.03, 0.12, size=len(BONES))
        phase = rng.uniform(0, 2 * np.pi, size=len(BONES))
        amp = SWING * rng.uniform(0.3, 1.0, size=len(BONES))
        angles = REST_ANGLES + amp * np.sin(2 * np.pi * freq * tt[:, None] + phase)
        start = size * np.array([rng.uniform(0.4, 0.6), rng.uniform(0.42, 0.52)])
        drift = size * rng.uniform(-0.006, 0.006, size=2)
        bob = size * 0.01 * np.sin(2 * np.pi * rng.uniform(0.05, 0.15) * tt + rng.uniform(0, 6.3))
        root = start + drift * tt[:, None]
        root[:, 1] += bob
        if _extent_ok(angles, root, size):
            velocity = float(rng.uniform(-1.0, 1.0) * size / 64)
            return MotionSpec(size, angles.tolist(), root.tolist(), velocity,
                              int(rng.integers(1 << 31)))
    raise InvalidArgument("could not sample an in-bounds motion")


def background(motion: MotionSpec) -> np.ndarray:
    """Scrolling periodic texture, F x H x W x 3 uint8."""
    S, F = motion.size, motion.frames
    trng = np.random.default_rng(motion.texture_seed)
    base = trng.uniform(0.3, 0.7, size=3)
    n_waves = 6
    kx = trng.integers(-3, 4, size=(3, n_waves))
    ky = trng.integers(0, 4, size=(3, n_waves))
    kx[(kx == 0) & (ky == 0)] = 1
    amp = trng.uniform(0.03, 0.09, size=(3, n_waves))
    phi = trng.uniform(0, 2 * np.pi, size=(3, n_waves))
    yy, xx = np.mgrid[0:S, 0:S].astype(np.float64)
    out = np.empty((F, S, S, 3), dtype=np.uint8)
    for f in range(F):
        xs = xx - motion.scroll_velocity * f
        img = np.empty((S, S, 3))
        for ch in range(3):
            arg = 2 * np.pi * (kx[ch, :, None, None] * xs + ky[ch, :, None, None] * yy) / S
            img[..., ch] = base[ch] + (amp[ch, :, None, None] * np.cos(arg + phi[ch, :, None, None])).sum(0)
        out[f] = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
    return out


def _segment_distance(yy, xx, a, b):
    """Distance from pixel centers to segment a-b (points given as x, y)."""
    ax, ay = a
    bx, by = b
    dx, dy = bx - ax, by - ay
    L2 = dx * dx + dy * dy
    if L2 == 0:
        return np.hypot(xx - ax, yy - ay)
    u = np.clip(((xx - ax) * dx + (yy - ay) * dy) / L2, 0.0, 1.0)
    return np.hypot(xx - (ax + u * dx), yy - (ay + u * dy))


def _figure_layers(identity: IdentitySpec, joints: np.ndarray, S: int):
    """Yield (part, coverage) in draw order for one frame."""
    yy, xx = np.mgrid[0:S, 0:S].astype(np.float64)
    for part in DRAW_ORDER:
        cov = np.zeros((S, S), dtype=bool)
        r = identity.radius(part)
        for b, (p, c, bp) in enumerate(BONES):
            if bp != part:
                continue
            if part == "head":
                cov |= np.hypot(xx - joints[c, 0], yy - joints[c, 1]) <= r
            else:
                cov |= _segment_distance(yy, xx, joints[p], joints[c]) <= r
        yield part, cov


def render_figure(identity: IdentitySpec, joints: np.ndarray, canvas: np.ndarray):
    """Composite the figure onto an H x W x 3 uint8 canvas in place; return its silhouette."""
    S = canvas.shape[0]
    sil = np.zeros((S, S), dtype=bool)
    for part, cov in _figure_layers(identity, joints, S):
        canvas[cov] = np.round(np.asarray(identity.colors[part]) * 255).astype(np.uint8)
        sil |= cov
    return sil


def render_pose_map(keypoints: np.ndarray, size: int, thickness: float = 0.6) -> np.ndarray:
    """Color-coded skeleton drawing, F x 3 x H x W float32 in [0, 1]."""
    kp = np.asarray(keypoints, dtype=np.float64)
    if kp.ndim == 2:
        kp = kp[None]
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    out = np.zeros((kp.shape[0], 3, size, size), dtype=np.float32)
    for f in range(kp.shape[0]):
        for b, (p, c, _) in enumerate(BONES):
            if kp[f, p, 2] <= 0 or kp[f, c, 2] <= 0:
                continue
            line = _segment_distance(yy, xx, kp[f, p, :2] * size, kp[f, c, :2] * size) <= thickness
            out[f][:, line] = POSE_PALETTE[b][:, None]
    return out


def _to_unit(frames_u8: np.ndarray) -> np.ndarray:
    return (frames_u8.astype(np.float32) / 127.5 - 1.0).transpose(0, 3, 1, 2).copy()


def to_uint8(video: np.ndarray) -> np.ndarray:
    """[-1, 1] F x 3 x H x W -> F x H x W x 3 uint8."""
    v = np.clip((np.asarray(video, dtype=np.float64) + 1.0) * 127.5, 0, 255)
    return np.round(v).astype(np.uint8).transpose(0, 2, 3, 1)


def render_clip(identity: IdentitySpec | None, motion: MotionSpec, clip_id: str = "") -> Clip:
    """Render video, exact silhouette and keypoints. ``identity=None`` renders background only."""
    S, F = motion.size, motion.frames
    frames = background(motion)
    mask = np.zeros((F, 1, S, S), dtype=np.uint8)
    kps = np.zeros((F, K, 3))
    if identity is not None:
        if identity.size != S:
            raise InvalidArgument("identity and motion were sampled for different frame sizes")
        joints = forward_kinematics(identity.lengths, motion.angles, motion.root)
        for f in range(F):
            mask[f, 0] = render_figure(identity, joints[f], frames[f])
        kps[..., :2] = joints / S
        kps[..., 2] = 1.0
    pose = PoseSequence(kps, render_pose_map(kps, S))
    return Clip(_to_unit(frames), MaskClip(mask, "precise"), pose, identity, motion, clip_id)


def canonical_root(identity: IdentitySpec) -> np.ndarray:
    S = identity.size
    j = forward_kinematics(identity.lengths, TPOSE_ANGLES, [0.0, 0.0])[0]
    center = (j.min(0) + j.max(0)) / 2
    return np.array([S / 2, S / 2]) - center


def make_reference(identity: IdentitySpec) -> ReferenceBundle:
    """The identity in an upright T-pose on an empty (zero) background."""
    S = identity.size
    joints = forward_kinematics(identity.lengths, TPOSE_ANGLES, canonical_root(identity))[0]
    canvas = np.full((S, S, 3), 0, dtype=np.uint8)
    sil = render_figure(identity, joints, canvas)
    img = _to_unit(canvas[None])[0]
    img[:, ~sil] = 0.0
    kp = np.concatenate([joints / S, np.ones((K, 1))], axis=1)
    return ReferenceBundle(img, sil[None].astype(np.uint8), render_pose_map(kp, S)[0],
                           identity.identity_id)


def replacement_oracle(clip: Clip, identity_b: IdentitySpec) -> np.ndarray:
    """Ground truth for replacing the clip's character by ``identity_b``."""
    return render_clip(identity_b, clip.motion).video


# On-disk format -------------------------------------------------------------

def _dump_json(obj, path: Path):
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def save_frames(video: np.ndarray, directory: Path):
    directory.mkdir(parents=True, exist_ok=True)
    for f, img in enumerate(to_uint8(video)):
        Image.fromarray(img, "RGB").save(directory / f"frame_{f:05d}.png")


def save_mask(mask: MaskClip, directory: Path):
    directory.mkdir(parents=True, exist_ok=True)
    for f, m in enumerate(mask.data[:, 0]):
        Image.fromarray(m.astype(bool)).save(directory / f"frame_{f:05d}.png")


def load_frames(directory: Path) -> np.ndarray:
    files = sorted(Path(directory).glob("frame_*.png"))
    if not files:
        raise InvalidDataset(f"no frames in {directory}")
    return _to_unit(np.stack([np.asarray(Image.open(p).convert("RGB")) for p in files]))


def load_mask(directory: Path, form_tag: str = "precise") -> MaskClip:
    files = sorted(Path(directory).glob("frame_*.png"))
    if not files:
        raise InvalidDataset(f"no mask frames in {directory}")
    data = np.stack([np.asarray(Image.open(p).convert("1"), dtype=np.uint8) for p in files])
    return MaskClip(data[:, None], form_tag)


def save_clip(clip: Clip, directory: Path, extra_meta: dict | None = None):
    directory = Path(directory)
    save_frames(clip.video, directory / "frames")
    save_mask(clip.mask, directory / "mask")
    _dump_json(clip.pose.keypoints.tolist(), directory / "pose.json")
    meta = {"clip_id": clip.clip_id, "motion": asdict(clip.motion),
            "identity": asdict(clip.identity) if clip.identity else None}
    meta.update(extra_meta or {})
    _dump_json(meta, directory / "meta.json")


def load_clip(directory) -> Clip:
    directory = Path(directory)
    try:
        meta = json.loads((directory / "meta.json").read_text())
        kps = np.asarray(json.loads((directory / "pose.json").read_text()), dtype=np.float64)
    except FileNotFoundError as exc:
        raise InvalidDataset(f"{directory} is not a clip directory: {exc}") from exc
    video = load_frames(directory / "frames")
    mask = load_mask(directory / "mask")
    motion = MotionSpec(**meta["motion"])
    identity = IdentitySpec(**meta["identity"]) if meta.get("identity") else None
    pose = PoseSequence(kps, render_pose_map(kps, video.shape[-1]))
    return Clip(video, mask, pose, identity, motion, meta.get("clip_id", directory.name))


def save_reference(ref: ReferenceBundle, identity: IdentitySpec, directory: Path):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(ref.image[None])[0]).save(directory / "image.png")
    Image.fromarray(ref.ref_mask[0].astype(bool)).save(directory / "mask.png")
    _dump_json({"identity": asdict(identity)}, directory / "meta.json")


def load_reference(path) -> tuple[ReferenceBundle, IdentitySpec]:
    """Accept a reference directory or a clip directory (its identity is used)."""
    meta = json.loads((Path(path) / "meta.json").read_text())
    if not meta.get("identity"):
        raise InvalidDataset(f"{path} carries no identity")
    identity = IdentitySpec(**meta["identity"])
    return make_reference(identity), identity


def make_dataset(n_clips: int, seed: int, out_dir, size: int = 64, frames: int = 16,
                 grid: tuple[int, int] | None = None, limb_jitter: float = MAX_LIMB_JITTER,
                 empty: bool = False) -> dict:
    """Render ``n_clips`` clips to ``out_dir`` and write ``manifest.json``.

    With ``grid=(n_identities, n_motions)`` clip i pairs identity i % n_identities
    with motion i // n_identities, so swapping identities between clips of one
    motion yields another clip of the dataset.
    """
    if n_clips < 1:
        raise InvalidArgument("n_clips must be >= 1")
    n_id, n_mo = grid if grid else (n_clips, n_clips)
    if grid and n_id * n_mo < n_clips:
        raise InvalidArgument("grid too small for the requested clip count")
    root = Path(out_dir)
    try:
        root.mkdir(parents=True, exist_ok=True)
        if not os.access(root, os.W_OK):
            raise PermissionError(root)
    except OSError as exc:
        raise OSError(f"cannot write dataset to {root}: {exc}") from exc
    id_ss, mo_ss = np.random.SeedSequence(seed).spawn(2)
    identities = [make_identity(np.random.default_rng(s), size, f"id{i:03d}", limb_jitter)
                  for i, s in enumerate(id_ss.spawn(n_id))]
    motions = [make_motion(np.random.default_rng(s), frames, size) for s in mo_ss.spawn(n_mo)]
    entries = []
    for i in range(n_clips):
        ident = identities[i % n_id] if grid else identities[i]
        mot = motions[i // n_id] if grid else motions[i]
        cid = f"clip{i:04d}"
        clip = render_clip(None if empty else ident, mot, cid)
        if empty:
            clip.identity = None
        save_clip(clip, root / "clips" / cid)
        entries.append({"clip_id": cid, "path": f"clips/{cid}",
                        "identity_id": None if empty else ident.identity_id,
                        "motion_index": i // n_id if grid else i})
    used = sorted({e["identity_id"] for e in entries if e["identity_id"]})
    for ident in identities:
        if ident.identity_id in used:
            save_reference(make_reference(ident), ident, root / "references" / ident.identity_id)
    manifest = {"version": 1, "seed": seed, "size": size, "frames": frames,
                "grid": list(grid) if grid else None, "limb_jitter": limb_jitter,
                "empty": empty, "clips": entries, "identities": used}
    _dump_json(manifest, root / "manifest.json")
    return manifest


def load_manifest(root) -> dict:
    path = Path(root) / "manifest.json"
    if not path.exists():
        raise InvalidDataset(f"no manifest.json in {root}")
    return json.loads(path.read_text())


def load_dataset(root) -> list[Clip]:
    manifest = load_manifest(root)
    clips = [load_clip(Path(root) / e["path"]) for e in manifest["clips"]]
    if not clips:
        raise InvalidDataset(f"{root} lists no clips")
    return clips

"""``posefill`` command-line entry point.

Exit codes: 0 success, 2 usage, 3 state/migration, 4 io, 5 validation.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .config import load_config, phase_train_section
from .errors import CheckpointError, InvalidArgument, InvalidDataset, MigrationError, PosefillError
from .inference import insert_character, rectangle_region, replace_character
from .masks import FORMS, MaskPolicy, make_form
from .metrics import evaluate, format_table
from .model import ModelConfig
from .preview import mask_to_video, overlay_mask, save_grid
from .schedule import SamplerConfig, make_schedule
from .synthetic import (Clip, load_clip, load_dataset, load_frames, load_mask, load_reference,
                        make_dataset, replacement_oracle, save_frames, save_mask)
from .training import (TrainConfig, fit_autoencoder, init_phase2_from_phase1, new_state,
                       prepare_clips, run, write_loss_csv)

EXIT_OK, EXIT_USAGE, EXIT_STATE, EXIT_IO, EXIT_VALIDATION = 0, 2, 3, 4, 5

TRAIN_KEYS = ("alpha", "lr", "dropout_p", "steps", "batch_size", "seed", "normalize_mask_area",
              "lr_schedule", "warmup_steps")


class UsageError(Exception):
    pass


# generate-data -----------------------------------------------------------------

def cmd_generate_data(args) -> int:
    grid = None
    if args.grid:
        try:
            grid = tuple(int(v) for v in args.grid.lower().split("x"))
        except ValueError:
            raise UsageError(f"--grid expects NxM, got {args.grid!r}")
        if len(grid) != 2:
            raise UsageError(f"--grid expects NxM, got {args.grid!r}")
    make_dataset(args.n, args.seed, args.out, args.size, args.frames, grid=grid,
                 limb_jitter=args.limb_jitter, empty=args.empty)
    print(f"wrote {args.n} clips to {args.out}")
    return EXIT_OK


# train -------------------------------------------------------------------------

def train_config_from(cfg: dict, phase: int) -> TrainConfig:
    sec = phase_train_section(cfg, phase)
    policy = MaskPolicy.from_dict(cfg.get("mask_policy", {})) if cfg.get("mask_policy") else MaskPolicy()
    return TrainConfig(phase=phase, mask_policy=policy, **{k: sec[k] for k in TRAIN_KEYS if k in sec})


def model_config_from(cfg: dict) -> ModelConfig:
    try:
        return ModelConfig(**cfg["model"])
    except TypeError as exc:
        raise InvalidArgument(f"bad [model] section: {exc}") from exc


def get_autoencoder(cfg: dict, clips: list[Clip], out_dir: Path):
    a = cfg["autoencoder"]
    if a.get("path"):
        return ckpt.load_autoencoder(a["path"])
    ae = fit_autoencoder(clips, steps=a["steps"], seed=a["seed"], width=a["width"],
                         latent_channels=a["latent_channels"], lr=a["lr"],
                         batch_size=a["batch_size"], pretrain_clips=a["pretrain_clips"],
                         log_every=cfg["train"].get("log_every", 0))
    ckpt.save_autoencoder(ae, out_dir / "autoencoder.ckpt")
    return ae


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set)
    root = Path(cfg["train"]["out_dir"])
    out = root / f"phase{args.phase}"
    out.mkdir(parents=True, exist_ok=True)
    clips = load_dataset(cfg["data"]["dir"])
    if args.resume:
        state = ckpt.load_state(args.resume)
        if state.phase != args.phase:
            raise MigrationError(f"{args.resume} holds a phase-{state.phase} state, not phase {args.phase}")
        run_config = ckpt.load_checkpoint(args.resume)[1].get("run_config", cfg)
    elif args.phase == 1:
        ae = get_autoencoder(cfg, clips, root)
        sc = cfg["schedule"]
        state = new_state(ae, clips[0].video.shape[-1], train_config_from(cfg, 1),
                          model_config_from(cfg),
                          make_schedule(sc["T"], "linear", sc["beta_start"], sc["beta_end"]))
        run_config = cfg
    else:
        init = args.init or cfg["phase2"].get("init_from") or str(root / "phase1" / "last.ckpt")
        if not Path(init).exists():
            raise MigrationError(f"phase 2 migrates a phase-1 checkpoint, but {init} does not exist; "
                                 "run `posefill train --phase 1` first or pass --init")
        state1 = ckpt.load_state(init)
        if state1.phase != 1 or not state1.completed:
            raise MigrationError(f"{init} is not a completed phase-1 checkpoint")
        state = init_phase2_from_phase1(state1, train_config_from(cfg, 2),
                                       bool(cfg["model"]["use_inpaint_head"]))
        run_config = cfg
    data = prepare_clips(clips, state.model.ae)
    every = int(cfg["train"].get("checkpoint_every", 0))

    def save(s, final=False):
        meta = {"run_config": run_config}
        if not final:
            ckpt.save_state(s, out / f"step_{s.step:06d}.ckpt", meta)
        ckpt.save_state(s, out / "last.ckpt", meta)
        write_loss_csv(s.losses, out / "loss.csv")

    def callback(s):
        if every and s.step % every == 0 and s.step < s.config.steps:
            save(s)

    run(state, data, callback=callback, log_every=int(cfg["train"].get("log_every", 0)))
    save(state, final=True)
    print(f"phase {args.phase} finished at step {state.step}; checkpoint {out / 'last.ckpt'}")
    return EXIT_OK


# replace / insert ----------------------------------------------------------------

def _sampler(args) -> SamplerConfig:
    return SamplerConfig(steps=args.steps, guidance_scale=args.scale, seed=args.seed)


def _write_clip(video, mask, out: Path, meta: dict):
    save_frames(video, out / "frames")
    if mask is not None:
        save_mask(mask, out / "mask")
    (out / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")


def cmd_replace(args) -> int:
    state = ckpt.load_state(args.checkpoint)
    clip = load_clip(args.clip)
    reference, identity = load_reference(args.reference)
    video, mask = replace_character(state.model, state.sched, clip, reference, args.mask_form,
                                    state.config.mask_policy, _sampler(args), args.mask_seed,
                                    args.radius)
    out = Path(args.out)
    _write_clip(video, mask, out, {"source_clip": str(args.clip), "reference": identity.identity_id,
                                   "mask_form": args.mask_form, "steps": args.steps,
                                   "scale": args.scale, "seed": args.seed})
    cols = [("input", clip.video), ("mask", mask_to_video(mask)), ("output", video)]
    if clip.motion is not None:
        cols.append(("oracle", replacement_oracle(clip, identity)))
    save_grid(cols, out / "preview.png")
    print(f"wrote {out}")
    return EXIT_OK


def _load_pose(path) -> np.ndarray:
    p = Path(path)
    p = p / "pose.json" if p.is_dir() else p
    try:
        return np.asarray(json.loads(p.read_text()), dtype=np.float64)
    except OSError as exc:
        raise OSError(f"cannot read pose {path}: {exc}") from exc


def _parse_region(text: str, frames: int, size: int):
    if Path(text).is_dir():
        d = Path(text)
        return load_mask(d / "mask" if (d / "mask").is_dir() else d)
    try:
        box = [int(v) for v in text.split(",")]
    except ValueError:
        raise UsageError(f"--region expects x0,y0,x1,y1 or a mask directory, got {text!r}")
    if len(box) != 4:
        raise UsageError(f"--region expects x0,y0,x1,y1, got {text!r}")
    return rectangle_region(frames, size, box)


def cmd_insert(args) -> int:
    state = ckpt.load_state(args.checkpoint)
    bg = load_clip(args.background_clip)
    reference, identity = load_reference(args.reference)
    kps = _load_pose(args.pose)
    F_, _, _, S = bg.video.shape
    region = _parse_region(args.region, F_, S)
    video = insert_character(state.model, state.sched, bg.video, reference, kps, region, _sampler(args))
    out = Path(args.out)
    _write_clip(video, region, out, {"background_clip": str(args.background_clip),
                                     "reference": identity.identity_id, "steps": args.steps,
                                     "scale": args.scale, "seed": args.seed})
    save_grid([("input", bg.video), ("region", mask_to_video(region)), ("output", video)],
              out / "preview.png")
    print(f"wrote {out}")
    return EXIT_OK


# eval / mask-preview -------------------------------------------------------------

def _frames_dir(path) -> Path:
    p = Path(path)
    return p / "frames" if (p / "frames").is_dir() else p


def cmd_eval(args) -> int:
    gen = load_frames(_frames_dir(args.generated))
    truth = load_frames(_frames_dir(args.truth))
    mp = Path(args.mask)
    mask = load_mask(mp / "mask" if (mp / "mask").is_dir() else mp)
    report = evaluate(gen, truth, mask)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(report.to_json())
    print(format_table(report))
    return EXIT_OK


def cmd_mask_preview(args) -> int:
    clip = load_clip(args.clip)
    policy = MaskPolicy()
    if args.policy:
        policy = MaskPolicy.from_dict(load_config(args.policy)["mask_policy"])
    out = Path(args.out)
    for form in FORMS:
        mask = make_form(clip.mask, form, policy, np.random.default_rng(args.seed))
        save_grid([(form, overlay_mask(clip.video, mask)), ("mask", mask_to_video(mask))],
                  out / f"mask_{form}.png")
    print(f"wrote {len(FORMS)} previews to {out}")
    return EXIT_OK


# parser --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="posefill", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-data", help="render a synthetic clip dataset")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--frames", type=int, default=16)
    g.add_argument("--grid", help="NxM: N identities crossed with M motions")
    g.add_argument("--limb-jitter", type=float, default=0.1)
    g.add_argument("--empty", action="store_true", help="backgrounds only, no character")
    g.set_defaults(func=cmd_generate_data)

    t = sub.add_parser("train", help="run phase 1 or phase 2 training")
    t.add_argument("--config")
    t.add_argument("--phase", type=int, choices=(1, 2), required=True)
    t.add_argument("--resume", help="continue from a checkpoint of the same phase")
    t.add_argument("--init", help="phase-1 checkpoint to migrate (phase 2)")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config value, e.g. train.steps=100")
    t.set_defaults(func=cmd_train)

    def sampling(sp):
        sp.add_argument("--steps", type=int, default=50)
        sp.add_argument("--scale", type=float, default=1.0)
        sp.add_argument("--seed", type=int, default=0)

    r = sub.add_parser("replace", help="replace the character of a clip")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--clip", required=True)
    r.add_argument("--reference", required=True)
    r.add_argument("--mask-form", choices=FORMS, default="inflated")
    r.add_argument("--radius", type=int, help="dilation radius for the inflated form")
    r.add_argument("--mask-seed", type=int, default=0)
    r.add_argument("--out", required=True)
    sampling(r)
    r.set_defaults(func=cmd_replace)

    i = sub.add_parser("insert", help="insert a character into a background clip")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--background-clip", required=True)
    i.add_argument("--reference", required=True)
    i.add_argument("--pose", required=True, help="pose.json file or a clip directory")
    i.add_argument("--region", required=True, help="x0,y0,x1,y1 or a mask directory")
    i.add_argument("--out", required=True)
    sampling(i)
    i.set_defaults(func=cmd_insert)

    e = sub.add_parser("eval", help="PSNR/SSIM of generated frames against ground truth")
    e.add_argument("--generated", required=True)
    e.add_argument("--truth", required=True)
    e.add_argument("--mask", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("mask-preview", help="render every mask form for a clip")
    m.add_argument("--clip", required=True)
    m.add_argument("--policy", help="config file with a [mask_policy] section")
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_mask_preview)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (MigrationError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STATE
    except (OSError, InvalidDataset) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except PosefillError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())

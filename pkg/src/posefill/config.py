"""Run configuration: a TOML file with nested sections plus ``key=value`` overrides."""
from __future__ import annotations

import copy
from pathlib import Path

try:
    import tomllib as tomli
except ImportError:  # Python < 3.11
    import tomli

from .errors import InvalidArgument

DEFAULTS = {
    "data": {"dir": "data"},
    "autoencoder": {"path": "", "steps": 3000, "width": 32, "latent_channels": 4, "lr": 5e-4,
                    "batch_size": 16, "seed": 0, "pretrain_clips": 64},
    "model": {"cond_channels": 8, "token_dim": 64, "n_local_tokens": 16, "base_width": 64,
              "encoder_width": 32, "heads": 4, "time_dim": 128, "temporal": True,
              "use_ref_mask": True, "use_inpaint_head": True},
    "schedule": {"T": 1000, "beta_start": 1e-4, "beta_end": 2e-2},
    "train": {"out_dir": "runs/default", "alpha": 5.0, "lr": 3e-5, "dropout_p": 0.1,
              "steps": 2000, "batch_size": 1, "seed": 0, "normalize_mask_area": False,
              "lr_schedule": "constant", "warmup_steps": 0, "checkpoint_every": 500, "log_every": 100},
    "phase1": {},
    "phase2": {"init_from": ""},
    "mask_policy": {},
    "sampler": {"steps": 50, "guidance_scale": 1.0, "seed": 0},
}


def merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = v
    return out


def parse_override(item: str) -> tuple[list[str], object]:
    """``section.key=value``; the value is read as a TOML literal, else as a string."""
    if "=" not in item:
        raise InvalidArgument(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    path = [p for p in key.strip().split(".") if p]
    if not path:
        raise InvalidArgument(f"override {item!r} has an empty key")
    try:
        value = tomli.loads(f"v = {raw.strip()}")["v"]
    except tomli.TOMLDecodeError:
        value = raw.strip()
    return path, value


def apply_overrides(cfg: dict, items) -> dict:
    cfg = copy.deepcopy(cfg)
    for item in items or ():
        path, value = parse_override(item)
        node = cfg
        for p in path[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise InvalidArgument(f"override {item!r} descends into a non-section")
        node[path[-1]] = value
    return cfg


def load_config(path=None, overrides=()) -> dict:
    """Defaults <- file <- overrides. Relative paths stay relative to the cwd."""
    cfg = DEFAULTS
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise OSError(f"cannot read config {path}: {exc}") from exc
        try:
            cfg = merge(cfg, tomli.loads(text))
        except tomli.TOMLDecodeError as exc:
            raise InvalidArgument(f"config {path} is not valid TOML: {exc}") from exc
    return apply_overrides(cfg, overrides)


def phase_train_section(cfg: dict, phase: int) -> dict:
    """[train] with the [phase1] or [phase2] section layered on top."""
    return merge(cfg["train"], cfg.get(f"phase{phase}", {}))

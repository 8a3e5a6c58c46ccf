"""Single-file checkpoint container and TrainState (de)serialisation.

Layout::

    b"PFCKPT\\0\\0" | u32 format version | u64 header length | JSON header |
    tensor bytes ... | sha256 of everything before it (32 bytes)

The header lists each named tensor section (dtype, shape, offset, length)
and carries free-form JSON metadata.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .autoencoder import FrameAutoencoder
from .errors import CheckpointError
from .model import InpaintingModel, ModelConfig
from .schedule import DiffusionSchedule
from .training import TrainConfig, TrainState, make_optimizer

MAGIC = b"PFCKPT\0\0"
FORMAT_VERSION = 1
_DIGEST = 32

_DTYPES = {torch.float32: "float32", torch.float64: "float64", torch.int64: "int64",
           torch.int32: "int32", torch.uint8: "uint8", torch.bool: "bool"}
_NP = {"float32": np.float32, "float64": np.float64, "int64": np.int64, "int32": np.int32,
       "uint8": np.uint8, "bool": np.bool_}


def save_checkpoint(path, tensors: dict, meta: dict):
    entries, blobs, offset = [], [], 0
    for name in sorted(tensors):
        t = tensors[name].detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {t.dtype} for {name}")
        raw = t.numpy().tobytes()
        entries.append({"name": name, "dtype": _DTYPES[t.dtype], "shape": list(t.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"tensors": entries, "meta": meta}, sort_keys=True).encode()
    body = MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(header)) + header + b"".join(blobs)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(body + hashlib.sha256(body).digest())
    tmp.replace(path)


def load_checkpoint(path) -> tuple[dict, dict]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    fixed = len(MAGIC) + 12
    if len(data) < fixed + _DIGEST or data[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    version, hlen = struct.unpack("<IQ", data[len(MAGIC):fixed])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version}, this build reads {FORMAT_VERSION}")
    body, digest = data[:-_DIGEST], data[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"checksum mismatch in {path}: file is corrupted")
    header = json.loads(body[fixed:fixed + hlen])
    start = fixed + hlen
    tensors = {}
    for e in header["tensors"]:
        raw = body[start + e["offset"]:start + e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=_NP[e["dtype"]]).reshape(e["shape"]).copy()
        tensors[e["name"]] = torch.from_numpy(arr)
    return tensors, header["meta"]


# Namespaced state dicts ------------------------------------------------------

def _prefixed(prefix: str, sd: dict) -> dict:
    return {f"{prefix}/{k}": v for k, v in sd.items()}


def _strip(prefix: str, tensors: dict) -> dict:
    p = prefix + "/"
    return {k[len(p):]: v for k, v in tensors.items() if k.startswith(p)}


def autoencoder_meta(ae: FrameAutoencoder) -> dict:
    return {"latent_channels": ae.latent_channels, "width": ae.width, "identity": ae.identity,
            "train_steps": ae.train_steps, "seed": ae.seed, "checksum": ae.checksum()}


def save_autoencoder(ae: FrameAutoencoder, path, extra_meta: dict | None = None):
    save_checkpoint(path, _prefixed("autoencoder", ae.state_dict()),
                    {"kind": "autoencoder", "autoencoder": autoencoder_meta(ae), **(extra_meta or {})})


def restore_autoencoder(tensors: dict, meta: dict) -> FrameAutoencoder:
    m = meta["autoencoder"]
    ae = FrameAutoencoder(m["latent_channels"], m["width"], m["identity"])
    ae.load_state_dict(_strip("autoencoder", tensors))
    ae.train_steps, ae.seed = m["train_steps"], m["seed"]
    ae.eval()
    for p in ae.parameters():
        p.requires_grad_(False)
    if ae.checksum() != m["checksum"]:
        raise CheckpointError("autoencoder weights do not match the recorded checksum")
    return ae


def load_autoencoder(path) -> FrameAutoencoder:
    return restore_autoencoder(*load_checkpoint(path))


def _optimizer_tensors(opt: torch.optim.Optimizer) -> tuple[dict, dict]:
    sd = opt.state_dict()
    tensors, keys = {}, {}
    for idx, st in sd["state"].items():
        keys[str(idx)] = sorted(st)
        for k, v in st.items():
            tensors[f"optim/{idx}/{k}"] = v if torch.is_tensor(v) else torch.tensor(v)
    return tensors, {"param_groups": sd["param_groups"], "state_keys": keys}


def _optimizer_state(tensors: dict, meta: dict) -> dict:
    state = {int(i): {k: tensors[f"optim/{i}/{k}"] for k in ks} for i, ks in meta["state_keys"].items()}
    # JSON turns Adam's betas tuple into a list
    groups = [{k: tuple(v) if k == "betas" else v for k, v in g.items()} for g in meta["param_groups"]]
    return {"state": state, "param_groups": groups}


def save_state(state: TrainState, path, extra_meta: dict | None = None):
    model = state.model
    tensors = _prefixed("model", model.state_dict())
    tensors.update(_prefixed("autoencoder", model.ae.state_dict()))
    opt_t, opt_meta = _optimizer_tensors(state.optimizer)
    tensors.update(opt_t)
    meta = {
        "kind": "train_state",
        "phase": model.phase,
        "step": state.step,
        "completed": state.completed,
        "image_size": model.image_size,
        "model_config": model.cfg.to_dict(),
        "train_config": state.config.to_dict(),
        "schedule": state.sched.to_dict(),
        "autoencoder": autoencoder_meta(model.ae),
        "rng_state": state.rng.bit_generator.state,
        "optimizer": opt_meta,
        "losses": [list(r) for r in state.losses],
    }
    meta.update(extra_meta or {})
    save_checkpoint(path, tensors, meta)


def state_from_checkpoint(tensors: dict, meta: dict) -> TrainState:
    if meta.get("kind") != "train_state":
        raise CheckpointError("checkpoint does not hold a training state")
    ae = restore_autoencoder(tensors, meta)
    model = InpaintingModel(ae, meta["image_size"], ModelConfig(**meta["model_config"]))
    if meta["phase"] == 2:
        model.enable_inpainting()
    try:
        model.load_state_dict(_strip("model", tensors))
    except RuntimeError as exc:
        raise CheckpointError(f"model weights do not fit the recorded configuration: {exc}") from exc
    cfg = TrainConfig.from_dict(meta["train_config"])
    opt = make_optimizer(model, cfg.lr)
    opt.load_state_dict(_optimizer_state(tensors, meta["optimizer"]))
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng_state"]
    return TrainState(model, opt, cfg, DiffusionSchedule.from_dict(meta["schedule"]), rng,
                      meta["step"], [tuple(r) for r in meta["losses"]], meta["completed"])


def load_state(path) -> TrainState:
    return state_from_checkpoint(*load_checkpoint(path))


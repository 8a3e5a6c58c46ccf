import numpy as np
import pytest
import torch

from posefill.autoencoder import FrameAutoencoder
from posefill.checkpoint import (FORMAT_VERSION, MAGIC, load_autoencoder, load_checkpoint, load_state,
                                 save_autoencoder, save_checkpoint, save_state)
from posefill.config import DEFAULTS, apply_overrides, load_config, parse_override
from posefill.errors import CheckpointError, InvalidArgument
from posefill.model import ModelConfig
from posefill.synthetic import make_identity, make_motion, render_clip
from posefill.training import TrainConfig, init_phase2_from_phase1, train_phase1

TINY = ModelConfig(cond_channels=4, token_dim=16, n_local_tokens=4, base_width=8, encoder_width=8,
                   heads=2, time_dim=16)


def test_container_roundtrip_bitwise(tmp_path):
    g = torch.Generator().manual_seed(0)
    tensors = {"a": torch.randn(3, 4, generator=g), "b/c": torch.arange(5), "d": torch.tensor(True),
               "e": torch.randn(2, generator=g, dtype=torch.float64)}
    save_checkpoint(tmp_path / "x.ckpt", tensors, {"k": [1, 2.5, "s"]})
    back, meta = load_checkpoint(tmp_path / "x.ckpt")
    assert meta == {"k": [1, 2.5, "s"]} and back.keys() == tensors.keys()
    for k in tensors:
        assert back[k].dtype == tensors[k].dtype and torch.equal(back[k], tensors[k])
    assert not (tmp_path / "x.ckpt.tmp").exists()


def test_container_rejects_bad_files(tmp_path):
    save_checkpoint(tmp_path / "x.ckpt", {"a": torch.ones(4)}, {})
    raw = bytearray((tmp_path / "x.ckpt").read_bytes())
    flipped = bytearray(raw)
    flipped[-40] ^= 0xFF
    (tmp_path / "bad.ckpt").write_bytes(bytes(flipped))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(tmp_path / "bad.ckpt")
    newer = bytearray(raw)
    newer[len(MAGIC):len(MAGIC) + 4] = (FORMAT_VERSION + 1).to_bytes(4, "little")
    (tmp_path / "v.ckpt").write_bytes(bytes(newer))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "v.ckpt")
    (tmp_path / "junk.ckpt").write_bytes(b"hello")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "junk.ckpt")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.ckpt")


def test_autoencoder_roundtrip(tmp_path):
    torch.manual_seed(0)
    ae = FrameAutoencoder(4, 8)
    ae.latent_scale.fill_(0.7)
    save_autoencoder(ae, tmp_path / "ae.ckpt")
    back = load_autoencoder(tmp_path / "ae.ckpt")
    assert back.checksum() == ae.checksum()
    x = torch.randn(2, 3, 16, 16)
    assert torch.equal(back.decode(back.encode(x)), ae.decode(ae.encode(x)))


@pytest.fixture(scope="module")
def state2():
    torch.manual_seed(0)
    ae = FrameAutoencoder(4, 8)
    for p in ae.parameters():
        p.requires_grad_(False)
    rng = np.random.default_rng(0)
    clips = [render_clip(make_identity(rng, 32), make_motion(rng, 4, 32)) for _ in range(2)]
    s1 = train_phase1(clips, ae, TrainConfig(steps=2, lr=1e-3), TINY)
    from posefill.training import prepare_clips, run
    s2 = init_phase2_from_phase1(s1, TrainConfig(phase=2, steps=5, lr=1e-3, seed=3))
    return run(s2, prepare_clips(clips, ae), steps=2)


def test_train_state_roundtrip_bitwise(state2, tmp_path):
    save_state(state2, tmp_path / "s.ckpt", {"run_config": {"train": {"steps": 5}}})
    back = load_state(tmp_path / "s.ckpt")
    assert back.phase == 2 and back.step == 2 and back.losses == state2.losses
    assert back.config == state2.config and not back.completed
    assert back.rng.bit_generator.state == state2.rng.bit_generator.state
    for (k, a), b in zip(state2.model.state_dict().items(), back.model.state_dict().values()):
        assert torch.equal(a, b), k
    so, bo = state2.optimizer.state_dict(), back.optimizer.state_dict()
    assert so["param_groups"] == bo["param_groups"]
    for i in so["state"]:
        for k in so["state"][i]:
            assert torch.equal(torch.as_tensor(so["state"][i][k]), torch.as_tensor(bo["state"][i][k]))
    # saving the restored state again gives the same bytes
    save_state(back, tmp_path / "t.ckpt", {"run_config": {"train": {"steps": 5}}})
    assert (tmp_path / "s.ckpt").read_bytes() == (tmp_path / "t.ckpt").read_bytes()
    assert load_checkpoint(tmp_path / "s.ckpt")[1]["run_config"] == {"train": {"steps": 5}}


def test_state_loader_rejects_autoencoder_file(tmp_path):
    save_autoencoder(FrameAutoencoder(4, 8), tmp_path / "ae.ckpt")
    with pytest.raises(CheckpointError):
        load_state(tmp_path / "ae.ckpt")


# run configuration

def test_config_layers(tmp_path):
    p = tmp_path / "run.toml"
    p.write_text('[train]\nsteps = 10\nout_dir = "x"\n[model]\nbase_width = 16\n')
    cfg = load_config(p, ["train.steps=20", "train.lr=1e-3", "data.dir=some/where", "phase2.alpha=0.0"])
    assert cfg["train"]["steps"] == 20 and cfg["train"]["lr"] == 1e-3 and cfg["train"]["out_dir"] == "x"
    assert cfg["model"]["base_width"] == 16 and cfg["model"]["heads"] == DEFAULTS["model"]["heads"]
    assert cfg["data"]["dir"] == "some/where" and cfg["phase2"]["alpha"] == 0.0
    assert DEFAULTS["train"]["steps"] == 2000   # defaults are not mutated


def test_override_parsing():
    assert parse_override("a.b=true") == (["a", "b"], True)
    assert parse_override("a=[1, 2]") == (["a"], [1, 2])
    assert parse_override("a=hello world") == (["a"], "hello world")
    with pytest.raises(InvalidArgument):
        parse_override("novalue")
    with pytest.raises(InvalidArgument):
        apply_overrides({"a": 1}, ["a.b=2"])


def test_bad_config_file(tmp_path):
    p = tmp_path / "bad.toml"
    p.write_text("[train\n")
    with pytest.raises(InvalidArgument):
        load_config(p)
    with pytest.raises(OSError):
        load_config(tmp_path / "nope.toml")

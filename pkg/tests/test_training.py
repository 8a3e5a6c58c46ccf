import copy

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from oracles import maxpool_bruteforce
from posefill.autoencoder import FrameAutoencoder
from posefill.checkpoint import load_state, save_state
from posefill.denoiser import count_parameters
from posefill.errors import InvalidArgument, InvalidDataset, InvalidShape, MigrationError
from posefill.masks import MaskClip
from posefill.model import ModelConfig
from posefill.synthetic import make_identity, make_motion, render_clip
from posefill.training import (TrainConfig, build_batch, compute_loss, downsample_mask_to_latent,
                               init_phase2_from_phase1, loss_terms, mask_focused_loss, new_state,
                               prepare_clips, run, train_phase1, write_loss_csv)

TINY = ModelConfig(cond_channels=4, token_dim=16, n_local_tokens=4, base_width=8, encoder_width=8,
                   heads=2, time_dim=16)


# loss algebra

def _pair(seed, shape=(2, 3, 4, 4, 4)):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(shape, generator=g, dtype=torch.float64), torch.randn(shape, generator=g, dtype=torch.float64)


def test_loss_reductions():
    v, vh = _pair(0)
    base = ((v - vh) ** 2).mean()
    assert mask_focused_loss(v, vh, torch.zeros(2, 3, 1, 4, 4), 5.0) == base
    assert torch.allclose(mask_focused_loss(v, vh, torch.ones(2, 3, 1, 4, 4), 5.0), 6 * base, rtol=1e-14)
    assert mask_focused_loss(v, vh, torch.ones(1), 0.0) == base


def test_worked_value_fourteen():
    v = torch.full((2, 4), 2.0)
    mask = torch.tensor([[1.0, 1, 0, 0], [0, 1, 1, 0]])
    assert mask_focused_loss(v, torch.zeros_like(v), mask, 5.0).item() == 14.0


@given(st.integers(0, 1000), st.floats(0, 50), st.floats(0.01, 50))
def test_loss_strictly_increasing_in_alpha(seed, a, da):
    v, vh = _pair(seed)
    m = torch.zeros(2, 3, 1, 4, 4)
    m[0, 0, 0, 0, 0] = 1
    assert mask_focused_loss(v, vh, m, a + da) > mask_focused_loss(v, vh, m, a)


def test_loss_errors_and_area_normalisation():
    v, vh = _pair(1)
    with pytest.raises(InvalidArgument):
        mask_focused_loss(v, vh, 0, -1.0)
    with pytest.raises(InvalidShape):
        mask_focused_loss(v, vh[:1], 0, 1.0)
    m = torch.zeros(2, 3, 1, 4, 4)
    m[0] = 1
    _, plain = loss_terms(v, vh, m)
    _, norm = loss_terms(v, vh, m, normalize_mask_area=True)
    assert torch.allclose(norm, plain * 2, rtol=1e-14)


def test_downsample_examples():
    assert not downsample_mask_to_latent(np.zeros((2, 1, 8, 8))).any()
    m = np.zeros((1, 1, 16, 16), np.uint8)
    m[0, 0, 9, 2] = 1
    out = downsample_mask_to_latent(MaskClip(m))
    assert out.shape == (1, 1, 4, 4) and out.sum() == 1 and out[0, 0, 2, 0] == 1
    with pytest.raises(InvalidShape):
        downsample_mask_to_latent(np.zeros((1, 1, 6, 8)))


@given(st.integers(0, 10_000), st.floats(0, 0.3))
def test_downsample_matches_bruteforce(seed, density):
    m = (np.random.default_rng(seed).random((3, 1, 16, 12)) < density).astype(np.uint8)
    got = downsample_mask_to_latent(m).numpy()
    assert np.array_equal(got, maxpool_bruteforce(m, 4))


def test_config_validation_and_roundtrip():
    for bad in (dict(phase=3), dict(alpha=-0.1), dict(dropout_p=1.5), dict(lr=0)):
        with pytest.raises(InvalidArgument):
            TrainConfig(**bad)
    c = TrainConfig(phase=2, alpha=2.0, seed=9)
    assert TrainConfig.from_dict(c.to_dict()) == c


def test_lr_schedule():
    for bad in (dict(lr_schedule="step"), dict(warmup_steps=-1)):
        with pytest.raises(InvalidArgument):
            TrainConfig(**bad)
    assert all(TrainConfig(lr=0.1).lr_at(s) == 0.1 for s in (0, 7, 10**6))
    c = TrainConfig(lr=0.1, steps=110, lr_schedule="cosine", warmup_steps=10)
    assert [c.lr_at(s) for s in (0, 4, 9)] == pytest.approx([0.01, 0.05, 0.1])
    assert c.lr_at(10) == pytest.approx(0.1)
    assert c.lr_at(60) == pytest.approx(0.05)
    assert c.lr_at(110) == pytest.approx(0.0, abs=1e-15)
    lrs = [c.lr_at(s) for s in range(10, 111)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    assert TrainConfig.from_dict(c.to_dict()) == c


# training runs on a tiny model

@pytest.fixture(scope="module")
def toy():
    torch.manual_seed(0)
    ae = FrameAutoencoder(latent_channels=4, width=8)
    for p in ae.parameters():
        p.requires_grad_(False)
    rng = np.random.default_rng(0)
    clips = [render_clip(make_identity(rng, 32, f"id{i}"), make_motion(rng, 4, 32), f"c{i}") for i in range(3)]
    return ae, clips


def p1(toy, steps=4, seed=0, **kw):
    ae, clips = toy
    return train_phase1(clips, ae, TrainConfig(steps=steps, seed=seed, lr=1e-3, **kw), TINY)


def test_empty_dataset_rejected(toy):
    with pytest.raises(InvalidDataset):
        train_phase1([], toy[0], TrainConfig(steps=1))
    bare = render_clip(None, toy[1][0].motion)
    with pytest.raises(InvalidDataset):
        prepare_clips([bare], toy[0])


def test_same_seed_same_losses_and_csv(toy, tmp_path):
    a, b, c = p1(toy, seed=3), p1(toy, seed=3), p1(toy, seed=4)
    assert a.losses == b.losses and a.losses != c.losses
    write_loss_csv(a.losses, tmp_path / "a.csv")
    write_loss_csv(b.losses, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert (tmp_path / "a.csv").read_text().splitlines()[0] == "step,loss_total,loss_base,loss_masked"


def test_phase1_has_no_mask_loss_weight(toy):
    s = p1(toy, steps=2)
    assert s.phase == 1 and all(total == base for _, total, base, _ in s.losses)


def test_phase1_loss_trends_down(toy):
    s = p1(toy, steps=200)
    totals = [r[1] for r in s.losses]
    assert np.mean(totals[100:]) < np.mean(totals[:100])


def _phase1_inputs(model, data, F=4):
    g = torch.Generator().manual_seed(7)
    d = data[0]
    x_t = torch.randn(1, F, 4, 8, 8, generator=g)
    cond = model.encode_conditions(d.pose_map[None], d.ref_image[None], d.ref_mask[None], d.ref_pose[None])
    return x_t, cond


def test_migration_reproduces_phase1_bitwise(toy):
    s1 = p1(toy)
    before = {k: v.clone() for k, v in s1.model.state_dict().items()}
    s2 = init_phase2_from_phase1(s1)
    assert s2.phase == 2 and s2.step == 0 and s2.config.phase == 2
    data = prepare_clips(toy[1], toy[0])
    s1.model.eval()
    s2.model.eval()
    x_t, cond = _phase1_inputs(s1.model, data)
    ref = s1.model(x_t, 500, cond)
    zero_cond = copy.copy(cond)
    zero_cond.mask_feat = torch.zeros(1, 4, TINY.cond_channels, 8, 8)
    zero_cond.inpaint_feat = torch.zeros(1, 4, 4, 8, 8)
    assert torch.equal(s2.model(x_t, 500, zero_cond), ref)
    # the new input conv starts at zero, so even real features change nothing yet
    d = data[0]
    mask = torch.from_numpy(d.precise.data.astype(np.float32))[None]
    full = s2.model.encode_conditions(d.pose_map[None], d.ref_image[None], d.ref_mask[None], d.ref_pose[None],
                                      d.video[None] * (1 - mask), mask)
    assert torch.equal(s2.model(x_t, 500, full), ref)
    # phase-1 weights are copied untouched and the source is not modified
    after2 = s2.model.state_dict()
    for k, v in before.items():
        assert torch.equal(after2[k], v) and torch.equal(s1.model.state_dict()[k], v)
    assert s1.model.ae.checksum() == s2.model.ae.checksum()


def test_migration_parameter_delta(toy):
    s1 = p1(toy, steps=1)
    s2 = init_phase2_from_phase1(s1)
    cz, cc, w = 4, TINY.cond_channels, TINY.base_width
    delta = count_parameters(s2.model) - count_parameters(s1.model)
    expected = (cc + cz) * w * 9 + count_parameters(s2.model.mask_encoder) + count_parameters(s2.model.inpaint_encoder)
    assert delta == expected
    head = s2.model.inpaint_encoder.head
    assert count_parameters(s2.model.inpaint_encoder) == count_parameters(head)
    assert not head.out.weight.any() and not s2.model.denoiser.inpaint_in.weight.any()


def test_migration_errors(toy):
    s1 = p1(toy, steps=1)
    with pytest.raises(MigrationError):
        init_phase2_from_phase1(init_phase2_from_phase1(s1))
    unfinished = p1(toy, steps=3)
    unfinished.completed = False
    with pytest.raises(MigrationError):
        init_phase2_from_phase1(unfinished)
    bad = p1(toy, steps=1)
    bad.model.denoiser.conv_in = torch.nn.Conv2d(5, TINY.base_width, 3, padding=1)
    with pytest.raises(MigrationError):
        init_phase2_from_phase1(bad)
    with pytest.raises(MigrationError):
        init_phase2_from_phase1(s1, TrainConfig(phase=1))


def test_phase2_alpha_zero_is_plain_objective(toy):
    s2 = init_phase2_from_phase1(p1(toy, steps=1), TrainConfig(phase=2, alpha=0.0, seed=1, lr=1e-3))
    data = prepare_clips(toy[1], toy[0])
    batch = build_batch(s2, data)
    total, base, masked = compute_loss(s2, batch)
    assert batch["mask"].any() and masked > 0
    assert total == base


def test_phase2_batch_masks_cover_character(toy):
    s2 = init_phase2_from_phase1(p1(toy, steps=1), TrainConfig(phase=2, seed=2, batch_size=3))
    data = prepare_clips(toy[1], toy[0])
    for _ in range(5):
        b = build_batch(s2, data)
        hole = b["mask"].bool().expand_as(b["video"])
        assert not b["masked_video"][hole].any()
        assert torch.equal(b["masked_video"][~hole], b["video"][~hole])


@pytest.mark.parametrize("phase", [1, 2])
def test_resume_matches_uninterrupted(toy, tmp_path, phase):
    ae, clips = toy
    data = prepare_clips(clips, ae)

    def start():
        s = p1(toy, steps=2)
        return s if phase == 1 else init_phase2_from_phase1(s, TrainConfig(phase=2, steps=6, seed=5, lr=1e-3))

    full = start()
    full.config.steps = full.step + 6
    run(full, data)
    part = start()
    part.config.steps = part.step + 6
    run(part, data, steps=3)
    save_state(part, tmp_path / "mid.ckpt")
    resumed = load_state(tmp_path / "mid.ckpt")
    assert resumed.step == part.step and resumed.phase == phase and not resumed.completed
    run(resumed, data)
    assert resumed.losses == full.losses and resumed.completed
    for (k, a), b in zip(full.model.state_dict().items(), resumed.model.state_dict().values()):
        assert torch.equal(a, b), k

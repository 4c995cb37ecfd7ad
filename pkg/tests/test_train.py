import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sotglp import numcore as nc
from sotglp.config import RunConfig
from sotglp.errors import ConfigError, DivergenceError, NonFiniteError
from sotglp.experiment import episode_from_config
from sotglp.model import build_encoders, featurize, forward, init_model
from sotglp.train import (
    OptimState,
    ScheduleConfig,
    load_checkpoint,
    lr_at,
    save_checkpoint,
    sgd_step,
    train_episode,
)

SMALL = dict(num_classes=3, shots=4, test_shots=2, num_patches=9, input_dim=4, n_parts=2, embed_dim=8, top_k=4, batch_size=6)


@pytest.fixture(scope="module")
def small():
    cfg = RunConfig(**SMALL, epochs=3, warmup_epochs=1)
    ep = episode_from_config(cfg)
    enc = build_encoders(cfg, ep)
    return cfg, ep, enc


# ---- schedule ---------------------------------------------------------------


def test_lr_examples():
    s = ScheduleConfig(0.05, 5, 50, 1)
    assert lr_at(s, 0) == 0.0
    assert lr_at(s, 5) == pytest.approx(0.05)
    assert lr_at(s, 50) == 0.0
    assert lr_at(s, 500) == 0.0
    s2 = ScheduleConfig(0.05, 5, 50, 2)
    assert lr_at(s2, 55) == pytest.approx(0.025)


def test_lr_continuous_at_boundary():
    s = ScheduleConfig(0.05, 5, 50, 4)
    w = s.warmup_steps
    left = 0.05 * (w - 1e-9) / w  # the warmup line evaluated just before the boundary
    assert left == pytest.approx(lr_at(s, w), abs=1e-10)
    assert abs(lr_at(s, w + 1) - lr_at(s, w)) < 1e-3


@given(st.integers(0, 400))
def test_lr_bounded(step):
    s = ScheduleConfig(0.05, 5, 50, 7)
    assert 0.0 <= lr_at(s, step) <= 0.05


def test_schedule_validation():
    with pytest.raises(ConfigError):
        ScheduleConfig(0.05, 5, 5, 1)
    with pytest.raises(ConfigError):
        ScheduleConfig(0.05, 0, 5, 0)


# ---- SGD --------------------------------------------------------------------


def test_sgd_plain_descent():
    p = [np.array([1.0, -2.0])]
    st_ = OptimState.zeros_like(p, momentum=0.0, weight_decay=0.0)
    st_.lr = 0.5
    sgd_step(st_, p, [np.array([2.0, 2.0])])
    assert np.allclose(p[0], [0.0, -3.0])


def test_sgd_velocity_decays_without_gradient():
    p = [np.zeros(2)]
    st_ = OptimState([np.array([1.0, 2.0])], 0.0, 0.9, 0.0)
    for _ in range(3):
        sgd_step(st_, p, [np.zeros(2)])
    assert np.allclose(st_.velocity[0], [0.729, 1.458])


def test_sgd_two_step_hand_unroll():
    theta = [np.array([1.0])]
    st_ = OptimState.zeros_like(theta, momentum=0.9, weight_decay=0.0)
    st_.lr = 0.1
    for _ in range(2):
        sgd_step(st_, theta, [theta[0].copy()])  # f = theta^2 / 2
    # v1 = 1, theta1 = 0.9; v2 = 0.9 + 0.9 = 1.8, theta2 = 0.9 - 0.18
    assert theta[0][0] == pytest.approx(0.72, abs=1e-15)


def test_sgd_weight_decay_is_coupled():
    p = [np.array([2.0])]
    st_ = OptimState.zeros_like(p, momentum=0.0, weight_decay=0.01)
    st_.lr = 1.0
    sgd_step(st_, p, [np.array([0.0])])
    assert p[0][0] == pytest.approx(2.0 - 0.02)


def test_sgd_rejects_nonfinite():
    p = [np.ones(2)]
    st_ = OptimState.zeros_like(p)
    with pytest.raises(NonFiniteError):
        sgd_step(st_, p, [np.array([np.nan, 0.0])])
    assert np.array_equal(p[0], np.ones(2))


# ---- training loop ------------------------------------------------------------


def test_zero_epochs_leave_bank_unchanged(small):
    cfg, ep, enc = small
    model = init_model(cfg.replace(epochs=0, warmup_epochs=0), enc, 0)
    res = train_episode(ep, model, 0)
    assert np.array_equal(res.model.bank.global_prompts, model.bank.global_prompts)
    assert np.array_equal(res.model.bank.local_prompts, model.bank.local_prompts)
    assert np.array_equal(res.model.proj.weight, model.proj.weight)
    assert res.curve == []


def test_lambda_zero_local_gradient_audit(small):
    cfg, ep, enc = small
    model = init_model(cfg.replace(lam=0.0), enc, 0)
    tape = nc.Tape()
    out = forward(model, featurize(enc, ep.train_x), ep.train_y, tape=tape, active=np.array([0, 2]))
    grads = nc.backward(out.loss, tape)
    g_glob, g_loc, g_proj = (grads[leaf.node_id] for leaf in out.leaves)
    assert np.all(g_loc == 0.0) and np.all(g_proj == 0.0)
    assert np.all(g_glob[[1, 3]] == 0.0)
    assert np.abs(g_glob[0]).max() > 0 and np.abs(g_glob[2]).max() > 0


def test_training_reduces_loss_and_keeps_encoders(small):
    cfg, ep, enc = small
    before = enc.checksum()
    res = train_episode(ep, init_model(cfg, enc, 0), 0)
    assert enc.checksum() == before
    assert res.model.encoders.checksum() == before
    first = np.mean([r["L_total"] for r in res.curve if r["epoch"] == 1])
    last = np.mean([r["L_total"] for r in res.curve if r["epoch"] == cfg.epochs])
    assert last < first
    assert {r["epoch"] for r in res.curve} == {1, 2, 3}


def test_training_bitwise_reproducible(small, tmp_path):
    cfg, ep, enc = small
    for run in ("a", "b"):
        train_episode(ep, init_model(cfg, enc, 1), 1, checkpoint_dir=tmp_path / run)
    for epoch in (1, 3):
        name = f"checkpoint_epoch_{epoch:03d}.json"
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_different_seeds_differ(small):
    cfg, ep, enc = small
    a = train_episode(ep, init_model(cfg, enc, 0), 0).model.bank.local_prompts
    b = train_episode(ep, init_model(cfg, enc, 1), 1).model.bank.local_prompts
    assert not np.array_equal(a, b)


def test_checkpoint_round_trip(small, tmp_path):
    cfg, ep, enc = small
    model = init_model(cfg, enc, 2)
    save_checkpoint(model, 0, 2, tmp_path / "c.json")
    bank, proj, cfg2, obj = load_checkpoint(tmp_path / "c.json")
    assert np.array_equal(bank.global_prompts, model.bank.global_prompts)
    assert np.array_equal(proj.weight, model.proj.weight)
    assert cfg2 == cfg and obj["seed"] == 2 and obj["encoder_checksum"] == enc.checksum()


def test_divergence_reports_last_good_checkpoint(small, monkeypatch):
    cfg, ep, enc = small
    import sotglp.train as train_mod

    real = train_mod.nc.backward
    calls = {"n": 0}

    def flaky(loss, tape):
        calls["n"] += 1
        grads = real(loss, tape)
        if calls["n"] == 4:
            return {k: np.full_like(v, np.nan) for k, v in grads.items()}
        return grads

    monkeypatch.setattr(train_mod.nc, "backward", flaky)
    with pytest.raises(DivergenceError) as info:
        train_episode(ep, init_model(cfg, enc, 0), 0)
    # 12 training images at batch 6 means 2 steps per epoch; step 3 fails in epoch 2
    assert info.value.step == 3
    assert info.value.checkpoint["epoch"] == 1

import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nowflow.cfm import (
    Candidate,
    CFMConfig,
    Codec,
    NonFiniteLoss,
    cfm_loss,
    ensemble_forecast,
    member_noise,
    sample_path,
    select_checkpoint,
    train,
)
from nowflow.codec import FrameVAE, LatentStats
from nowflow.model import ModelConfig, VectorFieldNet
from nowflow.optim import EMA, AdamW, WarmupCosine
from nowflow.solvers import SolverConfig
from nowflow.tensor import GradTape, Tensor
from nowflow.toy import GaussianToy, TimeLinearField


# ------------------------------------------------------------------ path and loss

def test_sample_path_examples():
    fs = sample_path(np.array([0.0]), np.array([2.0]), 0.5, np.array([1.0]), 0.01)
    assert fs.z_t[0] == pytest.approx(1.01, abs=1e-12)
    assert fs.u_t[0] == 2.0
    one = np.ones(3)
    assert np.all(sample_path(one, 3 * one, 0.0, 0 * one).z_t == 1)
    assert np.all(sample_path(one, 3 * one, 1.0, 0 * one).z_t == 3)
    with pytest.raises(ValueError):
        sample_path(one, one, 1.5, one)
    with pytest.raises(ValueError):
        sample_path(one, np.ones(2), 0.5, one)


def test_sample_path_per_item_time():
    z_p, z1 = np.zeros((2, 3)), np.ones((2, 3))
    fs = sample_path(z_p, z1, np.array([0.25, 0.75]), np.zeros((2, 3)))
    np.testing.assert_array_equal(fs.z_t[0], 0.25)
    np.testing.assert_array_equal(fs.z_t[1], 0.75)


@given(st.floats(0, 1), st.floats(-3, 3), st.floats(-3, 3))
def test_path_endpoints_without_noise(t, a, b):
    fs = sample_path(np.array([a]), np.array([b]), t, np.zeros(1), 0.0)
    assert fs.z_t[0] == pytest.approx((1 - t) * a + t * b, abs=1e-12)
    assert fs.u_t[0] == b - a


def test_path_moments():
    rng = np.random.default_rng(0)
    n = 200_000
    z1 = np.full(n, 2.0)
    fs = sample_path(rng.standard_normal(n), z1, 0.3, rng.standard_normal(n), 0.01)
    assert fs.z_t.mean() == pytest.approx(0.6, abs=5 * np.sqrt(0.49 + 1e-4) / np.sqrt(n))
    assert fs.z_t.var() == pytest.approx(0.49 + 1e-4, rel=0.01)


def test_cfm_loss_examples():
    a = Tensor(np.array([1.0, 2.0]))
    assert cfm_loss(a, a).item() == 0.0
    assert cfm_loss(a, Tensor(np.array([0.0, 0.0]))).item() == pytest.approx(2.5)
    with pytest.raises(ValueError):
        cfm_loss(a, Tensor(np.zeros(3)))


# ------------------------------------------------------------------ EMA and schedule

def test_ema_identities():
    p = {"w": np.array([1.0, 2.0])}
    frozen, follow = EMA(p, 1.0), EMA(p, 0.0)
    new = {"w": np.array([5.0, -1.0])}
    frozen.update(new)
    follow.update(new)
    np.testing.assert_array_equal(frozen.state()["w"], [1.0, 2.0])
    np.testing.assert_array_equal(follow.state()["w"], [5.0, -1.0])
    half = EMA(p, 0.5)
    half.update(new)
    np.testing.assert_allclose(half.state()["w"], [3.0, 0.5])


@given(st.floats(0, 1), st.floats(-10, 10), st.floats(-10, 10), st.floats(-10, 10))
def test_ema_stays_between_shadow_and_params(d, s0, p, q):
    ema = EMA({"w": np.array([s0])}, d)
    ema.update({"w": np.array([p])})
    lo, hi = min(s0, p), max(s0, p)
    assert lo - 1e-9 <= ema.state()["w"][0] <= hi + 1e-9


def test_lr_endpoints():
    s = WarmupCosine(5e-4, 1000)
    assert abs(s(0) - 0.1 * 5e-4) <= 1e-12
    assert abs(s(999) - 0.01 * 5e-4) <= 1e-12
    assert s(s.warmup_steps) == pytest.approx(5e-4)
    lrs = [s(k) for k in range(s.warmup_steps, 1000)]
    assert all(b <= a + 1e-18 for a, b in zip(lrs, lrs[1:]))


# ------------------------------------------------------------------ checkpoint selection

def test_select_checkpoint():
    cs = [Candidate(3, 0.2, {}), Candidate(1, 0.4, {}), Candidate(2, 0.4, {}), Candidate(4, float("nan"), {})]
    assert select_checkpoint(cs).step == 1
    assert select_checkpoint([Candidate(5, float("nan"), {})]).step == 5
    with pytest.raises(ValueError):
        select_checkpoint([])


# ------------------------------------------------------------------ training loop

def test_frozen_batch_loss_decreases():
    toy = GaussianToy()
    rng = np.random.default_rng(0)
    model = TimeLinearField(2, 5)
    x1 = toy.sample(64, rng)
    z_p, t, eps = rng.standard_normal((64, 2)), rng.uniform(size=64), rng.standard_normal((64, 2))
    fs = sample_path(z_p, x1, t, eps)
    params = model.parameters()
    opt = AdamW(params, lr=1e-2, weight_decay=0.0)
    losses = []
    for _ in range(50):
        with GradTape() as tape:
            loss = cfm_loss(model(Tensor(fs.z_t), fs.t), Tensor(fs.u_t))
        tape.backward(loss)
        opt.step(1e-2)
        opt.zero_grad()
        losses.append(loss.item())
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_train_learns_toy_and_logs(tmp_path):
    toy = GaussianToy()
    rng = np.random.default_rng(1)
    model = TimeLinearField(2, 11)
    cfg = CFMConfig(lr=3e-2, batch=256, epochs=50, ema_decay=0.99, weight_decay=0.0, seed=3)
    res = train(model, toy.sample(10_000, rng), None, cfg, validate=lambda s: 0.0,
                log_path=tmp_path / "log.csv", log_every=0)
    rows = list(csv.DictReader(open(tmp_path / "log.csv")))
    assert len(rows) == len(res.history) == 50 * 40
    assert list(rows[0]) == ["step", "epoch", "loss", "lr", "csi_m_val"]
    assert rows[39]["csi_m_val"] == "0.0" and rows[0]["csi_m_val"] == ""
    assert res.best.step == 40  # every candidate ties, so the earliest wins
    assert np.mean([h["loss"] for h in res.history[-100:]]) < np.mean([h["loss"] for h in res.history[:100]])


def test_same_seed_training_is_identical():
    toy = GaussianToy()
    data = toy.sample(512, np.random.default_rng(0))
    cfg = CFMConfig(lr=1e-2, batch=64, epochs=2, seed=7)
    a = train(TimeLinearField(2, 3), data, None, cfg, log_every=0)
    b = train(TimeLinearField(2, 3), data, None, cfg, log_every=0)
    assert [h["loss"] for h in a.history] == [h["loss"] for h in b.history]
    for k in a.state:
        assert a.state[k].tobytes() == b.state[k].tobytes()


def test_nonfinite_loss_aborts_with_snapshot(tmp_path):
    data = np.ones((8, 2))
    data[3] = np.nan
    with pytest.raises(NonFiniteLoss) as info:
        train(TimeLinearField(2, 3), data, None, CFMConfig(batch=8), snapshot_dir=tmp_path, log_every=0)
    assert info.value.snapshot["step"] == 0
    assert (tmp_path / "nonfinite.json").exists()


def test_empty_training_set_rejected():
    with pytest.raises(ValueError):
        train(TimeLinearField(2, 3), np.zeros((0, 2)), None, CFMConfig(), log_every=0)


# ------------------------------------------------------------------ sampling

def tiny_setup():
    cfg = ModelConfig(base_dim=8, dropout=0.0, zero_init_output=False)
    codec = Codec(FrameVAE(seed=0), LatentStats(np.zeros(4), np.ones(4)))
    past = np.random.default_rng(0).random((2, 13, 32, 32)).astype(np.float32)
    return VectorFieldNet(cfg, seed=0), codec, past


def test_ensemble_forecast_shape_range_and_determinism():
    model, codec, past = tiny_setup()
    a = ensemble_forecast(model, codec, past, n_members=3, sampler=SolverConfig("euler", 2), seed=5)
    assert a.frames.shape == (2, 3, 12, 32, 32)
    assert a.frames.min() >= 0 and a.frames.max() <= 1
    np.testing.assert_array_equal(a.nfe, 2)
    b = ensemble_forecast(model, codec, past, n_members=3, sampler=SolverConfig("euler", 2), seed=5)
    assert a.frames.tobytes() == b.frames.tobytes()
    c = ensemble_forecast(model, codec, past, n_members=3, sampler=SolverConfig("euler", 2), seed=6)
    assert a.frames.tobytes() != c.frames.tobytes()
    assert not np.array_equal(a.frames[:, 0], a.frames[:, 1])


def test_ensemble_members_do_not_depend_on_batching():
    model, codec, past = tiny_setup()
    both = ensemble_forecast(model, codec, past, 2, SolverConfig("euler", 1), seed=1, window_ids=[10, 11])
    one = ensemble_forecast(model, codec, past[1:], 2, SolverConfig("euler", 1), seed=1, window_ids=[11])
    np.testing.assert_allclose(both.frames[1], one.frames[0], atol=1e-5)
    np.testing.assert_array_equal(member_noise(1, 11, 0, (2,)), member_noise(1, 11, 0, (2,)))


def test_ensemble_forecast_ddim_and_errors():
    from nowflow.diffusion import DDIMConfig

    model, codec, past = tiny_setup()
    r = ensemble_forecast(model, codec, past[0], 2, DDIMConfig(3), objective="ddpm")
    assert r.frames.shape == (2, 12, 32, 32)
    np.testing.assert_array_equal(r.nfe, 3)
    with pytest.raises(ValueError):
        ensemble_forecast(model, codec, past, 0)

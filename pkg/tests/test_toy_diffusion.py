import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nowflow.cfm import CFMConfig, train
from nowflow.diffusion import (
    DDIMConfig,
    ddim_sample,
    ddpm_loss,
    make_schedule,
    predict_x0,
    q_sample,
    timestep_sequence,
)
from nowflow.solvers import SolverConfig, integrate
from nowflow.tensor import Tensor
from nowflow.toy import GaussianToy, TimeLinearField, hat_basis, optimal_cfm_field, optimal_eps_predictor


# ------------------------------------------------------------------ toy oracles

def test_toy_validation():
    with pytest.raises(ValueError):
        GaussianToy((0.0,), 0.0)


def test_cfm_field_endpoints():
    z = np.linspace(-2, 2, 9)[:, None]
    std = GaussianToy((0.0,), 1.0)
    np.testing.assert_allclose(optimal_cfm_field(z, 0.0, std), -z, atol=1e-15)
    np.testing.assert_allclose(optimal_cfm_field(z, 1.0, std), z, atol=1e-15)
    toy = GaussianToy()
    np.testing.assert_allclose(optimal_cfm_field(z * np.ones(2), 0.0, toy), toy.mean - z, atol=1e-15)


def _binned_mean(x, y, center, width):
    sel = np.abs(x - center) < width
    return y[sel].mean(), y[sel].std() / np.sqrt(sel.sum())


def test_cfm_field_matches_monte_carlo():
    rng = np.random.default_rng(0)
    for m, s, t, z in ((0.0, 1.0, 0.5, 1.0), (2.0, 0.5, 0.3, 0.2), (-1.0, 0.5, 0.8, -0.6)):
        x0 = rng.standard_normal(10 ** 6)
        x1 = m + s * rng.standard_normal(10 ** 6)
        xt = (1 - t) * x0 + t * x1
        est, se = _binned_mean(xt, x1 - x0, z, 0.01)
        exact = optimal_cfm_field(np.array([[z]]), t, GaussianToy((m,), s))[0, 0]
        assert abs(est - exact) < 3 * se + 0.01 * abs(exact - m)  # bin half-width bias


def test_eps_predictor_examples():
    ab = 0.3
    tiny = GaussianToy((1.5,), 1e-9)
    x = np.array([[0.2], [np.sqrt(ab) * 1.5]])
    np.testing.assert_allclose(optimal_eps_predictor(x, ab, tiny),
                               (x - np.sqrt(ab) * 1.5) / np.sqrt(1 - ab), atol=1e-12)
    assert optimal_eps_predictor(x[1:], ab, tiny)[0, 0] == pytest.approx(0.0, abs=1e-12)
    std = GaussianToy((0.0,), 1.0)
    np.testing.assert_allclose(optimal_eps_predictor(x, ab, std), x * np.sqrt(1 - ab), atol=1e-15)


def test_eps_predictor_matches_monte_carlo():
    rng = np.random.default_rng(1)
    ab = 0.4
    for m, s in ((0.0, 1.0), (1.0, 0.5)):
        x0 = m + s * rng.standard_normal(10 ** 6)
        eps = rng.standard_normal(10 ** 6)
        xt = np.sqrt(ab) * x0 + np.sqrt(1 - ab) * eps
        est, se = _binned_mean(xt, eps, 0.5, 0.01)
        exact = optimal_eps_predictor(np.array([[0.5]]), ab, GaussianToy((m,), s))[0, 0]
        assert abs(est - exact) < 3 * se + 0.01


def test_rk4_on_optimal_field_recovers_moments():
    toy = GaussianToy()
    z0 = np.random.default_rng(2).standard_normal((10 ** 4, 2))
    z1 = integrate(lambda z, t: optimal_cfm_field(z, t, toy), z0, SolverConfig("rk4", 100)).z
    se_mean = toy.s / 100
    se_std = toy.s / np.sqrt(2 * 10 ** 4)
    assert np.all(np.abs(z1.mean(0) - toy.mean) < 5 * se_mean)
    assert np.all(np.abs(z1.std(0) - toy.s) < 5 * se_std)


def test_hat_basis_partition_of_unity():
    phi = hat_basis(np.linspace(0, 1, 37), 11)
    np.testing.assert_allclose(phi.sum(1), 1.0, atol=1e-12)
    assert np.all(phi >= 0)


def test_linear_model_converges_to_optimal_field():
    toy = GaussianToy()
    rng = np.random.default_rng(0)
    model = TimeLinearField(2, 21)
    cfg = CFMConfig(lr=3e-2, batch=4096, epochs=125, ema_decay=0.99, weight_decay=0.0)
    res = train(model, toy.sample(65536, rng), None, cfg, log_every=0)
    assert len(res.history) == 2000
    model.load_state_dict(res.ema_state)
    worst = 0.0
    g = np.linspace(-2, 2, 9)
    for t in np.linspace(0, 1, 21):
        sd = np.sqrt((1 - t) ** 2 + t ** 2 * toy.s ** 2)
        grid = t * toy.mean + sd * np.stack(np.meshgrid(g, g), -1).reshape(-1, 2)
        pred = model(Tensor(grid), np.full(len(grid), t)).data
        worst = max(worst, np.abs(pred - optimal_cfm_field(grid, t, toy, cfg.sigma)).max())
    assert worst < 0.05


# ------------------------------------------------------------------ diffusion

def test_schedule_examples():
    s = make_schedule()
    assert s.T == 1000
    assert s.alpha_bars[1] == pytest.approx(0.9999, abs=1e-15)
    assert np.all(np.diff(s.alpha_bars) < 0)
    direct = np.prod(1 - np.linspace(1e-4, 2e-2, 1000))
    assert s.alpha_bars[-1] == pytest.approx(direct, rel=1e-12)
    assert 1e-5 < s.alpha_bars[-1] < 1e-4
    assert 0 < s.betas[1] < s.betas[-1] < 1
    for bad in ((1000, 0.0, 2e-2), (1000, 3e-2, 2e-2), (1000, 1e-4, 1.5)):
        with pytest.raises(ValueError):
            make_schedule(*bad)


def test_signal_noise_consistency():
    ab = make_schedule().alpha_bars[1:]
    np.testing.assert_array_equal(np.sqrt(ab) ** 2 + np.sqrt(1 - ab) ** 2 - 1 < 1e-15, True)


def test_q_sample_examples():
    s = make_schedule()
    s.alpha_bars[5] = 0.25  # frozen dataclass holds a mutable array; patch one entry for the plug-in check
    assert q_sample(np.array(2.0), 5, np.array(1.0), s) == pytest.approx(1 + np.sqrt(0.75), abs=1e-12)
    assert q_sample(np.array(2.0), 5, np.array(0.0), s) == pytest.approx(1.0, abs=1e-12)
    s1 = make_schedule()
    x0 = np.array([0.7, -0.2])
    np.testing.assert_allclose(q_sample(x0, 1, np.ones(2), s1), x0, atol=2e-2)
    with pytest.raises(ValueError):
        q_sample(x0, 0, x0, s1)
    with pytest.raises(ValueError):
        q_sample(x0, 1001, x0, s1)


def test_ddpm_loss_examples():
    e = Tensor(np.array([0.3, -0.4]))
    assert ddpm_loss(e, e).item() == 0.0
    assert ddpm_loss(Tensor(e.data + 1), e).item() == pytest.approx(1.0)
    assert ddpm_loss(Tensor(np.zeros(2)), Tensor(np.array([1.0, 3.0]))).item() == 5.0


@given(st.integers(1, 1000))
def test_timestep_subsequence(steps):
    seq = timestep_sequence(1000, steps)
    assert seq[0] == 1000
    assert np.all(np.diff(seq) < 0)
    if steps > 1:
        assert seq[-1] == 1
    assert len(seq) <= steps


def test_x0_reconstruction_identity():
    s = make_schedule()
    rng = np.random.default_rng(0)
    x0, eps = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    for t in (1, 10, 500, 1000):
        xt = q_sample(x0, t, eps, s)
        np.testing.assert_allclose(predict_x0(xt, eps, s.alpha_bars[t]), x0, atol=1e-9)


def test_ddim_nfe_and_determinism():
    s = make_schedule()
    calls = [0]

    def eps_model(x, t):
        calls[0] += 1
        return 0.1 * x

    x_T = np.random.default_rng(0).normal(size=(3, 2))
    r = ddim_sample(eps_model, x_T, s, DDIMConfig(1))
    assert r.nfe == calls[0] == 1
    a = ddim_sample(eps_model, x_T, s, DDIMConfig(20)).x0
    b = ddim_sample(eps_model, x_T, s, DDIMConfig(20)).x0
    assert a.tobytes() == b.tobytes()
    with pytest.raises(ValueError):
        DDIMConfig(0)


def test_ddim_perfect_model_recovers_point_mass():
    s = make_schedule()
    toy = GaussianToy((0.8,), 1e-9)
    x_T = np.random.default_rng(1).normal(size=(5, 1))
    x0 = ddim_sample(lambda x, t: optimal_eps_predictor(x, s.alpha_bars[t], toy), x_T, s, DDIMConfig(1000)).x0
    np.testing.assert_allclose(x0, 0.8, atol=1e-3)


def test_ddim_optimal_eps_recovers_moments():
    s = make_schedule()
    toy = GaussianToy()
    x_T = np.random.default_rng(3).standard_normal((10 ** 4, 2))
    x0 = ddim_sample(lambda x, t: optimal_eps_predictor(x, s.alpha_bars[t], toy), x_T, s, DDIMConfig(1000)).x0
    assert np.all(np.abs(x0.mean(0) - toy.mean) < 5 * toy.s / 100)
    assert np.all(np.abs(x0.std(0) - toy.s) < 5 * toy.s / np.sqrt(2 * 10 ** 4))

import numpy as np
import pytest

from algorithms.diffusion import (ddim_sigma, ddim_step, ddim_timesteps, ddpm_step, make_schedule,
                                  posterior_mean, predict_start, q_sample, v_target)
from algorithms.topology import dense_box
from models.grid import FeatureGrid
from utils.errors import ContractError


@pytest.fixture(scope='module')
def schedule():
    return make_schedule('linear', 1000, 1e-4, 0.02)


def test_single_step_schedule():
    s = make_schedule('linear', 1, 1e-4, 0.02)
    assert s.alpha_bar(0) == 1.0
    assert s.alpha_bar(1) == pytest.approx(1.0 - 1e-4)


def test_default_schedule_tables(schedule):
    assert schedule.alpha_bar(1000) == pytest.approx(4.0e-5, rel=0.05)
    assert np.all(np.diff(schedule.alpha_bars) < 0)
    assert schedule.beta(1) == pytest.approx(1e-4) and schedule.beta(1000) == pytest.approx(0.02)
    assert schedule.to_dict() == {'kind': 'linear', 'steps': 1000, 'beta_start': pytest.approx(1e-4),
                                  'beta_end': pytest.approx(0.02)}


@pytest.mark.parametrize('kwargs', [
    dict(kind='cosine'), dict(steps=0), dict(beta_start=0.0), dict(beta_start=0.1, beta_end=0.01),
    dict(beta_end=1.0),
])
def test_schedule_contracts(kwargs):
    args = dict(kind='linear', steps=10, beta_start=1e-4, beta_end=0.02)
    args.update(kwargs)
    with pytest.raises(ContractError):
        make_schedule(**args)


def test_forward_identities(schedule, rng):
    x0 = rng.standard_normal((50, 4))
    eps = rng.standard_normal((50, 4))
    for t in (0, 1, 250, 1000):
        ab = schedule.alpha_bar(t)
        xt = q_sample(schedule, x0, t, eps)
        v = v_target(schedule, x0, eps, t)
        assert np.allclose(xt, np.sqrt(ab) * x0 + np.sqrt(1 - ab) * eps)
        x0_hat, eps_hat = predict_start(schedule, xt, t, v)
        assert np.allclose(x0_hat, x0) and np.allclose(eps_hat, eps)
    assert np.array_equal(q_sample(schedule, x0, 0, eps), x0)


@pytest.mark.parametrize('t', [1, 250, 1000])
def test_forward_moments_over_many_draws(schedule, t):
    n = 100_000
    rng = np.random.default_rng(t)
    x0 = np.tile([0.7, -1.3], (n, 1))
    xt = q_sample(schedule, x0, t, rng.standard_normal((n, 2)))
    ab = schedule.alpha_bar(t)
    var = 1.0 - ab
    # Within four standard errors of the mean and of the sample variance
    assert np.all(np.abs(xt.mean(axis=0) - np.sqrt(ab) * x0[0]) <= 4 * np.sqrt(var / n))
    assert np.all(np.abs(xt.var(axis=0) - var) <= 4 * var * np.sqrt(2.0 / (n - 1)))


def test_forward_keeps_feature_grids(schedule, rng):
    grid = dense_box(2)
    x0 = FeatureGrid(grid, rng.standard_normal((8, 3)).astype(np.float32))
    eps = FeatureGrid(grid, rng.standard_normal((8, 3)).astype(np.float32))
    xt = q_sample(schedule, x0, 10, eps)
    assert xt.grid is grid and xt.values.dtype == np.float32


def test_forward_contracts(schedule):
    with pytest.raises(ContractError):
        q_sample(schedule, np.zeros((2, 2)), 1001, np.zeros((2, 2)))
    with pytest.raises(ContractError):
        q_sample(schedule, np.zeros((2, 2)), 5, np.zeros((3, 2)))
    with pytest.raises(ContractError):
        v_target(schedule, np.zeros((2, 2)), np.zeros((2, 3)), 5)


def test_ddpm_mean_is_posterior_mean(schedule, rng):
    xt = rng.standard_normal((20, 4))
    v = rng.standard_normal((20, 4))
    for t in (2, 10, 500, 1000):
        x0_hat, _ = predict_start(schedule, xt, t, v)
        expected = posterior_mean(schedule, x0_hat, xt, t)
        assert np.allclose(ddpm_step(schedule, xt, t, v), expected, atol=1e-6)


def test_ddpm_adds_no_noise_at_first_step(schedule, rng):
    xt = rng.standard_normal((5, 2))
    v = rng.standard_normal((5, 2))
    noise = rng.standard_normal((5, 2))
    assert np.array_equal(ddpm_step(schedule, xt, 1, v, noise), ddpm_step(schedule, xt, 1, v))
    assert not np.allclose(ddpm_step(schedule, xt, 2, v, noise), ddpm_step(schedule, xt, 2, v))
    with pytest.raises(ContractError):
        ddpm_step(schedule, xt, 0, v)


def test_ddim_oracle_chain_recovers_clean_latent(schedule, rng):
    x0 = rng.standard_normal((30, 4))
    eps = rng.standard_normal((30, 4))
    x = q_sample(schedule, x0, schedule.steps, eps)
    pairs = ddim_timesteps(schedule.steps, 50)
    for t, t_prev in pairs:
        x = ddim_step(schedule, x, t, t_prev, v_target(schedule, x0, eps, t), eta=0.0)
    assert pairs[-1][1] == 0
    assert np.allclose(x, x0, atol=1e-4)


def test_ddim_full_variance_matches_ddpm_mean(schedule, rng):
    xt = rng.standard_normal((10, 3))
    v = rng.standard_normal((10, 3))
    for t in (2, 100, 999):
        assert np.allclose(ddim_step(schedule, xt, t, t - 1, v, eta=1.0), ddpm_step(schedule, xt, t, v), atol=1e-9)
        assert ddim_sigma(schedule, t, t - 1, 1.0) ** 2 == pytest.approx(
            schedule.beta(t) * (1 - schedule.alpha_bar(t - 1)) / (1 - schedule.alpha_bar(t)))


def test_ddim_contracts(schedule):
    x = np.zeros((2, 2))
    with pytest.raises(ContractError):
        ddim_step(schedule, x, 10, 10, x)
    with pytest.raises(ContractError):
        ddim_step(schedule, x, 1001, 10, x)


def test_ddim_timesteps():
    pairs = ddim_timesteps(1000, 50)
    assert len(pairs) == 50
    assert pairs[0][0] == 1000 and pairs[-1] == (1, 0)
    assert all(t > p for t, p in pairs)
    assert all(a[1] == b[0] for a, b in zip(pairs[:-1], pairs[1:]))
    assert ddim_timesteps(10, 100) == [(t, t - 1) for t in range(10, 0, -1)]
    assert ddim_timesteps(10, 0) == [(10, 0)]

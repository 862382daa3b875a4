"""Noise schedule, forward process and v-parameterized reverse steps."""
from typing import List, Tuple

import numpy as np

from models.grid import FeatureGrid
from models.schedule import NoiseSchedule
from utils.errors import ContractError

SCHEDULE_KINDS = ('linear',)


def make_schedule(kind='linear', steps=1000, beta_start=1e-4, beta_end=0.02) -> NoiseSchedule:
    """
    Precompute β_t, α_t and ᾱ_t for t = 0..T (index 0 is the clean state).

    Raises:
        ContractError: unknown kind, T < 1 or betas outside 0 < β_1 <= β_T < 1
    """
    if kind not in SCHEDULE_KINDS:
        raise ContractError(f"Unknown schedule kind '{kind}', expected one of {SCHEDULE_KINDS}")
    steps = int(steps)
    if steps < 1:
        raise ContractError(f"Schedule needs at least one step, got {steps}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ContractError(f"Invalid beta range {beta_start}..{beta_end}")
    betas = np.concatenate([[0.0], np.linspace(beta_start, beta_end, steps, dtype=np.float64)])
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    for arr in (betas, alphas, alpha_bars):
        arr.setflags(write=False)
    return NoiseSchedule(kind, steps, betas, alphas, alpha_bars)


def _values(x):
    return x.values if isinstance(x, FeatureGrid) else np.asarray(x)


def _like(template, values):
    if isinstance(template, FeatureGrid):
        return FeatureGrid(template.grid, values.astype(template.values.dtype))
    return values


def _check_shape(a, b, what):
    if a.shape != b.shape:
        raise ContractError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def _check_t(schedule, t, low=0):
    if not low <= t <= schedule.steps:
        raise ContractError(f"Timestep {t} outside [{low}, {schedule.steps}]")


def q_sample(schedule: NoiseSchedule, x0, t, eps):
    """X_t = √ᾱ_t·X_0 + √(1−ᾱ_t)·ε on the same topology"""
    _check_t(schedule, t)
    x, e = _values(x0), _values(eps)
    _check_shape(x, e, 'q_sample')
    ab = schedule.alpha_bars[t]
    return _like(x0, np.sqrt(ab) * x + np.sqrt(1.0 - ab) * e)


def v_target(schedule: NoiseSchedule, x0, eps, t):
    """v = √ᾱ_t·ε − √(1−ᾱ_t)·X_0"""
    _check_t(schedule, t)
    x, e = _values(x0), _values(eps)
    _check_shape(x, e, 'v_target')
    ab = schedule.alpha_bars[t]
    return _like(x0, np.sqrt(ab) * e - np.sqrt(1.0 - ab) * x)


def predict_start(schedule: NoiseSchedule, x_t, t, v):
    """Invert the v-parameterization: (x̂_0, ε̂) from X_t and v"""
    xt, vv = _values(x_t), _values(v)
    _check_shape(xt, vv, 'predict_start')
    ab = schedule.alpha_bars[t]
    x0 = np.sqrt(ab) * xt - np.sqrt(1.0 - ab) * vv
    eps = np.sqrt(1.0 - ab) * xt + np.sqrt(ab) * vv
    return _like(x_t, x0), _like(x_t, eps)


def posterior_mean(schedule: NoiseSchedule, x0, x_t, t):
    """Mean of q(X_{t−1} | X_t, X_0)"""
    _check_t(schedule, t, low=1)
    ab, ab_prev = schedule.alpha_bars[t], schedule.alpha_bars[t - 1]
    beta, alpha = schedule.betas[t], schedule.alphas[t]
    c0 = np.sqrt(ab_prev) * beta / (1.0 - ab)
    ct = np.sqrt(alpha) * (1.0 - ab_prev) / (1.0 - ab)
    return _like(x_t, c0 * _values(x0) + ct * _values(x_t))


def ddpm_step(schedule: NoiseSchedule, x_t, t, v_hat, noise=None):
    """
    Ancestral step with the posterior ("small") variance.

    μ = √α_t·X_t − β_t·√(ᾱ_{t−1}/(1−ᾱ_t))·v̂ and σ_t² = β_t(1−ᾱ_{t−1})/(1−ᾱ_t);
    at t = 1 the noise term is dropped.

    Raises:
        ContractError: t outside [1, T] or shape mismatch
    """
    _check_t(schedule, t, low=1)
    xt, vv = _values(x_t), _values(v_hat)
    _check_shape(xt, vv, 'ddpm_step')
    ab, ab_prev = schedule.alpha_bars[t], schedule.alpha_bars[t - 1]
    beta, alpha = schedule.betas[t], schedule.alphas[t]
    mean = np.sqrt(alpha) * xt - beta * np.sqrt(ab_prev / (1.0 - ab)) * vv
    if t > 1 and noise is not None:
        sigma = np.sqrt(beta * (1.0 - ab_prev) / (1.0 - ab))
        mean = mean + sigma * _values(noise)
    return _like(x_t, mean)


def ddim_sigma(schedule: NoiseSchedule, t, t_prev, eta):
    ab, ab_prev = schedule.alpha_bars[t], schedule.alpha_bars[t_prev]
    return eta * np.sqrt((1.0 - ab_prev) / (1.0 - ab)) * np.sqrt(1.0 - ab / ab_prev)


def ddim_step(schedule: NoiseSchedule, x_t, t, t_prev, v_hat, eta=0.0, noise=None):
    """
    DDIM update from t to t_prev < t using the v prediction.

    Raises:
        ContractError: t_prev >= t or either step out of range
    """
    if t_prev >= t:
        raise ContractError(f"DDIM needs t_prev < t, got {t_prev} >= {t}")
    _check_t(schedule, t, low=1)
    _check_t(schedule, t_prev)
    x0, eps = predict_start(schedule, x_t, t, v_hat)
    x0, eps = _values(x0), _values(eps)
    ab_prev = schedule.alpha_bars[t_prev]
    sigma = ddim_sigma(schedule, t, t_prev, eta)
    out = np.sqrt(ab_prev) * x0 + np.sqrt(max(0.0, 1.0 - ab_prev - sigma * sigma)) * eps
    if sigma > 0 and noise is not None:
        out = out + sigma * _values(noise)
    return _like(x_t, out)


def ddim_timesteps(total_steps, sample_steps) -> List[Tuple[int, int]]:
    """Uniform descending (t, t_prev) pairs from T down to 0"""
    sample_steps = max(1, min(int(sample_steps), int(total_steps)))
    ts = np.unique(np.rint(np.linspace(total_steps, 1, sample_steps)).astype(np.int64))[::-1]
    prev = np.concatenate([ts[1:], [0]])
    return [(int(t), int(p)) for t, p in zip(ts, prev)]

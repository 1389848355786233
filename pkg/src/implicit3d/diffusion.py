"""Synchronized multiview DDPM sampling with pluggable joint noise predictors.

Every reverse step draws each view from a Gaussian whose mean uses a noise
prediction that may look at *all* views; that cross-view dependence is what
keeps the views consistent.  Views are stacked along axis 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class DiffusionSchedule:
    betas: np.ndarray  # index t - 1 holds step t
    alphas: np.ndarray
    alpha_bars: np.ndarray
    sigmas: np.ndarray

    @property
    def steps(self) -> int:
        return len(self.betas)

    def beta(self, t):
        return self.betas[t - 1]

    def alpha(self, t):
        return self.alphas[t - 1]

    def alpha_bar(self, t):
        return self.alpha_bars[t - 1]

    def sigma(self, t):
        # the final step is deterministic
        return 0.0 if t == 1 else self.sigmas[t - 1]


def make_schedule(steps=1000, beta_start=1e-4, beta_end=0.02) -> DiffusionSchedule:
    """Linear beta schedule with ``sigma_t^2 = beta_t``."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, steps, dtype=np.float64)
    alphas = 1.0 - betas
    return DiffusionSchedule(betas, alphas, np.cumprod(alphas), np.sqrt(betas))


def forward_perturb(x0, t, eps, schedule: DiffusionSchedule):
    """Closed-form jump ``x_t = sqrt(abar_t) x_0 + sqrt(1 - abar_t) eps``."""
    ab = schedule.alpha_bar(t)
    return np.sqrt(ab) * np.asarray(x0) + np.sqrt(1.0 - ab) * np.asarray(eps)


def posterior_mean(x_t, eps_hat, t, schedule: DiffusionSchedule):
    """Per-view reverse mean ``(x_t - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t)``."""
    x_t = np.asarray(x_t)
    eps_hat = np.asarray(eps_hat)
    if x_t.shape != eps_hat.shape:
        raise ValueError(f"noise prediction shape {eps_hat.shape} does not match state {x_t.shape}")
    coef = schedule.beta(t) / np.sqrt(1.0 - schedule.alpha_bar(t))
    return (x_t - coef * eps_hat) / np.sqrt(schedule.alpha(t))


# ------------------------------------------------------------------ predictors


class GaussianOracle:
    """Exact E[eps | x_t] when every element of x_0 is N(mean, var) independently.

    With ``x_t = sqrt(ab) x_0 + sqrt(1 - ab) eps``, conditioning the jointly
    Gaussian pair (eps, x_t) gives
    ``E[eps | x_t] = sqrt(1 - ab) (x_t - sqrt(ab) mean) / (ab var + 1 - ab)``.
    """

    def __init__(self, mean, var, schedule: DiffusionSchedule):
        self.mean, self.var, self.schedule = mean, var, schedule

    def __call__(self, x, t):
        ab = self.schedule.alpha_bar(t)
        return np.sqrt(1.0 - ab) * (x - np.sqrt(ab) * self.mean) / (ab * self.var + 1.0 - ab)


class IndependentPredictor:
    """Applies a single-view predictor to each view separately (no synchronisation)."""

    def __init__(self, single):
        self.single = single

    def __call__(self, x, t):
        return np.stack([self.single(view, t) for view in x])


class ViewAveragingPredictor:
    """Pulls every view's clean-image estimate toward the cross-view mean with weight ``kappa``.

    Each view's prediction implies ``x0_n = (x_n - sqrt(1 - ab) eps_n) / sqrt(ab)``.
    The returned noise is ``(1 - kappa) eps_n + kappa * eps_n'`` where ``eps_n'``
    is the noise that would make view n's estimate equal the mean of all ``x0``.
    (Averaging the raw noise predictions instead weakens the pull on each view's
    deviation from the mean and makes the views drift apart.)
    """

    def __init__(self, base, schedule: DiffusionSchedule, kappa=0.5):
        if not 0.0 <= kappa <= 1.0:
            raise ValueError("kappa must lie in [0, 1]")
        self.base, self.schedule, self.kappa = base, schedule, kappa

    def __call__(self, x, t):
        eps = self.base(x, t)
        ab = self.schedule.alpha_bar(t)
        x0 = (x - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)
        consensus = (x - np.sqrt(ab) * x0.mean(axis=0, keepdims=True)) / np.sqrt(1.0 - ab)
        return (1.0 - self.kappa) * eps + self.kappa * consensus


# ------------------------------------------------------------------ sampling


@dataclass
class MultiviewState:
    x: np.ndarray  # (N, *shape)
    t: int


def view_streams(seed, n_views):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n_views)]


def _draw(streams, shape, shared):
    if shared:
        z = streams[0].standard_normal(shape)
        return np.stack([z] * len(streams)) if len(streams) > 1 else z[None]
    return np.stack([g.standard_normal(shape) for g in streams])


def sync_reverse_step(state: MultiviewState, predictor, schedule: DiffusionSchedule, streams,
                      shared_noise=False) -> MultiviewState:
    """Sample every view of x_{t-1} given the joint state x_t."""
    t = state.t
    if t < 1:
        raise ValueError("cannot step below t = 0")
    eps = np.asarray(predictor(state.x, t))
    if eps.shape != state.x.shape:
        raise ValueError(f"predictor returned shape {eps.shape}, expected {state.x.shape}")
    mu = posterior_mean(state.x, eps, t, schedule)
    sigma = schedule.sigma(t)
    if sigma > 0:
        mu = mu + sigma * _draw(streams, state.x.shape[1:], shared_noise)
    return MultiviewState(mu, t - 1)


def sample(predictor, n_views, shape, schedule: DiffusionSchedule, seed=0, shared_noise=False,
           return_trajectory=False):
    """Run the full synchronized reverse chain from x_T ~ N(0, I)."""
    shape = tuple(np.atleast_1d(shape)) if not isinstance(shape, tuple) else shape
    streams = view_streams(seed, 1 if shared_noise else n_views)
    if shared_noise:
        streams = streams * n_views
    state = MultiviewState(_draw(streams, shape, shared_noise), schedule.steps)
    trajectory = [state.x] if return_trajectory else None
    while state.t > 0:
        state = sync_reverse_step(state, predictor, schedule, streams, shared_noise)
        if return_trajectory:
            trajectory.append(state.x)
    return (state.x, trajectory) if return_trajectory else state.x


def ddpm_sample_single(eps_fn, shape, schedule: DiffusionSchedule, seed=0):
    """Plain single-view DDPM chain, the reference the N = 1 sampler must reproduce."""
    gen = view_streams(seed, 1)[0]
    x = gen.standard_normal(shape)
    for t in range(schedule.steps, 0, -1):
        beta = schedule.betas[t - 1]
        mean = (x - beta / np.sqrt(1.0 - schedule.alpha_bars[t - 1]) * eps_fn(x, t)) / np.sqrt(schedule.alphas[t - 1])
        if t > 1:
            mean = mean + schedule.sigmas[t - 1] * gen.standard_normal(shape)
        x = mean
    return x

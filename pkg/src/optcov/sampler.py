"""Heun probability-flow samplers and DDPM ancestral sampling.

Heun samplers use the EDM kernel (``s = 1``, ``sigma = t``) and a mean
function ``mean_fn(x, t) -> x0_hat``. The ancestral sampler runs on a
:class:`~optcov.schedule.DdpmSchedule` with ``mean_fn(x, t_index)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, ValidationError
from .guidance import conditional_mean
from .schedule import DdpmSchedule

__all__ = [
    "SamplerConfig",
    "Trajectory",
    "StepRecord",
    "sigma_grid",
    "heun_step",
    "heun_stochastic_step",
    "churn_gamma",
    "ddpm_reverse_mean",
    "ddpm_ancestral_step",
    "sample_heun",
    "sample_ancestral",
    "solve_inverse_problem",
    "rng_streams",
]

KINDS = ("heun", "heun-stoch", "ancestral")


@dataclass
class SamplerConfig:
    kind: str = "heun"
    steps: int = 50
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    rho: float = 7.0
    s_churn: float = 80.0
    s_tmin: float = 0.05
    s_tmax: float = 50.0
    s_noise: float = 1.003
    seed: int = 0
    schedule: DdpmSchedule | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown sampler {self.kind!r}; expected one of {KINDS}")
        if int(self.steps) != self.steps or self.steps < 1:
            raise ValidationError("steps must be a positive integer")
        if not 0 < self.sigma_min < self.sigma_max:
            raise ValidationError("need 0 < sigma_min < sigma_max")
        if not self.rho > 0:
            raise ValidationError("rho must be positive")
        if self.kind == "ancestral" and self.schedule is None:
            raise ValidationError("ancestral sampling needs a DDPM schedule")


@dataclass
class StepRecord:
    t: float
    sigma: float
    residual: float = float("nan")
    state_residual: float = float("nan")
    cg_iterations: int = 0
    covariance: str = ""


@dataclass
class Trajectory:
    times: list
    final: np.ndarray
    states: list | None = None
    steps: list = field(default_factory=list)


def rng_streams(seed):
    """Independent generators for initialization, churn noise and ancestral noise."""
    init, churn, ancestral = np.random.SeedSequence(seed).spawn(3)
    return {
        "init": np.random.default_rng(init),
        "churn": np.random.default_rng(churn),
        "ancestral": np.random.default_rng(ancestral),
    }


def sigma_grid(cfg):
    """Karras grid of ``N + 1`` noise levels ending at zero."""
    n = int(cfg.steps)
    if n == 1:
        return np.array([cfg.sigma_max, 0.0])
    inv = 1.0 / cfg.rho
    i = np.arange(n)
    grid = (cfg.sigma_max**inv + i / (n - 1) * (cfg.sigma_min**inv - cfg.sigma_max**inv)) ** cfg.rho
    return np.append(grid, 0.0)


def heun_step(x, t_cur, t_next, mean_fn):
    """One Heun step of ``dx/dt = (x - x0_hat(x, t)) / t``; Euler only when ``t_next = 0``."""
    if not t_cur > 0:
        raise DomainError(f"t_cur must be positive, got {t_cur}")
    if not 0 <= t_next < t_cur:
        raise DomainError(f"need 0 <= t_next < t_cur, got {t_next}, {t_cur}")
    d = (x - mean_fn(x, t_cur)) / t_cur
    x_next = x + (t_next - t_cur) * d
    if t_next > 0:
        d2 = (x_next - mean_fn(x_next, t_next)) / t_next
        x_next = x + (t_next - t_cur) * 0.5 * (d + d2)
    return x_next


def churn_gamma(t_cur, s_churn, s_tmin, s_tmax, n_steps):
    if s_tmin <= t_cur <= s_tmax:
        return min(s_churn / n_steps, np.sqrt(2.0) - 1.0)
    return 0.0


def heun_stochastic_step(x, t_cur, t_next, cfg, rng, mean_fn, n_steps=None):
    """Raise the noise level by the churn factor, then take a Heun step."""
    n_steps = cfg.steps if n_steps is None else n_steps
    gamma = churn_gamma(t_cur, cfg.s_churn, cfg.s_tmin, cfg.s_tmax, n_steps)
    if gamma == 0:
        return heun_step(x, t_cur, t_next, mean_fn)
    t_hat = t_cur * (1.0 + gamma)
    x_hat = x + np.sqrt(t_hat**2 - t_cur**2) * cfg.s_noise * rng.standard_normal(np.shape(x))
    return heun_step(x_hat, t_hat, t_next, mean_fn)


def ddpm_reverse_mean(x_t, x0, t, sched):
    """``mu_tilde_t(x_t, x0)`` with forward-kernel variance ``beta_tilde_t``."""
    t = sched._check(t)
    ab_prev, bb_prev = sched.alpha_bar(t - 1), sched.beta_bar(t - 1)
    coef = np.sqrt(max(bb_prev - sched.beta_tilde(t), 0.0) / sched.beta_bar(t))
    return np.sqrt(ab_prev) * x0 + coef * (x_t - np.sqrt(sched.alpha_bar(t)) * x0)


def ddpm_ancestral_step(x_t, t, sched, posterior_mean, r2, rng):
    """Sample ``x_{t-1} ~ N(mu_tilde, beta_tilde + c_t^2 r2)``; noise-free at ``t = 1``."""
    t = sched._check(t)
    m = ddpm_reverse_mean(x_t, posterior_mean, t, sched)
    if t == 1:
        return m
    v2 = sched.beta_tilde(t) + sched.posterior_coef(t) ** 2 * np.asarray(r2)
    return m + np.sqrt(v2) * rng.standard_normal(np.shape(m))


def sample_heun(mean_fn, x_init, cfg, keep_states=False, rng=None, record=None):
    """Integrate from ``sigma_max`` to zero. ``x_init`` is already scaled by ``sigma_max``."""
    grid = sigma_grid(cfg)
    if rng is None:
        rng = rng_streams(cfg.seed)["churn"]
    x = np.asarray(x_init, dtype=np.float64)
    states = [x] if keep_states else None
    for t_cur, t_next in zip(grid[:-1], grid[1:]):
        if cfg.kind == "heun-stoch":
            x = heun_stochastic_step(x, t_cur, t_next, cfg, rng, mean_fn, cfg.steps)
        else:
            x = heun_step(x, t_cur, t_next, mean_fn)
        if keep_states:
            states.append(x)
    return Trajectory(times=list(grid), final=x, states=states, steps=record if record is not None else [])


def sample_ancestral(mean_fn, x_init, sched, rng, var_fn=None, keep_states=False):
    """Run ``x_T -> x_0`` with ``mean_fn(x, t)`` and optional ``var_fn(x, t) -> r2``."""
    x = np.asarray(x_init, dtype=np.float64)
    states = [x] if keep_states else None
    for t in range(sched.T, 0, -1):
        x0 = mean_fn(x, t)
        r2 = 0.0 if var_fn is None else var_fn(x, t)
        x = ddpm_ancestral_step(x, t, sched, x0, r2, rng)
        if keep_states:
            states.append(x)
    return Trajectory(times=list(range(sched.T, -1, -1)), final=x, states=states)


def solve_inverse_problem(meas, denoiser, g_cfg, s_cfg, batch=None, keep_states=False):
    """Sample from the guided sampler.

    ``batch`` (an int or tuple) draws that many independent samples at once;
    ``meas.y`` may carry matching leading axes to solve several problems.
    """
    streams = rng_streams(s_cfg.seed)
    shape = tuple(denoiser.shape)
    if batch is None:
        full = shape
    else:
        full = (tuple(int(b) for b in batch) if np.ndim(batch) else (int(batch),)) + shape
    records = []
    op = meas.operator

    def norm(r):
        axes = tuple(range(r.ndim - len(op.out_shape), r.ndim))
        return float(np.mean(np.sqrt(np.sum(r * r, axis=axes))))

    def guided(x, sigma, scale, t_label):
        res = conditional_mean(x, denoiser, meas, g_cfg, scale, sigma)
        records.append(StepRecord(
            t=float(t_label), sigma=float(sigma), residual=norm(meas.residual(res.x0)),
            state_residual=norm(meas.residual(x / scale)),
            cg_iterations=res.stats.iterations, covariance=res.covariance))
        return res.x0

    if s_cfg.kind == "ancestral":
        sched = s_cfg.schedule
        x_init = streams["init"].standard_normal(full)

        def mean_fn(x, t):
            scale = np.sqrt(sched.alpha_bar(t))
            sigma = np.sqrt(sched.beta_bar(t) / sched.alpha_bar(t))
            return guided(x, sigma, scale, t)

        traj = sample_ancestral(mean_fn, x_init, sched, streams["ancestral"], keep_states=keep_states)
    else:
        x_init = s_cfg.sigma_max * streams["init"].standard_normal(full)
        traj = sample_heun(lambda x, t: guided(x, t, 1.0, t), x_init, s_cfg,
                           keep_states=keep_states, rng=streams["churn"])
    traj.steps = records
    return traj

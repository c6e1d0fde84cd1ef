"""Forward noising, the noise-prediction training objective, and the
deterministic guided sampler.

The sampler integrates the probability-flow ODE in half-log-SNR time with
exponential-integrator steps: order 1 is the DDIM-equivalent Euler rule,
order 2 adds a midpoint correction. Step times snap to the discrete schedule
table so the model always sees integer step indices.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, NonFiniteError


@dataclass(frozen=True)
class NoiseSchedule:
    """Beta/alpha tables for t in [1, T]; index i holds step t = i + 1."""

    betas: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(self.alphas)

    def abar(self, t: int) -> float:
        self._check_t(t)
        return float(self.alpha_bars[t - 1])

    def signal_level(self, t: int) -> float:
        return float(np.sqrt(self.abar(t)))

    def noise_level(self, t: int) -> float:
        return float(np.sqrt(1.0 - self.abar(t)))

    def half_log_snr(self, t: int) -> float:
        ab = self.abar(t)
        return 0.5 * float(np.log(ab / (1.0 - ab)))

    def _check_t(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [1, {self.T}]")

    def validate(self) -> None:
        b = self.betas
        if not (np.all(b > 0.0) and np.all(b < 1.0)):
            raise ConfigurationError("betas must lie strictly in (0, 1)")
        if np.any(np.diff(b) < 0.0):
            raise ConfigurationError("betas must be nondecreasing")
        ab = self.alpha_bars
        if np.any(np.diff(ab) >= 0.0):
            raise ConfigurationError("alpha_bar must be strictly decreasing")


def linear_schedule(steps: int = 1000, beta_start: float = 1e-4, beta_end: float = 2e-2) -> NoiseSchedule:
    sched = NoiseSchedule(np.linspace(beta_start, beta_end, steps))
    sched.validate()
    return sched


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 25
    cfg_scale: float = 7.0
    order: int = 2
    # clamp the implied x0 estimate each step; keeps guided trajectories of a
    # small model inside the data cube
    clip_x0: bool = True

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigurationError("sampler needs at least one step")
        if self.cfg_scale < 0:
            raise ConfigurationError("cfg scale must be nonnegative")
        if self.order not in (1, 2):
            raise ConfigurationError("solver order must be 1 or 2")


def q_sample(x0: np.ndarray, t: int, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """Forward noising: x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    return schedule.signal_level(t) * x0 + schedule.noise_level(t) * eps


def predicted_x0(x_t: np.ndarray, t: int, eps_pred: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """Invert q_sample given a noise estimate."""
    return (x_t - schedule.noise_level(t) * eps_pred) / schedule.signal_level(t)


def training_loss(model, bank, x0: np.ndarray, cond, rng: np.random.Generator, schedule: NoiseSchedule):
    """Sample (t, eps) and return the squared-error noise-prediction loss."""
    t = int(rng.integers(1, schedule.T + 1))
    eps = rng.standard_normal(x0.shape)
    x_t = q_sample(x0, t, eps, schedule)
    pred = model.forward(x_t, t, cond, bank=bank)
    try:
        return T.tmean(T.square(T.sub(pred, T.Tensor(eps))))
    except NonFiniteError as exc:
        raise NonFiniteError(f"training loss diverged at t={t}: {exc}") from exc


def training_loss_batch(model, bank, batch, rng: np.random.Generator, schedule: NoiseSchedule):
    """Average the single-sample loss over a list of (x0, cond) pairs."""
    total = None
    for x0, cond in batch:
        loss = training_loss(model, bank, x0, cond, rng, schedule)
        total = loss if total is None else T.add(total, loss)
    return T.mul(total, 1.0 / len(batch))


def cfg_noise(model, bank, x_t: np.ndarray, t: int, c_cond, c_uncond, w: float) -> np.ndarray:
    """Classifier-free guidance: uncond + w * (cond - uncond)."""
    with T.no_grad():
        eps_c = model.forward(x_t, t, c_cond, bank=bank).data
        if w == 1.0:
            return eps_c
        eps_u = model.forward(x_t, t, c_uncond, bank=bank).data
    return eps_u + w * (eps_c - eps_u)


def _snap_timesteps(schedule: NoiseSchedule, steps: int) -> list[int]:
    """Integer timesteps whose half-log-SNR values are as uniform as possible
    between t = T and t = 1, descending, deduplicated."""
    lam = 0.5 * np.log(schedule.alpha_bars / (1.0 - schedule.alpha_bars))
    targets = np.linspace(lam[-1], lam[0], steps + 1)  # lam increases as t decreases
    out = []
    for target in targets:
        idx = int(np.argmin(np.abs(lam - target)))
        t = idx + 1
        if not out or t != out[-1]:
            out.append(t)
    return out  # descending in t


def solve_ode(noise_fn, x_init: np.ndarray, schedule: NoiseSchedule, steps: int, order: int) -> np.ndarray:
    """Integrate from x_T to t = 1, then replace the final state with its x0
    estimate. noise_fn(x, t) returns the epsilon prediction at integer t."""
    ts = _snap_timesteps(schedule, steps)
    lam = {t: schedule.half_log_snr(t) for t in range(1, schedule.T + 1)}
    x = x_init
    for step_idx in range(len(ts) - 1):
        t_cur, t_next = ts[step_idx], ts[step_idx + 1]
        h = lam[t_next] - lam[t_cur]
        a_cur, a_next = schedule.signal_level(t_cur), schedule.signal_level(t_next)
        sig_next = schedule.noise_level(t_next)
        eps_cur = noise_fn(x, t_cur)
        if order == 2:
            # midpoint in lambda, snapped to the table
            lam_mid = lam[t_cur] + 0.5 * h
            all_lam = 0.5 * np.log(schedule.alpha_bars / (1.0 - schedule.alpha_bars))
            t_mid = int(np.argmin(np.abs(all_lam - lam_mid))) + 1
            if t_mid != t_cur and t_mid != t_next:
                r1 = (lam[t_mid] - lam[t_cur]) / h
                a_mid = schedule.signal_level(t_mid)
                sig_mid = schedule.noise_level(t_mid)
                x_mid = (a_mid / a_cur) * x - sig_mid * np.expm1(r1 * h) * eps_cur
                eps_mid = noise_fn(x_mid, t_mid)
                eps_used = eps_cur + (0.5 / r1) * (eps_mid - eps_cur)
            else:
                eps_used = eps_cur
        else:
            eps_used = eps_cur
        x = (a_next / a_cur) * x - sig_next * np.expm1(h) * eps_used
        if not np.all(np.isfinite(x)):
            raise NonFiniteError(f"sampler diverged stepping from t={t_cur} to t={t_next}")
    t_last = ts[-1]
    return predicted_x0(x, t_last, noise_fn(x, t_last), schedule)


def sample(
    model,
    bank,
    c_cond,
    c_uncond,
    schedule: NoiseSchedule,
    config: SamplerConfig,
    seed: int,
) -> np.ndarray:
    """Draw one image deterministically from the given seed; clamped to [-1, 1]."""
    cfg = model.config
    rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, 0x5A11]))
    x_init = rng.standard_normal((cfg.in_channels, cfg.image_size, cfg.image_size))

    def noise_fn(x, t):
        eps = cfg_noise(model, bank, x, t, c_cond, c_uncond, config.cfg_scale)
        if config.clip_x0:
            x0_hat = np.clip(predicted_x0(x, t, eps, schedule), -1.0, 1.0)
            eps = (x - schedule.signal_level(t) * x0_hat) / schedule.noise_level(t)
        return eps

    out = solve_ode(noise_fn, x_init, schedule, config.steps, config.order)
    return np.clip(out, -1.0, 1.0)

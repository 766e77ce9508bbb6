"""Noise schedule, forward noising, posterior stepping and ancestral sampling.

Steps are 1-indexed (t = 1..T) everywhere in the public API; the schedule
arrays are stored 0-indexed, so ``beta[t - 1]`` is the variance added at step t.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..core import IdentityRemovedSignal, VelocitySignal
from ..embedding import cosine_similarity
from ..errors import ConfigError, NumericError, StepError

DEFAULT_STEPS = 50
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.05


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def check_step(self, t: int) -> int:
        if not 1 <= int(t) <= self.T:
            raise StepError(f"step {t} outside [1, {self.T}]")
        return int(t)

    def alpha_bar_at(self, t: int) -> float:
        """Cumulative retention; t = 0 means the clean signal (1.0)."""
        return 1.0 if t == 0 else float(self.alpha_bar[t - 1])

    def sigma(self, t: int, variance: str = "beta_tilde") -> float:
        t = self.check_step(t)
        if t == 1:
            return 0.0
        beta = float(self.beta[t - 1])
        if variance == "beta":
            return float(np.sqrt(beta))
        if variance != "beta_tilde":
            raise ConfigError(f"unknown reverse variance {variance!r}")
        return float(np.sqrt(beta * (1.0 - self.alpha_bar_at(t - 1)) / (1.0 - self.alpha_bar_at(t))))


@dataclass
class NoisyState:
    xt: np.ndarray
    t: int


@dataclass
class Conditioning:
    v0: np.ndarray
    z: np.ndarray

    def __post_init__(self):
        if isinstance(self.v0, IdentityRemovedSignal):
            self.v0 = self.v0.stacked
        self.v0 = np.asarray(self.v0, dtype=float)
        self.z = np.asarray(self.z, dtype=float)


def schedule_from_betas(beta) -> NoiseSchedule:
    beta = np.asarray(beta, dtype=float)
    if beta.ndim != 1 or len(beta) < 1 or np.any(beta <= 0) or np.any(beta >= 1):
        raise ConfigError("every beta must lie strictly inside (0, 1)")
    alpha = 1.0 - beta
    return NoiseSchedule(len(beta), beta, alpha, np.cumprod(alpha))


def linear_schedule(T: int = DEFAULT_STEPS, beta_start: float = DEFAULT_BETA_START,
                    beta_end: float = DEFAULT_BETA_END) -> NoiseSchedule:
    if T < 1:
        raise ConfigError(f"T must be >= 1, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    return schedule_from_betas(np.linspace(beta_start, beta_end, T))


def forward_noising(x0, t: int, eps, sched: NoiseSchedule) -> NoisyState:
    t = sched.check_step(t)
    x0 = np.asarray(x0, dtype=float)
    eps = np.asarray(eps, dtype=float)
    if x0.shape != eps.shape:
        raise ConfigError(f"shape mismatch: x0 {x0.shape} vs eps {eps.shape}")
    ab = sched.alpha_bar_at(t)
    return NoisyState(np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps, t)


def predict_x0(state: NoisyState, eps_hat, sched: NoiseSchedule) -> np.ndarray:
    ab = sched.alpha_bar_at(sched.check_step(state.t))
    return (state.xt - np.sqrt(1.0 - ab) * np.asarray(eps_hat, dtype=float)) / np.sqrt(ab)


def reverse_step(state: NoisyState, eps_hat, noise, sched: NoiseSchedule,
                 variance: str = "beta_tilde") -> NoisyState:
    """One ancestral step x_t -> x_{t-1}; ``noise`` is supplied by the caller."""
    t = sched.check_step(state.t)
    beta = float(sched.beta[t - 1])
    alpha = float(sched.alpha[t - 1])
    ab = sched.alpha_bar_at(t)
    mean = (state.xt - beta / np.sqrt(1.0 - ab) * np.asarray(eps_hat, dtype=float)) / np.sqrt(alpha)
    sigma = sched.sigma(t, variance)
    if sigma:
        mean = mean + sigma * np.asarray(noise, dtype=float)
    return NoisyState(mean, t - 1)


def sample(denoiser, cond: Conditioning, sched: NoiseSchedule, rng_seed: int,
           length: int | None = None, scale: float = 1.0,
           variance: str = "beta_tilde") -> VelocitySignal:
    """Ancestral sampling from x_T ~ N(0, I) down to x_0.

    RNG draw order: x_T first, then one standard-normal tensor per step for
    t = T..2 (the final step is noiseless). The result is multiplied by
    ``scale`` to undo the model's velocity normalization.
    """
    rng = np.random.default_rng(rng_seed)
    shape = (2, length if length is not None else cond.v0.shape[-1])
    state = NoisyState(rng.standard_normal(shape), sched.T)
    while state.t >= 1:
        eps_hat = np.asarray(denoiser(state.xt, state.t, cond), dtype=float)
        if eps_hat.shape != shape:
            raise ConfigError(f"denoiser returned shape {eps_hat.shape}, expected {shape}")
        if not np.all(np.isfinite(eps_hat)):
            raise NumericError(f"non-finite denoiser output at step {state.t}")
        noise = rng.standard_normal(shape) if state.t > 1 else np.zeros(shape)
        state = reverse_step(state, eps_hat, noise, sched, variance)
    return VelocitySignal.from_array(state.xt * scale)


def loss(eps, eps_hat, v, v_hat, lam: float, encoder) -> float:
    """Noise-prediction MSE plus ``lam`` times the embedding cosine distance."""
    if lam < 0:
        raise ConfigError("lambda must be non-negative")
    eps = np.asarray(eps, dtype=float)
    eps_hat = np.asarray(eps_hat, dtype=float)
    mse = float(np.mean((eps - eps_hat) ** 2))
    if lam == 0:
        return mse
    return mse + lam * (1.0 - cosine_similarity(encoder(v_hat), encoder(v)))

"""Denoising-diffusion core: noise schedules, energy-adaptive prior, the
forward noising identity, the weighted training loss and the reverse update.

Step indices `t` are 1-based (1..T) everywhere in this module; internal tables
are stored 0-based.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .audio import AudioBuffer, MelSpectrogram
from .errors import ConfigError, ShapeError, StepError

SIGMA_FLOOR = 0.1
SIGMA_CEILING = 1.0


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step noise tables. posterior_sigma2[0] is 0 by the alpha_bar_0 = 1
    convention; kappa holds the full-ELBO weights (unused by the simplified
    training loss, stored for completeness)."""

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    posterior_sigma2: np.ndarray
    kappa: np.ndarray

    @property
    def num_steps(self) -> int:
        return len(self.betas)

    def check_step(self, t: int) -> None:
        if not 1 <= t <= self.num_steps:
            raise StepError(f"step {t} outside schedule range 1..{self.num_steps}")


def make_schedule(betas) -> NoiseSchedule:
    betas = np.asarray(betas, dtype=np.float64)
    if betas.ndim != 1 or betas.size == 0:
        raise ConfigError("betas must be a non-empty 1-D sequence")
    if np.any(betas <= 0.0) or np.any(betas >= 1.0):
        raise ConfigError("every beta must lie in (0, 1)")
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    prev_bars = np.concatenate(([1.0], alpha_bars[:-1]))
    posterior_sigma2 = (1.0 - prev_bars) / (1.0 - alpha_bars) * betas
    kappa = np.empty_like(betas)
    kappa[0] = 1.0 / (2.0 * alphas[0])  # the t=1 ELBO weight has its own form
    kappa[1:] = betas[1:] / (2.0 * alphas[1:] * (1.0 - prev_bars[1:]))
    return NoiseSchedule(betas, alphas, alpha_bars, posterior_sigma2, kappa)


def linear_betas(start: float, end: float, num_steps: int) -> np.ndarray:
    if num_steps < 1:
        raise ConfigError("num_steps must be >= 1")
    return np.linspace(start, end, num_steps)


@dataclass(frozen=True)
class AdaptivePrior:
    """Per-sample Gaussian standard deviations driven by mel-frame energy."""

    sigma: np.ndarray
    floor: float
    ceiling: float
    sample_rate: int

    def __post_init__(self):
        sigma = np.asarray(self.sigma, dtype=np.float64)
        if np.any(sigma < self.floor - 1e-12) or np.any(sigma > self.ceiling + 1e-12):
            raise ValueError("sigma outside [floor, ceiling]")
        object.__setattr__(self, "sigma", sigma)

    def __len__(self) -> int:
        return len(self.sigma)


def compute_prior(
    mel: MelSpectrogram,
    target_len: int,
    hop: int,
    mel_floor: float = 1e-5,
    sigma_floor: float = SIGMA_FLOOR,
    sigma_ceiling: float = SIGMA_CEILING,
) -> AdaptivePrior:
    """Frame energies -> per-sample sigma by hold expansion.

    sigma = clip(sqrt(E / max E), floor, ceiling), so the loudest frame has
    sigma = 1. An all-silent spectrogram (every frame at the log floor) skips
    the normalization and floors everywhere instead of amplifying silence.
    """
    needed = -(-target_len // hop)
    if mel.n_frames < needed - 1:
        raise ConfigError(f"{mel.n_frames} mel frames cannot cover {needed} hops")
    if mel.sample_rate * hop % mel.hop_length != 0:
        raise ConfigError(f"hop {hop} is not an integer rescale of mel hop {mel.hop_length}")
    rate = mel.sample_rate * hop // mel.hop_length
    energy = np.exp(mel.frames).sum(axis=1)
    silent_energy = mel.n_mels * mel_floor
    if energy.max() <= silent_energy * (1.0 + 1e-6):
        sigma_frames = np.full(len(energy), sigma_floor)
    else:
        sigma_frames = np.clip(np.sqrt(energy / energy.max()), sigma_floor, sigma_ceiling)
    sigma = np.repeat(sigma_frames, hop)
    if len(sigma) < target_len:  # tolerate the one-frame shortfall allowed above
        sigma = np.concatenate([sigma, np.full(target_len - len(sigma), sigma[-1])])
    return AdaptivePrior(sigma[:target_len], sigma_floor, sigma_ceiling, rate)


def sample_prior(prior: AdaptivePrior, rng: np.random.Generator) -> AudioBuffer:
    noise = rng.standard_normal(len(prior)) * prior.sigma
    return AudioBuffer(noise, prior.sample_rate)


def forward_diffuse(
    x0: AudioBuffer, t: int, eps: AudioBuffer, sched: NoiseSchedule
) -> AudioBuffer:
    """x_t = sqrt(abar_t) x_0 + sqrt(1 - abar_t) eps, elementwise."""
    sched.check_step(t)
    if len(x0) != len(eps):
        raise ShapeError(f"x0 length {len(x0)} != eps length {len(eps)}")
    abar = sched.alpha_bars[t - 1]
    return AudioBuffer(
        np.sqrt(abar) * x0.samples + np.sqrt(1.0 - abar) * eps.samples, x0.sample_rate
    )


def weighted_loss(eps: AudioBuffer, eps_hat: AudioBuffer, prior: AdaptivePrior) -> float:
    """Mean of squared residuals weighted by 1/sigma^2 (identity prior -> MSE)."""
    if len(eps) != len(eps_hat):
        raise ShapeError(f"eps length {len(eps)} != eps_hat length {len(eps_hat)}")
    residual = eps.samples - eps_hat.samples
    return float(np.mean(residual**2 / prior.sigma[: len(residual)] ** 2))


def reverse_step(
    x_t: AudioBuffer, eps_hat: AudioBuffer, t: int, sched: NoiseSchedule, z: AudioBuffer
) -> AudioBuffer:
    """One reverse transition:
    x_{t-1} = (x_t - beta_t/sqrt(1-abar_t) * eps_hat) / sqrt(alpha_t) + sigma_t z.
    """
    sched.check_step(t)
    if not (len(x_t) == len(eps_hat) == len(z)):
        raise ShapeError(
            f"length mismatch: x_t={len(x_t)}, eps_hat={len(eps_hat)}, z={len(z)}"
        )
    if t == 1 and np.any(z.samples):
        raise ValueError("the final step (t=1) must use z = 0")
    beta = sched.betas[t - 1]
    alpha = sched.alphas[t - 1]
    abar = sched.alpha_bars[t - 1]
    sigma = np.sqrt(sched.posterior_sigma2[t - 1])
    mean = (x_t.samples - beta / np.sqrt(1.0 - abar) * eps_hat.samples) / np.sqrt(alpha)
    return AudioBuffer(mean + sigma * z.samples, x_t.sample_rate)

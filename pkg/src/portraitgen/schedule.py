"""Linear-beta noise schedule, closed-form noising and one-step reversal.

Timesteps are 1-indexed at every public entry point (``1 <= t <= T``) and
mapped to 0-indexed table rows internally.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    alphas: np.ndarray
    alpha_bars: np.ndarray
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def alpha_bar(self, t) -> np.ndarray:
        """Cumulative product at 1-indexed step(s) ``t``."""
        idx = np.asarray(t)
        if np.any(idx < 1) or np.any(idx > self.T):
            raise ValueError(f"timestep out of range [1, {self.T}]: {t}")
        return self.alpha_bars[idx - 1]

    def sigma(self, t) -> np.ndarray:
        """Noise-to-signal ratio sqrt((1 - abar) / abar)."""
        ab = self.alpha_bar(t)
        return np.sqrt((1.0 - ab) / ab)

    def to_config(self) -> dict:
        return {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end}


def build_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, int(T), dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    alphas.setflags(write=False)
    alpha_bars.setflags(write=False)
    return NoiseSchedule(int(T), alphas, alpha_bars, float(beta_start), float(beta_end))


def _coefficients(t, sched: NoiseSchedule, like: torch.Tensor):
    """sqrt(abar_t) and sqrt(1 - abar_t) shaped to broadcast against ``like``.

    ``t`` may be an int or a 1-D batch of ints matching ``like``'s first axis.
    """
    ab = sched.alpha_bar(np.asarray(t))
    a = torch.as_tensor(np.sqrt(ab), dtype=like.dtype)
    s = torch.as_tensor(np.sqrt(1.0 - ab), dtype=like.dtype)
    if a.ndim == 1:
        shape = (-1,) + (1,) * (like.ndim - 1)
        a, s = a.reshape(shape), s.reshape(shape)
    return a, s


def forward_noise(z0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """z_t = sqrt(abar_t) z_0 + sqrt(1 - abar_t) eps."""
    if z0.shape != eps.shape:
        raise ValueError(f"shape mismatch: {tuple(z0.shape)} vs {tuple(eps.shape)}")
    a, s = _coefficients(t, sched, z0)
    return a * z0 + s * eps


def one_step_reverse(zt: torch.Tensor, eps_pred: torch.Tensor, t, sched: NoiseSchedule) -> torch.Tensor:
    """Estimate z_0 from z_t and a noise prediction; exact inverse of forward_noise."""
    if zt.shape != eps_pred.shape:
        raise ValueError(f"shape mismatch: {tuple(zt.shape)} vs {tuple(eps_pred.shape)}")
    a, s = _coefficients(t, sched, zt)
    return (zt - s * eps_pred) / a


def noise_step(z_prev: torch.Tensor, t: int, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Single Markov transition z_{t-1} -> z_t."""
    if not 1 <= t <= sched.T:
        raise ValueError(f"timestep out of range [1, {sched.T}]: {t}")
    alpha = float(sched.alphas[t - 1])
    return np.sqrt(alpha) * z_prev + np.sqrt(1.0 - alpha) * eps

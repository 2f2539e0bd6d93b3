"""
DDPM noise schedule, closed-form forward noising and the ancestral reverse step.

    x_t     = sqrt(abar_t) x_0 + sqrt(1 - abar_t) eps
    x_{t-1} = (x_t - beta_t / sqrt(1 - abar_t) eps_pred) / sqrt(alpha_t) + sqrt(beta_t) n

Timesteps are 0-indexed: t in [0, T).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ArgumentError, ConfigError


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    # original timestep each index corresponds to; identity unless respaced
    timesteps: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)

    def check(self):
        n = len(self.betas)
        if not (len(self.alphas) == len(self.alpha_bars) == n):
            raise ConfigError("schedule arrays differ in length")
        if not np.all((self.betas > 0) & (self.betas < 1)):
            raise ConfigError("betas must lie in (0, 1)")
        if n > 1 and not np.all(np.diff(self.alpha_bars) < 0):
            raise ConfigError("alpha_bars must be strictly decreasing")

    def respace(self, steps: int) -> "NoiseSchedule":
        """Schedule over ``steps`` evenly strided timesteps of this one.

        The strided chain keeps the same abar values at the kept timesteps;
        betas are re-derived as 1 - abar_i / abar_{i-1}.
        """
        if steps < 1 or steps > self.T:
            raise ArgumentError(f"steps must be in [1, {self.T}], got {steps}")
        if steps == self.T:
            return self
        keep = np.unique(np.round(np.linspace(0, self.T - 1, steps)).astype(np.int64))
        abar = self.alpha_bars[keep]
        prev = np.concatenate([[1.0], abar[:-1]])
        alphas = abar / prev
        return NoiseSchedule(1.0 - alphas, alphas, abar, self.timesteps[keep])


def build_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise ConfigError(f"T must be a positive integer, got {T!r}", key="T")
    if not (0 < beta_start <= beta_end < 1):
        raise ConfigError(
            f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}", key="beta_start"
        )
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    s = NoiseSchedule(betas, alphas, np.cumprod(alphas), np.arange(T))
    s.check()
    return s


def _check_t(t, s: NoiseSchedule):
    tt = torch.as_tensor(t)
    if tt.numel() == 0 or int(tt.min()) < 0 or int(tt.max()) >= s.T:
        raise ArgumentError(f"timestep {t} outside [0, {s.T})")
    return tt.long()


def _coef(values: np.ndarray, t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    c = torch.as_tensor(values, dtype=torch.float64)[t].to(like.dtype)
    if c.ndim == 0:
        return c
    # per-sample timesteps broadcast over C, H, W
    return c.view(-1, *([1] * (like.ndim - 1)))


def add_noise(z0: torch.Tensor, eps: torch.Tensor, t, s: NoiseSchedule) -> torch.Tensor:
    if z0.shape != eps.shape:
        raise ArgumentError(f"shape mismatch: z0 {tuple(z0.shape)} vs eps {tuple(eps.shape)}")
    t = _check_t(t, s)
    return _coef(np.sqrt(s.alpha_bars), t, z0) * z0 + _coef(np.sqrt(1.0 - s.alpha_bars), t, z0) * eps


def ddpm_step(
    z_t: torch.Tensor,
    eps_pred: torch.Tensor,
    t: int,
    s: NoiseSchedule,
    generator=None,
) -> torch.Tensor:
    """One ancestral step at schedule index ``t`` with variance beta_t.

    ``generator`` is a ``torch.Generator`` or, for a batch, a list holding
    one generator per sample so each sample's noise stream is independent
    of what else shares the batch.
    """
    if z_t.shape != eps_pred.shape:
        raise ArgumentError(f"shape mismatch: z_t {tuple(z_t.shape)} vs eps_pred {tuple(eps_pred.shape)}")
    if not 0 <= int(t) < s.T:
        raise ArgumentError(f"timestep {t} outside [0, {s.T})")
    t = int(t)
    beta, alpha, abar = s.betas[t], s.alphas[t], s.alpha_bars[t]
    if abar >= 1.0:
        # degenerate noiseless step
        return z_t.clone()
    mean = (z_t - (beta / np.sqrt(1.0 - abar)) * eps_pred) / np.sqrt(alpha)
    if t == 0:
        return mean
    return mean + np.sqrt(beta) * draw_noise(z_t.shape, generator, z_t.dtype)


def draw_noise(shape, generator=None, dtype=torch.float32) -> torch.Tensor:
    if isinstance(generator, (list, tuple)):
        if len(generator) != shape[0]:
            raise ArgumentError(f"{len(generator)} generators for batch of {shape[0]}")
        return torch.stack([torch.randn(shape[1:], generator=g, dtype=dtype) for g in generator])
    return torch.randn(shape, generator=generator, dtype=dtype)

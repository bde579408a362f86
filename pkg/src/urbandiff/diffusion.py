"""DDPM schedule and closed-form forward/reverse quantities.

Timesteps are 1-based: ``t = 1..T`` are noisy states and ``t = 0`` is the
clean sample. Schedule arrays are stored in float64 and indexed with
``t - 1``; the helpers :meth:`NoiseSchedule.alpha_bar` etc. accept the
physical timestep directly and return ``1.0`` for ``t = 0``.

Grids are torch tensors of shape ``(H, W)`` or ``(B, H, W)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .errors import DomainError, ParameterError, ShapeError


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    posterior_vars: np.ndarray

    @property
    def total_steps(self) -> int:
        return len(self.betas)

    def alpha_bar(self, t: int) -> float:
        """Cumulative product up to physical step ``t`` (1.0 at ``t = 0``)."""
        self._check(t, allow_zero=True)
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])

    def beta(self, t: int) -> float:
        self._check(t)
        return float(self.betas[t - 1])

    def alpha(self, t: int) -> float:
        self._check(t)
        return float(self.alphas[t - 1])

    def posterior_var(self, t: int) -> float:
        self._check(t)
        return float(self.posterior_vars[t - 1])

    def _check(self, t: int, allow_zero: bool = False) -> None:
        lo = 0 if allow_zero else 1
        if not lo <= t <= self.total_steps:
            raise DomainError(f"timestep {t} outside [{lo}, {self.total_steps}]")


@dataclass
class NoisySample:
    values: torch.Tensor
    timestep: int
    noise_used: Optional[torch.Tensor] = None


def build_linear_schedule(
    total_steps: int = 1000, beta_start: float = 1e-4, beta_end: float = 2e-2
) -> NoiseSchedule:
    if total_steps < 1:
        raise ParameterError("total_steps must be >= 1")
    if not 0.0 < beta_start < 1.0:
        raise ParameterError("beta_start must lie in (0, 1)")
    if not 0.0 < beta_end < 1.0:
        raise ParameterError("beta_end must lie in (0, 1)")
    if beta_start > beta_end:
        raise ParameterError("beta_start must not exceed beta_end")

    betas = np.linspace(beta_start, beta_end, total_steps, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    prev = np.concatenate([[1.0], alpha_bars[:-1]])
    posterior_vars = betas * (1.0 - prev) / (1.0 - alpha_bars)
    posterior_vars[0] = 0.0
    return NoiseSchedule(betas, alphas, alpha_bars, posterior_vars)


def _same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")


def forward_sample(
    x0: torch.Tensor,
    t: int,
    schedule: NoiseSchedule,
    noise: Optional[torch.Tensor] = None,
    generator: Optional[torch.Generator] = None,
) -> NoisySample:
    """Corrupt ``x0`` directly to step ``t``.

    If ``noise`` is omitted it is drawn from ``generator``.
    """
    if not 1 <= t <= schedule.total_steps:
        raise DomainError(f"timestep {t} outside [1, {schedule.total_steps}]")
    if noise is None:
        noise = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    _same_shape(x0, noise, "forward_sample")
    ab = schedule.alpha_bar(t)
    values = ab**0.5 * x0 + (1.0 - ab) ** 0.5 * noise
    return NoisySample(values, t, noise)


def predict_clean(xt: NoisySample, eps_hat: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """One-step clean estimate ``(x_t - sqrt(1 - abar) eps) / sqrt(abar)``."""
    if xt.timestep < 1:
        raise DomainError("predict_clean needs timestep >= 1")
    _same_shape(xt.values, eps_hat, "predict_clean")
    return clean_estimate(xt.values, eps_hat, xt.timestep, schedule)


def clean_estimate(x: torch.Tensor, eps: torch.Tensor, t: int, schedule: NoiseSchedule) -> torch.Tensor:
    # differentiable in x and eps; used inside the guidance loss
    ab = schedule.alpha_bar(t)
    return (x - (1.0 - ab) ** 0.5 * eps) / ab**0.5


def posterior_step(
    xt: NoisySample,
    eps_hat: torch.Tensor,
    schedule: NoiseSchedule,
    noise: Optional[torch.Tensor] = None,
    prev_t: Optional[int] = None,
) -> NoisySample:
    """Ancestral reverse step from ``t`` to ``prev_t`` (default ``t - 1``).

    For a skip ``t -> s`` the per-step rate is replaced by
    ``1 - abar_t / abar_s``; with ``s = t - 1`` this is the usual DDPM
    transition. The variance term is dropped when ``s = 0`` and when
    ``noise`` is None.
    """
    t = xt.timestep
    if t < 1:
        raise DomainError("posterior_step needs timestep >= 1")
    s = t - 1 if prev_t is None else prev_t
    if not 0 <= s < t:
        raise DomainError(f"prev_t {s} must lie in [0, {t})")
    _same_shape(xt.values, eps_hat, "posterior_step")
    if noise is not None:
        _same_shape(xt.values, noise, "posterior_step noise")

    ab_t = schedule.alpha_bar(t)
    ab_s = schedule.alpha_bar(s)
    alpha_ts = ab_t / ab_s
    beta_ts = 1.0 - alpha_ts
    mean = (xt.values - beta_ts / (1.0 - ab_t) ** 0.5 * eps_hat) / alpha_ts**0.5
    if s > 0 and noise is not None:
        var = beta_ts * (1.0 - ab_s) / (1.0 - ab_t)
        mean = mean + var**0.5 * noise
    return NoisySample(mean, s, noise)

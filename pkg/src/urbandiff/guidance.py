"""Guided reverse diffusion for gap filling.

At every scheduled timestep ``t`` the iterate goes through

1. supervised refinement (only when ``t % stride == 0``): ``G`` gradient
   steps ``x <- x - step_size * grad_x l`` where ``l`` is the summed squared
   error between the one-step clean estimate and the observations on the
   revealed pixels;
2. projection: revealed pixels are overwritten with the observations
   noised to level ``t``;
3. a reverse step to the next scheduled timestep, either ancestral DDPM or
   DPM-Solver++ (multistep, data prediction).

The returned grid is ``x0 * M + x0_hat * (1 - M)``, so revealed pixels are
reproduced exactly. All grids are in normalised units.
"""

from __future__ import annotations

import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import torch

from .denoiser import ConditioningStack, predict_noise
from .diffusion import NoiseSchedule, NoisySample, clean_estimate, posterior_step
from .errors import GuidanceError, ParameterError, ShapeError

log = logging.getLogger(__name__)

SOLVERS = ("ancestral", "high_order")


@dataclass(frozen=True)
class InferenceConfig:
    infer_steps: int = 70
    guidance_stride: int = 1
    grad_steps: int = 1
    grad_step_size: float = 10.0
    solver: str = "ancestral"
    solver_order: int = 3
    exact_gradient: bool = True
    backtrack: int = 16
    stochastic: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.infer_steps < 1:
            raise ParameterError("infer_steps must be >= 1")
        if self.guidance_stride < 1:
            raise ParameterError("guidance_stride must be >= 1")
        if self.grad_steps < 0:
            raise ParameterError("grad_steps must be >= 0")
        if self.solver not in SOLVERS:
            raise ParameterError(f"solver must be one of {SOLVERS}")
        if self.backtrack < 0:
            raise ParameterError("backtrack must be >= 0")
        if not 1 <= self.solver_order <= 3:
            raise ParameterError("solver_order must be 1, 2 or 3")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MaskedScene:
    """Observations ``x0 * M`` with mask ``M`` (1 = revealed), shape ``(H, W)`` or ``(B, H, W)``."""

    observed: torch.Tensor
    mask: torch.Tensor
    cond: ConditioningStack
    truth: Optional[torch.Tensor] = None

    def __post_init__(self):
        self.mask = self.mask.to(self.observed.dtype)
        if self.observed.shape[-2:] != self.mask.shape[-2:]:
            raise ShapeError("observed and mask shapes differ")
        if not torch.all((self.mask == 0) | (self.mask == 1)):
            raise ValueError("mask must be binary")
        self.observed = self.observed * self.mask

    @classmethod
    def from_truth(cls, truth: torch.Tensor, mask, cond: ConditioningStack) -> "MaskedScene":
        mask = torch.as_tensor(mask).to(truth.dtype)
        return cls(truth * mask, mask, cond, truth)


@dataclass
class InpaintResult:
    recon: torch.Tensor
    clean_estimate: torch.Tensor
    timesteps: list
    refinement_phases: int = 0
    gradient_steps: int = 0
    denoiser_calls: int = 0
    seconds: float = 0.0


def build_trailing_schedule(total_train: int, infer_steps: int) -> list[int]:
    """Physical timesteps ``round(T - k*T/n)`` for ``k = 0..n-1``; starts at ``T``."""
    if not 1 <= infer_steps <= total_train:
        raise ParameterError(f"need 1 <= infer_steps ({infer_steps}) <= total_train ({total_train})")
    steps = np.round(total_train - np.arange(infer_steps) * (total_train / infer_steps)).astype(int)
    return [int(s) for s in steps]


def masked_loss(x0_hat: torch.Tensor, masked: MaskedScene) -> torch.Tensor:
    return ((x0_hat * masked.mask - masked.observed) ** 2).sum()


def _per_sample_loss(x0_hat: torch.Tensor, masked: MaskedScene) -> torch.Tensor:
    err = (x0_hat * masked.mask - masked.observed) ** 2
    return err.reshape(-1, *err.shape[-2:]).sum(dim=(-2, -1))


def _loss_and_grad(xt, masked, model, schedule, t, exact_gradient):
    if exact_gradient:
        with torch.enable_grad():
            x = xt.detach().requires_grad_(True)
            eps = predict_noise(model, x, masked.cond, t)
            per = _per_sample_loss(clean_estimate(x, eps, t, schedule), masked)
            (grad,) = torch.autograd.grad(per.sum(), x)
        return per.detach(), grad
    with torch.no_grad():
        eps = predict_noise(model, xt, masked.cond, t)
        resid = clean_estimate(xt, eps, t, schedule) * masked.mask - masked.observed
        per = (resid**2).reshape(-1, *resid.shape[-2:]).sum(dim=(-2, -1))
        grad = 2.0 * resid * masked.mask / schedule.alpha_bar(t) ** 0.5
    return per, grad


def refine_step(
    xt: torch.Tensor,
    masked: MaskedScene,
    model,
    schedule: NoiseSchedule,
    t: int,
    step_size: float,
    exact_gradient: bool = True,
    backtrack: int = 0,
    shrink: float = 0.25,
) -> tuple[torch.Tensor, float, int]:
    """One supervised gradient step ``x_t - step_size * grad``.

    With ``backtrack > 0`` the step is shrunk by ``shrink`` (per sample, at
    most ``backtrack`` times) until the loss at the new point does not exceed
    the loss at ``x_t``; a sample that never improves keeps ``x_t``. Returns
    the new iterate, the loss at ``x_t`` and the extra denoiser evaluations.
    """
    loss, grad = _loss_and_grad(xt, masked, model, schedule, t, exact_gradient)
    if not torch.isfinite(grad).all():
        raise GuidanceError(f"non-finite guidance gradient at timestep {t}")
    if backtrack <= 0 or step_size == 0:
        return (xt - step_size * grad).detach(), float(loss.sum()), 0

    batch_shape = xt.shape[:-2]
    grad_b = grad.reshape(-1, *xt.shape[-2:])
    x_b = xt.detach().reshape(-1, *xt.shape[-2:])
    size = torch.full((x_b.shape[0],), float(step_size), dtype=xt.dtype)
    pending = torch.ones(x_b.shape[0], dtype=torch.bool)
    out = x_b.clone()
    evals = 0
    for _ in range(backtrack + 1):
        trial = (x_b - size[:, None, None] * grad_b).reshape(xt.shape)
        with torch.no_grad():
            eps = predict_noise(model, trial, masked.cond, t)
            new = _per_sample_loss(clean_estimate(trial, eps, t, schedule), masked)
        evals += 1
        ok = pending & torch.isfinite(new) & (new <= loss)
        out[ok] = trial.reshape(-1, *xt.shape[-2:])[ok]
        pending &= ~ok
        if not pending.any():
            break
        size = torch.where(pending, size * shrink, size)
    return out.reshape(*batch_shape, *xt.shape[-2:]), float(loss.sum()), evals


def project_revealed(
    xt_refined: torch.Tensor,
    masked: MaskedScene,
    t: int,
    schedule: NoiseSchedule,
    generator: Optional[torch.Generator] = None,
    noise: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Overwrite revealed pixels with the observations noised to level ``t``."""
    if t < 1:
        raise ParameterError("projection needs t >= 1")
    if noise is None:
        noise = torch.randn(xt_refined.shape, generator=generator, dtype=xt_refined.dtype)
    ab = schedule.alpha_bar(t)
    noised_obs = ab**0.5 * masked.observed + (1.0 - ab) ** 0.5 * noise
    return noised_obs * masked.mask + xt_refined * (1.0 - masked.mask)


class DPMSolverPP:
    """Multistep DPM-Solver++ in data-prediction form over a given timestep list."""

    def __init__(self, schedule: NoiseSchedule, order: int = 3):
        self.schedule = schedule
        self.order = order
        self.history: list[tuple[float, torch.Tensor]] = []

    def _coef(self, t):
        ab = self.schedule.alpha_bar(t)
        a, s = math.sqrt(ab), math.sqrt(1.0 - ab)
        return a, s, math.log(a) - math.log(s)

    def step(self, x: torch.Tensor, x0_pred: torch.Tensor, t: int, s: int) -> torch.Tensor:
        a_t, sig_t, lam_t = self._coef(t)
        self.history.append((lam_t, x0_pred))
        if s == 0:
            return x0_pred
        a_s, sig_s, lam_s = self._coef(s)
        h = lam_s - lam_t
        em = math.expm1(-h)  # e^{-h} - 1
        order = min(self.order, len(self.history))
        d0 = x0_pred
        out = (sig_s / sig_t) * x - a_s * em * d0
        if order >= 2:
            lam1, m1 = self.history[-2]
            r0 = (lam_t - lam1) / h
            d1_0 = (d0 - m1) / r0
            if order == 2:
                out = out - 0.5 * a_s * em * d1_0
            else:
                lam2, m2 = self.history[-3]
                r1 = (lam1 - lam2) / h
                d1_1 = (m1 - m2) / r1
                d1 = d1_0 + (r0 / (r0 + r1)) * (d1_0 - d1_1)
                d2 = (d1_0 - d1_1) / (r0 + r1)
                out = out + a_s * (em / h + 1.0) * d1 - a_s * ((em + h) / h**2 - 0.5) * d2
        return out


def run_inpainting(
    masked: MaskedScene,
    model,
    schedule: NoiseSchedule,
    cfg: InferenceConfig,
) -> InpaintResult:
    if cfg.infer_steps < 1:
        raise ParameterError("infer_steps must be >= 1")
    if cfg.infer_steps > schedule.total_steps:
        raise ParameterError("infer_steps exceeds the training schedule length")
    if masked.mask.sum() == 0:
        warnings.warn("mask reveals no pixels; reconstruction is unconditional", RuntimeWarning)

    steps = build_trailing_schedule(schedule.total_steps, cfg.infer_steps)
    gen = torch.Generator().manual_seed(cfg.seed)
    dtype = masked.observed.dtype
    x = torch.randn(masked.observed.shape, generator=gen, dtype=dtype)
    solver = DPMSolverPP(schedule, cfg.solver_order) if cfg.solver == "high_order" else None

    phases = grads = calls = 0
    start = time.perf_counter()
    for k, t in enumerate(steps):
        s = steps[k + 1] if k + 1 < len(steps) else 0
        if cfg.grad_steps > 0 and t % cfg.guidance_stride == 0:
            phases += 1
            for _ in range(cfg.grad_steps):
                x, _, extra = refine_step(
                    x, masked, model, schedule, t, cfg.grad_step_size, cfg.exact_gradient, cfg.backtrack
                )
                grads += 1
                calls += 1 + extra
        x = project_revealed(x, masked, t, schedule, gen)
        with torch.no_grad():
            eps = predict_noise(model, x, masked.cond, t)
        calls += 1
        x0_hat = clean_estimate(x, eps, t, schedule)
        if solver is not None:
            x = solver.step(x, x0_hat, t, s)
        else:
            z = torch.randn(x.shape, generator=gen, dtype=dtype) if cfg.stochastic and s > 0 else None
            x = posterior_step(NoisySample(x, t), eps, schedule, noise=z, prev_t=s).values
        if not torch.isfinite(x).all():
            raise GuidanceError(f"non-finite iterate after timestep {t}")
    seconds = time.perf_counter() - start

    # after the final step (s = 0) x is the clean estimate
    recon = masked.observed * masked.mask + x * (1.0 - masked.mask)
    return InpaintResult(recon.detach(), x.detach(), steps, phases, grads, calls, seconds)


def inpaint(masked: MaskedScene, model, schedule: NoiseSchedule, cfg: InferenceConfig) -> torch.Tensor:
    return run_inpainting(masked, model, schedule, cfg).recon


def expected_refinements(total_train: int, infer_steps: int, stride: int) -> int:
    """Refinement phases implied by the stride gate on physical timesteps."""
    return sum(1 for t in build_trailing_schedule(total_train, infer_steps) if t % stride == 0)

"""Glue between scenes on disk and the tensor-level inference code."""

from __future__ import annotations

import time
from typing import Optional, Sequence

import numpy as np
import torch

from .baseline import inpaint_fmm
from .data import NormalizationSpec, Scene
from .denoiser import ConditioningStack, read_parameter_header
from .diffusion import NoiseSchedule, build_linear_schedule
from .guidance import InferenceConfig, InpaintResult, MaskedScene, run_inpainting
from .metrics import EvalRecord, evaluate


def schedule_from_header(header: dict) -> NoiseSchedule:
    """Training schedule recorded in a parameter file (linear 1e-4 -> 2e-2 over 1000 steps if absent)."""
    s = header.get("extra", {}).get("schedule") or {}
    return build_linear_schedule(s.get("total_steps", 1000), s.get("beta_start", 1e-4), s.get("beta_end", 2e-2))


def normalization_from_header(header: dict) -> NormalizationSpec:
    norm = header.get("extra", {}).get("normalization")
    if not norm:
        raise ValueError("parameter file carries no normalisation; retrain or pass one explicitly")
    return NormalizationSpec.from_dict(norm)


def model_context(path):
    """``(schedule, normalisation)`` stored alongside a parameter file."""
    header = read_parameter_header(path)
    return schedule_from_header(header), normalization_from_header(header)


def scene_batch(scenes: Sequence[Scene], norm: NormalizationSpec, dtype=torch.float32):
    x0 = torch.as_tensor(np.stack([norm.normalize_lst(s.lst) for s in scenes]), dtype=dtype)
    cond = ConditioningStack(
        torch.as_tensor(np.stack([s.built_up for s in scenes]), dtype=dtype),
        torch.as_tensor(np.stack([norm.normalize_elevation(s.elevation) for s in scenes]), dtype=dtype),
    )
    return x0, cond


def reconstruct(
    model,
    scenes: Sequence[Scene],
    masks: Sequence[np.ndarray],
    norm: NormalizationSpec,
    cfg: InferenceConfig,
    schedule: Optional[NoiseSchedule] = None,
) -> tuple[list[np.ndarray], InpaintResult]:
    """Guided reconstructions in kelvin for a batch of scenes, one mask each.

    Revealed pixels are copied from the scene in kelvin, so they are exact
    even after the normalisation round trip.
    """
    schedule = schedule or build_linear_schedule()
    x0, cond = scene_batch(scenes, norm)
    mask_t = torch.as_tensor(np.stack(masks).astype(np.float32))
    res = run_inpainting(MaskedScene.from_truth(x0, mask_t, cond), model, schedule, cfg)
    out = []
    for i, s in enumerate(scenes):
        rec = norm.denormalize_lst(res.recon[i].numpy())
        out.append(np.where(masks[i] == 1, s.lst.astype(np.float64), rec))
    return out, res


def baseline_reconstruct(scenes: Sequence[Scene], masks: Sequence[np.ndarray], radius: int = 5):
    """Fast-marching fills and per-scene wall time."""
    out, times = [], []
    for s, m in zip(scenes, masks):
        start = time.perf_counter()
        out.append(inpaint_fmm(np.where(m == 1, s.lst, 0.0), m, radius))
        times.append(time.perf_counter() - start)
    return out, times


def evaluate_batch(
    scenes: Sequence[Scene],
    recons: Sequence[np.ndarray],
    masks: Sequence[np.ndarray],
    method: str,
    mask_params: Sequence[dict],
    times: Sequence[float],
) -> list[EvalRecord]:
    return [
        evaluate(s.lst, r, m, s.built_up, scene_id=s.scene_id, mask_params=p, method=method, inference_time=t)
        for s, r, m, p, t in zip(scenes, recons, masks, mask_params, times)
    ]

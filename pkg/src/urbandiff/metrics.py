"""Masked reconstruction metrics and the composite normalised score.

All pixel metrics are computed over the hidden pixels only
(``mask == 0``), in kelvin. SSIM is a single global statistic over that
pixel population using population (1/N) moments.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .data import urban_rural_masks
from .errors import MetricError

log = logging.getLogger(__name__)

NS_WEIGHTS = {"ssim": 0.18, "rmse": 0.18, "psnr": 0.18, "r2": 0.18, "suhi_error": 0.18, "inference_time": 0.10}
LOWER_IS_BETTER = {"rmse", "suhi_error", "inference_time"}


def _hidden(truth, recon, mask, minimum=1):
    truth = np.asarray(truth, dtype=np.float64)
    recon = np.asarray(recon, dtype=np.float64)
    hidden = np.asarray(mask) == 0
    if truth.shape != recon.shape or truth.shape != hidden.shape:
        raise MetricError("truth, recon and mask must share one shape")
    if hidden.sum() < minimum:
        raise MetricError(f"need at least {minimum} hidden pixel(s), got {int(hidden.sum())}")
    return truth[hidden], recon[hidden]


def masked_mse(truth, recon, mask) -> float:
    x, y = _hidden(truth, recon, mask)
    return float(np.mean((x - y) ** 2))


def masked_rmse(truth, recon, mask) -> float:
    return math.sqrt(masked_mse(truth, recon, mask))


def masked_psnr(truth, recon, mask, max_value: float) -> float:
    """PSNR in dB; ``inf`` when the hidden pixels are reproduced exactly."""
    mse = masked_mse(truth, recon, mask)
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(max_value**2 / mse)


def masked_r2(truth, recon, mask) -> float:
    x, y = _hidden(truth, recon, mask)
    sst = float(np.sum((x - x.mean()) ** 2))
    if sst == 0.0:
        raise MetricError("hidden truth has zero variance; R2 undefined")
    return 1.0 - float(np.sum((x - y) ** 2)) / sst


def masked_ssim(truth, recon, mask, dynamic_range: float) -> float:
    x, y = _hidden(truth, recon, mask, minimum=2)
    c1 = (0.01 * dynamic_range) ** 2
    c2 = (0.03 * dynamic_range) ** 2
    mx, my = x.mean(), y.mean()
    vx, vy = x.var(), y.var()
    cov = np.mean((x - mx) * (y - my))
    return float((2 * mx * my + c1) * (2 * cov + c2) / ((mx**2 + my**2 + c1) * (vx + vy + c2)))


def suhi(values, built_up, urban_frac: float = 0.5, rural_max: float = 0.05) -> float:
    """Urban minus rural mean over the full scene."""
    values = np.asarray(values, dtype=np.float64)
    urban, rural = urban_rural_masks(built_up, urban_frac, rural_max)
    if not urban.any():
        raise MetricError("no urban pixels")
    if not rural.any():
        raise MetricError("no rural pixels")
    return float(values[urban].mean() - values[rural].mean())


def suhi_error(truth, recon, built_up, urban_frac: float = 0.5, rural_max: float = 0.05) -> float:
    """Relative SUHI error in percent."""
    s_true = suhi(truth, built_up, urban_frac, rural_max)
    if s_true == 0.0:
        raise MetricError("true SUHI is zero; relative error undefined")
    s_rec = suhi(recon, built_up, urban_frac, rural_max)
    return abs((s_true - s_rec) / s_true) * 100.0


@dataclass
class EvalRecord:
    ssim: float
    rmse: float
    psnr: float
    r2: float
    suhi_error: float
    inference_time: float = 0.0
    max_value: float = 0.0
    dynamic_range: float = 0.0
    scene_id: str = ""
    mask_params: dict = field(default_factory=dict)
    method: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(
    truth,
    recon,
    mask,
    built_up,
    *,
    scene_id: str = "",
    mask_params: Optional[dict] = None,
    method: str = "",
    inference_time: float = 0.0,
    urban_frac: float = 0.5,
    rural_max: float = 0.05,
) -> EvalRecord:
    """Full metric bundle; PSNR peak and SSIM range come from the truth scene."""
    truth = np.asarray(truth, dtype=np.float64)
    max_value = float(truth.max())
    dyn = float(truth.max() - truth.min())
    return EvalRecord(
        ssim=masked_ssim(truth, recon, mask, dyn),
        rmse=masked_rmse(truth, recon, mask),
        psnr=masked_psnr(truth, recon, mask, max_value),
        r2=masked_r2(truth, recon, mask),
        suhi_error=suhi_error(truth, recon, built_up, urban_frac, rural_max),
        inference_time=inference_time,
        max_value=max_value,
        dynamic_range=dyn,
        scene_id=scene_id,
        mask_params=dict(mask_params or {}),
        method=method,
    )


def aggregate(records: Sequence[EvalRecord]) -> dict:
    """Mean of each metric over records (inf PSNR values are skipped)."""
    out = {}
    for key in NS_WEIGHTS:
        vals = np.array([getattr(r, key) for r in records], dtype=np.float64)
        finite = vals[np.isfinite(vals)]
        out[key] = float(finite.mean()) if finite.size else float("nan")
    out["n"] = len(records)
    return out


def normalized_score(metrics: Sequence[dict]) -> list[float]:
    """Weighted min-max score per config.

    ``metrics`` holds one dict per config with keys ssim, rmse, psnr, r2,
    suhi_error and inference_time. A metric that is constant across
    configs contributes 0.5.
    """
    if len(metrics) < 2:
        raise MetricError("normalised score needs at least two configs")
    scores = np.zeros(len(metrics))
    for key, weight in NS_WEIGHTS.items():
        vals = np.array([m[key] for m in metrics], dtype=np.float64)
        lo, hi = vals.min(), vals.max()
        if hi == lo:
            log.warning("metric %s is constant across configs; using 0.5", key)
            ns = np.full(len(vals), 0.5)
        else:
            ns = (vals - lo) / (hi - lo)
        if key in LOWER_IS_BETTER:
            ns = 1.0 - ns
        scores += weight * ns
    return [float(s) for s in scores]

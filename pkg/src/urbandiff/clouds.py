"""Synthetic cloud masks from thresholded multi-octave value noise.

The noise field is a sum of ``octaves`` value-noise bands. Band ``i`` has
lattice spacing ``base * 2**i`` and amplitude ``2**i`` (persistence 0.5
read from coarse to fine), so every extra octave adds a coarser, stronger
band and the hidden regions grow more contiguous. Lattice coordinates are
stretched along the wind direction, which elongates cloud bands along it.
Wind angles are in degrees, counter-clockwise from +x (east) with +y
pointing north (up in the image, i.e. decreasing row index).

Masks use 1 for revealed pixels and 0 for cloud.
"""

from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass

import numpy as np

from .errors import GenerationError

SUITE_COVERAGES = (0.2, 0.4, 0.5, 0.7, 0.85)
SUITE_OCTAVES = (2, 4, 6, 8, 10)
SUITE_WINDS = (0.0, 90.0, 135.0, 180.0)

WIND_STRETCH = 3.0
COVERAGE_TOL = 0.01
BISECTION_ITERS = 64


@dataclass(frozen=True)
class CloudParams:
    coverage: float
    octaves: int
    wind_deg: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.coverage < 1.0:
            raise ValueError("coverage must lie in (0, 1)")
        if int(self.octaves) != self.octaves or self.octaves < 1:
            raise ValueError("octaves must be an integer >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def label(self) -> str:
        return f"cc{self.coverage:g}_oct{self.octaves}_wind{self.wind_deg:g}_s{self.seed}"


@dataclass(frozen=True)
class CloudMask:
    grid: np.ndarray
    params: CloudParams
    achieved_coverage: float

    @property
    def hidden(self) -> np.ndarray:
        return self.grid == 0


def _smoothstep(t):
    return t * t * (3.0 - 2.0 * t)


def _value_noise(u: np.ndarray, v: np.ndarray, spacing: float, rng: np.random.Generator) -> np.ndarray:
    """Smoothly interpolated lattice noise sampled at coordinates (u, v)."""
    gu = u / spacing + rng.uniform(0, 1)
    gv = v / spacing + rng.uniform(0, 1)
    u0, v0 = np.floor(gu), np.floor(gv)
    iu, iv = (u0 - u0.min()).astype(int), (v0 - v0.min()).astype(int)
    lattice = rng.uniform(-1.0, 1.0, size=(iu.max() + 2, iv.max() + 2))
    fu, fv = _smoothstep(gu - u0), _smoothstep(gv - v0)
    a = lattice[iu, iv] * (1 - fu) + lattice[iu + 1, iv] * fu
    b = lattice[iu, iv + 1] * (1 - fu) + lattice[iu + 1, iv + 1] * fu
    return a * (1 - fv) + b * fv


def noise_field(params: CloudParams, shape: tuple) -> np.ndarray:
    h, w = shape
    rng = np.random.default_rng(params.seed)
    rows, cols = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float), indexing="ij")
    x, y = cols, -rows
    th = np.deg2rad(params.wind_deg)
    along = (x * np.cos(th) + y * np.sin(th)) / WIND_STRETCH
    across = -x * np.sin(th) + y * np.cos(th)
    base = max(2.0, min(h, w) / 32.0)
    field = np.zeros(shape)
    for i in range(int(params.octaves)):
        field += 2.0**i * _value_noise(along, across, base * 2.0**i, rng)
    return field


def _threshold_for(field: np.ndarray, coverage: float) -> float:
    """Bisect for a threshold so that ``mean(field > thr)`` hits ``coverage``."""
    n = field.size
    target = int(round(coverage * n))
    lo, hi = float(field.min()) - 1.0, float(field.max())
    for _ in range(BISECTION_ITERS):
        mid = 0.5 * (lo + hi)
        count = int((field > mid).sum())
        if count == target:
            return mid
        if count > target:
            lo = mid
        else:
            hi = mid
    mid = 0.5 * (lo + hi)
    if abs((field > mid).sum() / n - coverage) > COVERAGE_TOL:
        raise GenerationError(f"coverage {coverage} unattainable after {BISECTION_ITERS} bisection steps")
    return mid


def generate_mask(params: CloudParams, shape=(32, 32)) -> CloudMask:
    if isinstance(shape, int):
        shape = (shape, shape)
    if min(shape) < 8:
        raise ValueError("mask shape must be at least 8x8")
    field = noise_field(params, tuple(shape))
    thr = _threshold_for(field, params.coverage)
    grid = (field <= thr).astype(np.uint8)
    achieved = float(1.0 - grid.mean())
    if abs(achieved - params.coverage) > COVERAGE_TOL:
        raise GenerationError(f"achieved coverage {achieved:.4f} misses target {params.coverage}")
    return CloudMask(grid, params, achieved)


def mask_grid_suite(seed: int = 0) -> list[CloudParams]:
    """The 100 evaluation conditions, coverage-major then octaves then wind."""
    return [
        CloudParams(cc, octv, wind, seed)
        for cc, octv, wind in itertools.product(SUITE_COVERAGES, SUITE_OCTAVES, SUITE_WINDS)
    ]


def largest_hidden_component(mask: CloudMask) -> int:
    from scipy import ndimage

    labels, n = ndimage.label(mask.hidden)
    if n == 0:
        return 0
    return int(np.bincount(labels.ravel())[1:].max())


def hidden_orientation_deg(mask: CloudMask) -> float:
    """Major-axis angle of the hidden region's second-moment ellipse, in [0, 180)."""
    rows, cols = np.nonzero(mask.hidden)
    x, y = cols - cols.mean(), -(rows - rows.mean())
    cxx, cyy, cxy = (x * x).mean(), (y * y).mean(), (x * y).mean()
    return float(np.rad2deg(0.5 * np.arctan2(2 * cxy, cxx - cyy)) % 180.0)


def save_mask(mask: CloudMask, path):
    from .data import save_raster

    return save_raster(
        path,
        {"mask": mask.grid},
        units={"mask": "1=revealed"},
        metadata={"kind": "mask", "params": mask.params.to_dict(), "achieved_coverage": mask.achieved_coverage},
    )


def load_mask(path) -> CloudMask:
    from .data import load_raster
    from .errors import FormatError

    bands, sidecar = load_raster(path)
    meta = sidecar["metadata"]
    if meta.get("kind") != "mask" or "mask" not in bands:
        raise FormatError(f"{path} is not a mask raster")
    grid = bands["mask"].astype(np.uint8)
    if not np.isin(grid, (0, 1)).all():
        raise FormatError("mask band is not binary")
    return CloudMask(grid, CloudParams(**meta["params"]), float(meta["achieved_coverage"]))

"""Scenes, the raster container format, normalisation and toy data.

Raster container
----------------
A raster is two files:

* ``<name>.rast`` – the payload: every band as float32 little-endian,
  row-major, bands concatenated in the order listed in the sidecar.
* ``<name>.rast.json`` – the sidecar::

      {"format": "urbandiff-raster", "version": 1,
       "shape": [H, W], "dtype": "<f4",
       "bands": [{"name": "lst", "units": "K", "offset": 0}, ...],
       "metadata": {...}}

  ``offset`` is in bytes from the start of the payload. ``metadata`` is a
  free-form JSON object (provenance, mask parameters, method tags).

Directory layout used by the CLI: ``<root>/scenes/*.rast``,
``<root>/masks/*.rast``, ``<root>/runs/<stamp>-<hash>/``.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import FormatError

RASTER_FORMAT = "urbandiff-raster"
RASTER_VERSION = 1
DTYPE = np.dtype("<f4")
TOY_LST_BOUNDS = (250.0, 340.0)
REAL_LST_BOUNDS = (200.0, 350.0)


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def save_raster(path, bands: dict, units: Optional[dict] = None, metadata: Optional[dict] = None) -> Path:
    path = Path(path)
    units = units or {}
    arrays = [np.ascontiguousarray(np.asarray(v), dtype=DTYPE) for v in bands.values()]
    shape = arrays[0].shape
    if len(shape) != 2 or any(a.shape != shape for a in arrays):
        raise FormatError("all bands must be 2-D with equal shape")
    entries, offset = [], 0
    for name, arr in zip(bands, arrays):
        entries.append({"name": name, "units": units.get(name, ""), "offset": offset})
        offset += arr.nbytes
    sidecar = {
        "format": RASTER_FORMAT,
        "version": RASTER_VERSION,
        "shape": list(shape),
        "dtype": DTYPE.str,
        "bands": entries,
        "metadata": metadata or {},
    }
    _atomic_write(path, b"".join(a.tobytes(order="C") for a in arrays))
    _atomic_write(sidecar_path(path), json.dumps(sidecar, indent=2, sort_keys=True).encode())
    return path


def load_raster(path) -> tuple[dict, dict]:
    """Return ``(bands, sidecar)``; bands are float32 arrays keyed by name."""
    path = Path(path)
    try:
        sidecar = json.loads(sidecar_path(path).read_text())
        payload = path.read_bytes()
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read raster {path}: {exc}") from exc
    if sidecar.get("format") != RASTER_FORMAT or sidecar.get("version") != RASTER_VERSION:
        raise FormatError(f"unsupported raster format/version in {path}")
    if sidecar.get("dtype") != DTYPE.str:
        raise FormatError(f"unsupported dtype {sidecar.get('dtype')}")
    h, w = sidecar["shape"]
    nbytes = h * w * DTYPE.itemsize
    if len(payload) != nbytes * len(sidecar["bands"]):
        raise FormatError(
            f"{path}: payload is {len(payload)} bytes, sidecar shape {h}x{w} "
            f"with {len(sidecar['bands'])} bands needs {nbytes * len(sidecar['bands'])}"
        )
    bands = {}
    for band in sidecar["bands"]:
        off = band["offset"]
        bands[band["name"]] = np.frombuffer(payload[off : off + nbytes], dtype=DTYPE).reshape(h, w).copy()
    return bands, sidecar


@dataclass
class Scene:
    lst: np.ndarray
    built_up: np.ndarray
    elevation: np.ndarray
    city_id: str = "unknown"
    date: str = ""
    lst_bounds: tuple = REAL_LST_BOUNDS

    def __post_init__(self):
        self.lst = np.asarray(self.lst, dtype=np.float32)
        self.built_up = np.asarray(self.built_up, dtype=np.float32)
        self.elevation = np.asarray(self.elevation, dtype=np.float32)
        if not (self.lst.shape == self.built_up.shape == self.elevation.shape):
            raise FormatError("scene layers must share one shape")
        lo, hi = self.lst_bounds
        if self.lst.min() < lo or self.lst.max() > hi:
            raise FormatError(f"LST outside plausible bounds [{lo}, {hi}] K")

    @property
    def grid_size(self) -> tuple:
        return self.lst.shape

    @property
    def scene_id(self) -> str:
        return f"{self.city_id}_{self.date}" if self.date else self.city_id


def save_scene(scene: Scene, path) -> Path:
    return save_raster(
        path,
        {"lst": scene.lst, "built_up": scene.built_up, "elevation": scene.elevation},
        units={"lst": "K", "built_up": "fraction", "elevation": "m"},
        metadata={"kind": "scene", "city_id": scene.city_id, "date": scene.date, "lst_bounds": list(scene.lst_bounds)},
    )


def load_scene(path) -> Scene:
    bands, sidecar = load_raster(path)
    meta = sidecar["metadata"]
    if meta.get("kind") != "scene" or set(bands) != {"lst", "built_up", "elevation"}:
        raise FormatError(f"{path} is not a scene raster")
    return Scene(
        bands["lst"], bands["built_up"], bands["elevation"],
        city_id=meta.get("city_id", "unknown"), date=meta.get("date", ""),
        lst_bounds=tuple(meta.get("lst_bounds", REAL_LST_BOUNDS)),
    )


@dataclass(frozen=True)
class NormalizationSpec:
    lst_center: float
    lst_scale: float
    elevation_center: float
    elevation_scale: float

    def __post_init__(self):
        if self.lst_scale <= 0 or self.elevation_scale <= 0:
            raise ValueError("normalisation scales must be positive")

    @classmethod
    def fit(cls, scenes: Sequence[Scene]) -> "NormalizationSpec":
        """LST mapped to about [-1, 1] by its range; elevation z-scored."""
        lst = np.concatenate([s.lst.ravel() for s in scenes]).astype(np.float64)
        elev = np.concatenate([s.elevation.ravel() for s in scenes]).astype(np.float64)
        lo, hi = lst.min(), lst.max()
        return cls(
            lst_center=float((hi + lo) / 2),
            lst_scale=float(max((hi - lo) / 2, 1e-6)),
            elevation_center=float(elev.mean()),
            elevation_scale=float(max(elev.std(), 1e-6)),
        )

    def normalize_lst(self, x):
        return (np.asarray(x, dtype=np.float64) - self.lst_center) / self.lst_scale

    def denormalize_lst(self, z):
        return np.asarray(z, dtype=np.float64) * self.lst_scale + self.lst_center

    def normalize_elevation(self, e):
        return (np.asarray(e, dtype=np.float64) - self.elevation_center) / self.elevation_scale

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationSpec":
        return cls(**d)


def split_dataset(scenes: Sequence, train_fraction: float = 0.8, seed: int = 0) -> tuple[list, list]:
    if len(scenes) < 5:
        raise ValueError("need at least 5 scenes to split")
    order = np.random.default_rng(seed).permutation(len(scenes))
    n_train = int(round(train_fraction * len(scenes)))
    return [scenes[i] for i in order[:n_train]], [scenes[i] for i in order[n_train:]]


def urban_rural_masks(built_up: np.ndarray, urban_frac: float = 0.5, rural_max: float = 0.05):
    """Urban: built-up >= ``urban_frac`` x scene max. Rural: built-up <= ``rural_max``."""
    bu = np.asarray(built_up, dtype=np.float64)
    return bu >= urban_frac * bu.max(), bu <= rural_max


def _toy_scene(rng: np.random.Generator, size: tuple, index: int) -> Optional[Scene]:
    h, w = size
    yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")

    built_up = np.zeros(size)
    for _ in range(rng.integers(1, 4)):
        cy, cx = rng.uniform(0.2, 0.8, 2)
        sigma = rng.uniform(0.07, 0.18)
        peak = rng.uniform(0.7, 1.0)
        built_up += peak * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
    built_up = np.clip(built_up, 0.0, 1.0)

    theta = rng.uniform(0, 2 * np.pi)
    elevation = rng.uniform(0, 300) + rng.uniform(0, 100) * (np.cos(theta) * (xx - 0.5) + np.sin(theta) * (yy - 0.5))
    for _ in range(2):
        cy, cx = rng.uniform(0, 1, 2)
        sigma = rng.uniform(0.15, 0.4)
        elevation += rng.uniform(-60, 120) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))

    base = rng.uniform(295.0, 315.0)
    uhi_gain = rng.uniform(4.0, 9.0)  # K per unit built-up
    lapse = rng.uniform(5.0, 9.0)  # K per km
    noise = ndimage.gaussian_filter(rng.standard_normal(size), sigma=max(h, w) / 16, mode="wrap")
    noise *= rng.uniform(0.3, 0.8) / max(noise.std(), 1e-12)
    lst = base + uhi_gain * built_up - lapse * (elevation - elevation.mean()) / 1000.0 + noise

    urban, rural = urban_rural_masks(built_up)
    if rural.mean() < 0.05 or lst[urban].mean() - lst[rural].mean() < 0.5:
        return None
    return Scene(lst, built_up, elevation, city_id=f"toy{index:04d}", date="", lst_bounds=TOY_LST_BOUNDS)


def make_toy_dataset(n: int, size=(32, 32), seed: int = 0) -> list[Scene]:
    """Synthetic cities whose LST is driven by the two conditioning layers.

    Each scene has 1-3 Gaussian built-up blobs, a smooth elevation surface
    (ramp plus two bumps, metres) and
    ``LST = base + a * built_up - b * (elev - mean) / 1000 + noise`` with
    ``base ~ U(295, 315) K``, ``a ~ U(4, 9) K``, ``b ~ U(5, 9) K/km`` and
    smooth Gaussian noise of std ``U(0.3, 0.8) K``. Draws with fewer than
    5% rural pixels or an urban excess below 0.5 K are rejected, so every
    scene has a positive heat island.
    """
    if isinstance(size, int):
        size = (size, size)
    if min(size) < 16:
        raise ValueError("toy scenes must be at least 16x16")
    rng = np.random.default_rng(seed)
    scenes = []
    while len(scenes) < n:
        scene = _toy_scene(rng, tuple(size), len(scenes))
        if scene is not None:
            scenes.append(scene)
    return scenes


def save_dataset(scenes: Iterable[Scene], root) -> list[Path]:
    root = Path(root)
    return [save_scene(s, root / "scenes" / f"{s.scene_id}.rast") for s in scenes]


def load_scenes(paths: Iterable) -> list[Scene]:
    return [load_scene(p) for p in paths]


def scene_paths(root) -> list[Path]:
    return sorted((Path(root) / "scenes").glob("*.rast"))

"""Grid search over inference settings per cloud condition.

Every (coverage, octaves) cell is swept over all (infer_steps, stride)
pairs. Each config reconstructs the whole test set under one mask per scene
(mask seed = manifest seed + scene index, so all configs in a cell see the
same masks). The aggregated metrics are appended to a JSON-lines ledger as
soon as a config finishes, which makes an interrupted sweep resumable.
Normalised scores are computed within each cell across its completed
configs.
"""

from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .clouds import CloudParams, generate_mask
from .data import NormalizationSpec, Scene
from .diffusion import NoiseSchedule, build_linear_schedule
from .errors import ConfigError, UrbanDiffError
from .guidance import InferenceConfig, expected_refinements
from .metrics import NS_WEIGHTS, aggregate, normalized_score
from .pipeline import evaluate_batch, reconstruct

log = logging.getLogger(__name__)

METRIC_KEYS = ("ssim", "rmse", "psnr", "r2", "suhi_error")
TIMING_MODES = ("wall", "nfe")


@dataclass(frozen=True)
class SweepGrid:
    coverages: tuple = (0.2, 0.5, 0.85)
    octaves: tuple = (2, 6, 10)
    infer_steps: tuple = (20, 40, 70, 100, 150, 180)
    strides: tuple = (1, 2, 3, 4)

    def __post_init__(self):
        for name in ("coverages", "octaves", "infer_steps", "strides"):
            vals = tuple(getattr(self, name))
            if not vals:
                raise ConfigError(f"sweep grid axis {name} is empty")
            object.__setattr__(self, name, vals)

    def cells(self) -> list[tuple]:
        return list(itertools.product(self.coverages, self.octaves))

    def configs(self) -> list["SweepConfig"]:
        return [
            SweepConfig(cc, oc, n, tau)
            for cc, oc in self.cells()
            for n, tau in itertools.product(self.infer_steps, self.strides)
        ]

    def __len__(self) -> int:
        return len(self.coverages) * len(self.octaves) * len(self.infer_steps) * len(self.strides)


@dataclass(frozen=True)
class SweepConfig:
    coverage: float
    octaves: int
    infer_steps: int
    stride: int

    @property
    def key(self) -> str:
        return f"cc{self.coverage:g}_oct{self.octaves}_T{self.infer_steps}_tau{self.stride}"

    @property
    def cell(self) -> tuple:
        return (self.coverage, self.octaves)


@dataclass(frozen=True)
class SweepManifest:
    grid: SweepGrid = field(default_factory=SweepGrid)
    seed: int = 0
    wind_deg: float = 0.0
    grad_steps: int = 1
    grad_step_size: float = 10.0
    backtrack: int = 16
    solver: str = "ancestral"
    timing: str = "wall"

    def __post_init__(self):
        if self.timing not in TIMING_MODES:
            raise ConfigError(f"timing must be one of {TIMING_MODES}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SweepManifest":
        d = dict(d)
        d["grid"] = SweepGrid(**d.get("grid", {}))
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:12]

    def inference_config(self, cfg: SweepConfig, index: int) -> InferenceConfig:
        return InferenceConfig(
            infer_steps=cfg.infer_steps,
            guidance_stride=cfg.stride,
            grad_steps=self.grad_steps,
            grad_step_size=self.grad_step_size,
            backtrack=self.backtrack,
            solver=self.solver,
            seed=self.seed * 100_003 + index,
        )


def cell_masks(cell: tuple, n_scenes: int, shape: tuple, seed: int, wind_deg: float = 0.0):
    cc, oc = cell
    params = [CloudParams(cc, oc, wind_deg, seed + i) for i in range(n_scenes)]
    return [generate_mask(p, shape).grid for p in params], [p.to_dict() for p in params]


def evaluate_config(
    model,
    scenes: Sequence[Scene],
    norm: NormalizationSpec,
    manifest: SweepManifest,
    cfg: SweepConfig,
    index: int,
    schedule: Optional[NoiseSchedule] = None,
) -> dict:
    """Run one config over all scenes; returns a ledger row."""
    row = {**asdict(cfg), "key": cfg.key, "manifest": manifest.digest()}
    total = (schedule or build_linear_schedule()).total_steps
    row["gradient_steps"] = expected_refinements(total, cfg.infer_steps, cfg.stride) * manifest.grad_steps
    try:
        masks, params = cell_masks(cfg.cell, len(scenes), scenes[0].grid_size, manifest.seed, manifest.wind_deg)
        recons, res = reconstruct(model, scenes, masks, norm, manifest.inference_config(cfg, index), schedule)
        if manifest.timing == "nfe":
            # each call covers the whole batch, so this is also the per-scene count
            per_scene = float(res.denoiser_calls)
        else:
            per_scene = res.seconds / len(scenes)
        records = evaluate_batch(scenes, recons, masks, "urbandiff", params, [per_scene] * len(scenes))
        agg = aggregate(records)
        if not all(np.isfinite(agg[k]) for k in METRIC_KEYS):
            raise UrbanDiffError("non-finite aggregated metric")
        row.update({k: agg[k] for k in NS_WEIGHTS}, status="ok", reason="", n=agg["n"])
        row["refinement_phases"] = res.refinement_phases
    except (UrbanDiffError, ValueError, RuntimeError) as exc:
        log.warning("config %s failed: %s", cfg.key, exc)
        row.update({k: None for k in NS_WEIGHTS}, status="missing", reason=f"{type(exc).__name__}: {exc}", n=0)
        row["refinement_phases"] = None
    return row


def read_ledger(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        return []
    rows = []
    for line in path.read_text().splitlines():
        line = line.strip()
        if line:
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError:
                log.warning("skipping truncated ledger line in %s", path)
    return rows


def run_sweep(
    model,
    scenes: Sequence[Scene],
    norm: NormalizationSpec,
    manifest: SweepManifest,
    ledger_path=None,
    workers: int = 1,
    schedule: Optional[NoiseSchedule] = None,
    on_row: Optional[Callable[[dict], None]] = None,
) -> list[dict]:
    """Evaluate every config of the grid; returns rows in canonical grid order.

    Rows already present in ``ledger_path`` for the same manifest digest are
    reused rather than recomputed.
    """
    if not scenes:
        raise ConfigError("sweep needs at least one scene")
    configs = manifest.grid.configs()
    digest = manifest.digest()
    done = {}
    if ledger_path:
        for row in read_ledger(ledger_path):
            if row.get("manifest") == digest and row.get("status") == "ok":
                done[row["key"]] = row
    todo = [(i, c) for i, c in enumerate(configs) if c.key not in done]
    if done:
        log.info("resuming sweep: %d of %d configs already in ledger", len(done), len(configs))

    lock = threading.Lock()

    def work(item):
        i, c = item
        row = evaluate_config(model, scenes, norm, manifest, c, i, schedule)
        if ledger_path:
            with lock, open(ledger_path, "a") as fh:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
        if on_row:
            on_row(row)
        return row

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            new = list(pool.map(work, todo))
    else:
        new = [work(item) for item in todo]
    by_key = {**done, **{r["key"]: r for r in new}}
    return [by_key[c.key] for c in configs]


def rank_cells(rows: Sequence[dict]) -> list[dict]:
    """Attach ``ns`` and ``rank`` (1 = best) within each (coverage, octaves) cell.

    Missing configs get ``ns = None`` and no rank. A cell with a single
    completed config gives it NS 1.0.
    """
    out = [dict(r) for r in rows]
    cells: dict = {}
    for r in out:
        cells.setdefault((r["coverage"], r["octaves"]), []).append(r)
    for cell, members in cells.items():
        ok = [r for r in members if r["status"] == "ok"]
        for r in members:
            r["ns"], r["rank"] = None, None
        if len(ok) < len(members):
            log.warning("cell cc=%g oct=%d: NS over %d of %d configs", cell[0], cell[1], len(ok), len(members))
        if not ok:
            continue
        scores = [1.0] if len(ok) == 1 else normalized_score(ok)
        for r, s in zip(ok, scores):
            r["ns"] = s
        for pos, r in enumerate(sorted(ok, key=_preference), start=1):
            r["rank"] = pos
    return out


def _preference(row: dict):
    # highest NS first, then cheaper inference: fewer steps, then larger stride
    return (-row["ns"], row["infer_steps"], -row["stride"])


def best_config_table(ranked: Sequence[dict]) -> dict:
    """``(coverage, octaves) -> (infer_steps, stride)`` of the rank-1 config per cell."""
    best = {}
    for r in ranked:
        if r.get("ns") is None:
            continue
        cell = (r["coverage"], r["octaves"])
        if cell not in best or _preference(r) < _preference(best[cell]):
            best[cell] = r
    return {cell: (r["infer_steps"], r["stride"]) for cell, r in sorted(best.items())}


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def format_table(rows: Sequence[dict], columns: Sequence[str], delimiter: str = ",") -> str:
    buf = io.StringIO()
    w = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in columns])
    return buf.getvalue()


SWEEP_METRIC_COLUMNS = ("coverage", "octaves", "infer_steps", "stride", "gradient_steps", "status", *METRIC_KEYS, "n", "reason")
SWEEP_RANK_COLUMNS = ("coverage", "octaves", "infer_steps", "stride", "gradient_steps", "inference_time", "ns", "rank")

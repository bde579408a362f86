"""Command-line entry point: ``urbandiff <subcommand> [options]``.

Every subcommand resolves its configuration in layers (built-in defaults,
then a preset where one applies, then ``--config FILE``, then explicit
flags), rejects unknown keys, and writes ``manifest.json`` into its run
directory before doing any work. The run directory is
``<data-root>/runs/<UTC timestamp>-<config hash>`` unless ``--out`` is given.
``URBANDIFF_DATA_ROOT`` and ``URBANDIFF_WORKERS`` provide defaults for
``--data-root`` and ``--workers``.

On failure the process prints ``{"error": <category>, "message": ...}`` to
stderr and exits non-zero (2 for library errors, 3 for I/O errors).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .clouds import CloudParams, generate_mask, load_mask, mask_grid_suite, save_mask
from .data import (
    NormalizationSpec,
    load_raster,
    load_scene,
    make_toy_dataset,
    save_dataset,
    save_raster,
    split_dataset,
)
from .denoiser import DenoiserConfig, build_denoiser, load_parameters, parameter_hash, save_parameters
from .errors import ConfigError, UrbanDiffError
from .guidance import SOLVERS, InferenceConfig
from .metrics import EvalRecord, evaluate
from .pipeline import baseline_reconstruct, model_context, reconstruct
from .sweep import (
    METRIC_KEYS,
    SWEEP_METRIC_COLUMNS,
    SWEEP_RANK_COLUMNS,
    SweepGrid,
    SweepManifest,
    best_config_table,
    format_table,
    rank_cells,
    run_sweep,
)
from .train import TrainConfig, fit

log = logging.getLogger("urbandiff")

DEFAULTS = {
    "makedata": {"n_scenes": 200, "size": 32, "seed": 0, "train_fraction": 0.8},
    "train": {
        "data": None,
        "split": "train",
        "max_scenes": None,
        "preset": "toy",
        "epochs": 75,
        "batch_size": 16,
        "initial_lr": 1e-4,
        "lr_decay_factor": 0.9,
        "lr_decay_every_epochs": 2,
        "total_steps": 1000,
        "beta_start": 1e-4,
        "beta_end": 2e-2,
        "widths": [64, 128, 256, 256],
        "blocks_per_level": 2,
        "attention_levels": [2, 3],
        "attention_heads": 8,
        "dropout": 0.1,
        "seed": 0,
        "resume": False,
    },
    "genmask": {"coverage": 0.5, "octaves": 6, "wind": 0.0, "seed": 0, "size": 32, "suite": False},
    "infer": {
        "model": None,
        "data": None,
        "masks": None,
        "split": "test",
        "max_scenes": None,
        "infer_steps": 70,
        "guidance_stride": 1,
        "grad_steps": 1,
        "grad_step_size": 10.0,
        "backtrack": 16,
        "solver": "ancestral",
        "solver_order": 3,
        "exact_gradient": True,
        "seed": 0,
        "best_configs": None,
    },
    "baseline": {"data": None, "masks": None, "split": "test", "max_scenes": None, "radius": 5},
    "evaluate": {"data": None, "masks": None, "recon": [], "delimiter": ","},
    "sweep": {
        "model": None,
        "data": None,
        "split": "test",
        "max_scenes": None,
        "coverages": [0.2, 0.5, 0.85],
        "octaves": [2, 6, 10],
        "infer_steps": [20, 40, 70, 100, 150, 180],
        "strides": [1, 2, 3, 4],
        "grad_steps": 1,
        "grad_step_size": 10.0,
        "backtrack": 16,
        "solver": "ancestral",
        "wind": 0.0,
        "seed": 0,
        "timing": "wall",
        "ledger": None,
    },
    "report": {"records": None, "data": None, "masks": None, "recon": [], "delimiter": ",", "error_maps": 1},
}

# presets sit between the defaults and the config file
PRESETS = {
    "train": {
        "toy": {
            "epochs": 150,
            "initial_lr": 1e-3,
            "lr_decay_every_epochs": 10,
            "widths": [16, 32, 64],
            "blocks_per_level": 1,
            "attention_levels": [2],
            "attention_heads": 2,
        },
        "full": {},
    }
}

# keys whose value names an input file or directory (hashed into the manifest)
INPUT_KEYS = ("data", "model", "masks", "recon", "records", "best_configs")


# ---------------------------------------------------------------- config plumbing


def resolve_config(command: str, file_cfg: dict, flags: dict) -> dict:
    """Merge defaults < preset < file < flags; unknown keys raise ``ConfigError``."""
    defaults = DEFAULTS[command]
    for layer, name in ((file_cfg, "config file"), (flags, "flags")):
        unknown = sorted(set(layer) - set(defaults))
        if unknown:
            raise ConfigError(f"unknown {command} keys in {name}: {', '.join(unknown)}")
    cfg = dict(defaults)
    preset = flags.get("preset", file_cfg.get("preset", defaults.get("preset")))
    if command in PRESETS:
        if preset not in PRESETS[command]:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS[command])}")
        cfg.update(PRESETS[command][preset])
    cfg.update(file_cfg)
    cfg.update(flags)
    return cfg


def config_hash(command: str, cfg: dict) -> str:
    blob = json.dumps({"command": command, "config": cfg}, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:10]


def hash_path(path) -> str:
    path = Path(path)
    h = hashlib.sha256()
    files = sorted(p for p in path.rglob("*") if p.is_file()) if path.is_dir() else [path]
    for f in files:
        h.update(str(f.relative_to(path) if path.is_dir() else f.name).encode())
        h.update(f.read_bytes())
    return h.hexdigest()[:16]


def _input_hashes(cfg: dict) -> dict:
    out = {}
    for key in INPUT_KEYS:
        val = cfg.get(key)
        if not val:
            continue
        for i, v in enumerate(val if isinstance(val, list) else [val]):
            if Path(v).exists():
                out[key if not isinstance(val, list) else f"{key}[{i}]"] = hash_path(v)
    return out


def _seeds(cfg: dict) -> dict:
    return {k: v for k, v in cfg.items() if k == "seed" or k.endswith("_seed")}


def prepare_run(command: str, cfg: dict, out, data_root) -> Path:
    digest = config_hash(command, cfg)
    if out:
        run_dir = Path(out)
    else:
        stamp = time.strftime("%Y%m%dT%H%M%SZ", time.gmtime())
        run_dir = Path(data_root) / "runs" / f"{stamp}-{digest}"
    run_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config": cfg,
        "config_hash": digest,
        "seeds": _seeds(cfg),
        "inputs": _input_hashes(cfg),
        "version": __version__,
        "torch": torch.__version__,
        "created_utc": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str))
    return run_dir


def _require(cfg: dict, *keys):
    missing = [k for k in keys if not cfg.get(k)]
    if missing:
        raise ConfigError(f"missing required setting(s): {', '.join(missing)}")


# ---------------------------------------------------------------- data helpers


def load_split(data_dir, split: str, max_scenes=None):
    data_dir = Path(data_dir)
    split_file = data_dir / "split.json"
    if split == "all" or not split_file.exists():
        ids = sorted(p.name[: -len(".rast")] for p in (data_dir / "scenes").glob("*.rast"))
    else:
        ids = json.loads(split_file.read_text())[split]
    if max_scenes:
        ids = ids[: int(max_scenes)]
    if not ids:
        raise ConfigError(f"no scenes found in {data_dir} for split {split!r}")
    return [load_scene(data_dir / "scenes" / f"{i}.rast") for i in ids]


def mask_files(masks) -> list[Path]:
    p = Path(masks)
    files = sorted(p.glob("*.rast")) if p.is_dir() else [p]
    if not files:
        raise ConfigError(f"no masks found at {masks}")
    return files


def _recon_files(dirs) -> list[Path]:
    out = []
    for d in dirs:
        d = Path(d)
        out += sorted(d.rglob("*.rast")) if d.is_dir() else [d]
    return out


def _save_recon(path, recon, meta):
    save_raster(path, {"lst": recon}, units={"lst": "K"}, metadata={"kind": "recon", **meta})


def _lookup_best(best: dict, params: CloudParams):
    return best.get(f"{params.coverage:g}/{params.octaves}")


# ---------------------------------------------------------------- subcommands


def cmd_makedata(cfg, run_dir, workers):
    scenes = make_toy_dataset(int(cfg["n_scenes"]), (int(cfg["size"]), int(cfg["size"])), int(cfg["seed"]))
    save_dataset(scenes, run_dir)
    train, test = split_dataset(scenes, float(cfg["train_fraction"]), int(cfg["seed"]))
    split = {"train": [s.scene_id for s in train], "test": [s.scene_id for s in test]}
    (run_dir / "split.json").write_text(json.dumps(split, indent=2))
    return {"scenes": len(scenes), "train": len(train), "test": len(test)}


def cmd_train(cfg, run_dir, workers):
    _require(cfg, "data")
    scenes = load_split(cfg["data"], cfg["split"], cfg["max_scenes"])
    size = scenes[0].grid_size[0]
    widths = tuple(int(w) for w in cfg["widths"])
    arch = DenoiserConfig(
        levels=len(widths),
        channel_widths=widths,
        blocks_per_level=int(cfg["blocks_per_level"]),
        attention_levels=tuple(int(a) for a in cfg["attention_levels"]),
        attention_heads=int(cfg["attention_heads"]),
        dropout=float(cfg["dropout"]),
        spatial_size=size,
    )
    tcfg = TrainConfig(
        epochs=int(cfg["epochs"]),
        batch_size=int(cfg["batch_size"]),
        initial_lr=float(cfg["initial_lr"]),
        lr_decay_factor=float(cfg["lr_decay_factor"]),
        lr_decay_every_epochs=int(cfg["lr_decay_every_epochs"]),
        total_steps=int(cfg["total_steps"]),
        beta_start=float(cfg["beta_start"]),
        beta_end=float(cfg["beta_end"]),
        seed=int(cfg["seed"]),
    )
    norm = NormalizationSpec.fit(scenes)
    model = build_denoiser(arch, seed=int(cfg["seed"]))
    res = fit(
        model, scenes, tcfg, norm,
        checkpoint_dir=run_dir / "checkpoint", log_path=run_dir / "train_log.jsonl",
        resume=bool(cfg["resume"]), progress=True,
    )
    extra = {
        "normalization": norm.to_dict(),
        "schedule": {"total_steps": tcfg.total_steps, "beta_start": tcfg.beta_start, "beta_end": tcfg.beta_end},
        "train_config": tcfg.to_dict(),
    }
    save_parameters(res.model, run_dir / "model.npz", extra=extra)
    return {
        "model": str(run_dir / "model.npz"),
        "parameters": sum(p.numel() for p in res.model.parameters()),
        "final_loss": res.history[-1]["mean_loss"] if res.history else None,
    }


def cmd_genmask(cfg, run_dir, workers):
    size = (int(cfg["size"]), int(cfg["size"]))
    if cfg["suite"]:
        params = mask_grid_suite(int(cfg["seed"]))
    else:
        params = [CloudParams(float(cfg["coverage"]), int(cfg["octaves"]), float(cfg["wind"]), int(cfg["seed"]))]
    written = []
    for p in params:
        m = generate_mask(p, size)
        written.append(str(save_mask(m, run_dir / "masks" / f"{p.label}.rast")))
    return {"masks": len(written)}


def cmd_infer(cfg, run_dir, workers):
    _require(cfg, "model", "data", "masks")
    model = load_parameters(cfg["model"])
    schedule, norm = model_context(cfg["model"])
    mhash = parameter_hash(model)
    scenes = load_split(cfg["data"], cfg["split"], cfg["max_scenes"])
    best = json.loads(Path(cfg["best_configs"]).read_text()) if cfg["best_configs"] else {}
    base = {k: cfg[k] for k in InferenceConfig.__dataclass_fields__ if k in cfg}
    chash = config_hash("infer", cfg)
    count = 0
    for mf in mask_files(cfg["masks"]):
        mask = load_mask(mf)
        icfg = dict(base)
        choice = _lookup_best(best, mask.params)
        if choice:
            icfg["infer_steps"], icfg["guidance_stride"] = choice
        recons, res = reconstruct(model, scenes, [mask.grid] * len(scenes), norm, InferenceConfig(**icfg), schedule)
        for s, rec in zip(scenes, recons):
            _save_recon(
                run_dir / "recon" / "urbandiff" / f"{s.scene_id}__{mf.name[:-5]}.rast",
                rec,
                {
                    "method": "urbandiff", "scene_id": s.scene_id, "mask": mf.name,
                    "mask_params": mask.params.to_dict(), "seconds": res.seconds / len(scenes),
                    "inference": icfg, "config_hash": chash, "model_hash": mhash,
                },
            )
            count += 1
    return {"reconstructions": count}


def cmd_baseline(cfg, run_dir, workers):
    _require(cfg, "data", "masks")
    scenes = load_split(cfg["data"], cfg["split"], cfg["max_scenes"])
    files = mask_files(cfg["masks"])

    def one(mf):
        mask = load_mask(mf)
        recons, times = baseline_reconstruct(scenes, [mask.grid] * len(scenes), int(cfg["radius"]))
        for s, rec, t in zip(scenes, recons, times):
            _save_recon(
                run_dir / "recon" / "baseline" / f"{s.scene_id}__{mf.name[:-5]}.rast",
                rec,
                {"method": "baseline", "scene_id": s.scene_id, "mask": mf.name,
                 "mask_params": mask.params.to_dict(), "seconds": t, "radius": int(cfg["radius"])},
            )
        return len(recons)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        count = sum(pool.map(one, files))
    return {"reconstructions": count}


RECORD_COLUMNS = ("method", "scene_id", "mask", *METRIC_KEYS)


def cmd_evaluate(cfg, run_dir, workers):
    _require(cfg, "data", "masks", "recon")
    data_dir = Path(cfg["data"])
    masks_dir = Path(cfg["masks"])
    scenes, masks = {}, {}
    records = []
    for rf in _recon_files(cfg["recon"]):
        bands, side = load_raster(rf)
        meta = side["metadata"]
        if meta.get("kind") != "recon":
            continue
        sid, mname = meta["scene_id"], meta["mask"]
        if sid not in scenes:
            scenes[sid] = load_scene(data_dir / "scenes" / f"{sid}.rast")
        if mname not in masks:
            masks[mname] = load_mask(masks_dir / mname if masks_dir.is_dir() else masks_dir)
        s, m = scenes[sid], masks[mname]
        rec = evaluate(
            s.lst, bands["lst"], m.grid, s.built_up, scene_id=sid, mask_params=m.params.to_dict(),
            method=meta["method"], inference_time=float(meta.get("seconds", 0.0)),
        )
        row = rec.to_dict()
        row["mask"] = mname
        records.append(row)
    if not records:
        raise ConfigError("no reconstruction rasters found")
    records.sort(key=lambda r: (r["method"], r["mask"], r["scene_id"]))
    with open(run_dir / "records.jsonl", "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    ext = "tsv" if cfg["delimiter"] == "\t" else "csv"
    (run_dir / f"metrics.{ext}").write_text(format_table(records, RECORD_COLUMNS, cfg["delimiter"]))
    return {"records": len(records), "methods": sorted({r["method"] for r in records})}


def cmd_sweep(cfg, run_dir, workers):
    _require(cfg, "model", "data")
    model = load_parameters(cfg["model"])
    schedule, norm = model_context(cfg["model"])
    scenes = load_split(cfg["data"], cfg["split"], cfg["max_scenes"])
    manifest = SweepManifest(
        grid=SweepGrid(
            tuple(float(c) for c in cfg["coverages"]), tuple(int(o) for o in cfg["octaves"]),
            tuple(int(n) for n in cfg["infer_steps"]), tuple(int(s) for s in cfg["strides"]),
        ),
        seed=int(cfg["seed"]),
        wind_deg=float(cfg["wind"]),
        grad_steps=int(cfg["grad_steps"]),
        grad_step_size=float(cfg["grad_step_size"]),
        backtrack=int(cfg["backtrack"]),
        solver=cfg["solver"],
        timing=cfg["timing"],
    )
    (run_dir / "sweep_manifest.json").write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True))
    ledger = Path(cfg["ledger"]) if cfg["ledger"] else run_dir / "ledger.jsonl"
    rows = run_sweep(model, scenes, norm, manifest, ledger, workers, schedule)
    ranked = rank_cells(rows)
    (run_dir / "sweep_metrics.csv").write_text(format_table(ranked, SWEEP_METRIC_COLUMNS))
    (run_dir / "sweep_ranking.csv").write_text(format_table(ranked, SWEEP_RANK_COLUMNS))
    best = {f"{cc:g}/{oc}": list(v) for (cc, oc), v in best_config_table(ranked).items()}
    (run_dir / "best_configs.json").write_text(json.dumps(best, indent=2, sort_keys=True))
    from .report import plot_ns_heatmaps

    plot_ns_heatmaps(ranked, manifest.grid, run_dir / "ns_heatmaps.png")
    return {
        "configs": len(rows),
        "missing": sum(r["status"] != "ok" for r in rows),
        "best": best,
    }


def cmd_report(cfg, run_dir, workers):
    from .report import write_report

    _require(cfg, "records")
    records = [json.loads(line) for line in Path(cfg["records"]).read_text().splitlines() if line.strip()]
    maps = []
    if cfg["data"] and cfg["masks"] and cfg["recon"] and int(cfg["error_maps"]) > 0:
        by_key = {}
        for rf in _recon_files(cfg["recon"]):
            bands, side = load_raster(rf)
            meta = side["metadata"]
            if meta.get("kind") == "recon":
                by_key.setdefault((meta["mask"], meta["scene_id"]), {})[meta["method"]] = bands["lst"]
        # hardest conditions first: highest coverage, then most octaves
        masks_dir = Path(cfg["masks"])
        keys = sorted(
            by_key,
            key=lambda k: (-load_mask(masks_dir / k[0]).params.coverage, -load_mask(masks_dir / k[0]).params.octaves, k),
        )
        for mname, sid in keys[: int(cfg["error_maps"])]:
            scene = load_scene(Path(cfg["data"]) / "scenes" / f"{sid}.rast")
            mask = load_mask(masks_dir / mname)
            recons = {m: by_key[(mname, sid)][m] for m in sorted(by_key[(mname, sid)])}
            maps.append((f"{sid}__{mname[:-5]}", scene.lst, mask.grid, recons))
    paths = write_report(records, run_dir, cfg["delimiter"], maps)
    return {k: str(v) for k, v in paths.items()}


COMMANDS = {
    "makedata": cmd_makedata,
    "train": cmd_train,
    "genmask": cmd_genmask,
    "infer": cmd_infer,
    "baseline": cmd_baseline,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "report": cmd_report,
}


# ---------------------------------------------------------------- argument parsing


def _floats(s):
    return [float(x) for x in s.split(",") if x]


def _ints(s):
    return [int(x) for x in s.split(",") if x]


def _delim(s):
    return {"csv": ",", ",": ",", "tsv": "\t", "tab": "\t", "\\t": "\t"}.get(s, s)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="urbandiff", description="Guided-diffusion gap filling for LST grids.")
    p.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with settings for this subcommand")
    common.add_argument("--from-manifest", help="re-run with the resolved config of an earlier manifest.json")
    common.add_argument("--out", help="run directory (default: <data-root>/runs/<stamp>-<hash>)")
    common.add_argument("--data-root", default=os.environ.get("URBANDIFF_DATA_ROOT", "."))
    common.add_argument("--workers", type=int, default=int(os.environ.get("URBANDIFF_WORKERS", "1")))
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    S = argparse.SUPPRESS  # flags left unset do not override lower layers

    a = sub.add_parser("makedata", parents=[common], help="generate the synthetic toy dataset")
    a.add_argument("--n-scenes", dest="n_scenes", type=int, default=S)
    a.add_argument("--size", type=int, default=S)
    a.add_argument("--seed", type=int, default=S)
    a.add_argument("--train-fraction", dest="train_fraction", type=float, default=S)

    a = sub.add_parser("train", parents=[common], help="train the denoiser")
    a.add_argument("--data", default=S)
    a.add_argument("--split", choices=["train", "test", "all"], default=S)
    a.add_argument("--max-scenes", dest="max_scenes", type=int, default=S)
    a.add_argument("--preset", choices=sorted(PRESETS["train"]), default=S)
    a.add_argument("--epochs", type=int, default=S)
    a.add_argument("--batch-size", dest="batch_size", type=int, default=S)
    a.add_argument("--lr", dest="initial_lr", type=float, default=S)
    a.add_argument("--lr-decay-factor", dest="lr_decay_factor", type=float, default=S)
    a.add_argument("--lr-decay-every", dest="lr_decay_every_epochs", type=int, default=S)
    a.add_argument("--widths", type=_ints, default=S, help="comma-separated channel widths per level")
    a.add_argument("--blocks-per-level", dest="blocks_per_level", type=int, default=S)
    a.add_argument("--attention-levels", dest="attention_levels", type=_ints, default=S)
    a.add_argument("--attention-heads", dest="attention_heads", type=int, default=S)
    a.add_argument("--dropout", type=float, default=S)
    a.add_argument("--seed", type=int, default=S)
    a.add_argument("--resume", action="store_true", default=S)

    a = sub.add_parser("genmask", parents=[common], help="generate cloud masks")
    a.add_argument("--coverage", type=float, default=S)
    a.add_argument("--octaves", type=int, default=S)
    a.add_argument("--wind", type=float, default=S)
    a.add_argument("--seed", type=int, default=S)
    a.add_argument("--size", type=int, default=S)
    a.add_argument("--suite", action="store_true", default=S, help="the 100-condition evaluation suite")

    for name, helptext in (("infer", "guided diffusion reconstruction"), ("baseline", "fast-marching baseline")):
        a = sub.add_parser(name, parents=[common], help=helptext)
        a.add_argument("--data", default=S)
        a.add_argument("--masks", default=S, help="mask raster or directory of masks")
        a.add_argument("--split", choices=["train", "test", "all"], default=S)
        a.add_argument("--max-scenes", dest="max_scenes", type=int, default=S)
        if name == "infer":
            a.add_argument("--model", default=S)
            a.add_argument("--infer-steps", dest="infer_steps", type=int, default=S)
            a.add_argument("--stride", dest="guidance_stride", type=int, default=S)
            a.add_argument("--grad-steps", dest="grad_steps", type=int, default=S)
            a.add_argument("--step-size", dest="grad_step_size", type=float, default=S)
            a.add_argument("--backtrack", type=int, default=S)
            a.add_argument("--solver", choices=SOLVERS, default=S)
            a.add_argument("--seed", type=int, default=S)
            a.add_argument("--best-configs", dest="best_configs", default=S)
        else:
            a.add_argument("--radius", type=int, default=S)

    a = sub.add_parser("evaluate", parents=[common], help="score reconstructions")
    a.add_argument("--data", default=S)
    a.add_argument("--masks", default=S)
    a.add_argument("--recon", nargs="+", default=S)
    a.add_argument("--delimiter", type=_delim, default=S)

    a = sub.add_parser("sweep", parents=[common], help="hyperparameter sweep")
    a.add_argument("--model", default=S)
    a.add_argument("--data", default=S)
    a.add_argument("--split", choices=["train", "test", "all"], default=S)
    a.add_argument("--max-scenes", dest="max_scenes", type=int, default=S)
    a.add_argument("--coverages", type=_floats, default=S)
    a.add_argument("--octaves", type=_ints, default=S)
    a.add_argument("--infer-steps", dest="infer_steps", type=_ints, default=S)
    a.add_argument("--strides", type=_ints, default=S)
    a.add_argument("--backtrack", type=int, default=S)
    a.add_argument("--seed", type=int, default=S)
    a.add_argument("--timing", choices=["wall", "nfe"], default=S)
    a.add_argument("--ledger", default=S, help="results ledger to append to (and resume from)")

    a = sub.add_parser("report", parents=[common], help="tables, trend plots and error maps")
    a.add_argument("--records", default=S, help="records.jsonl from evaluate")
    a.add_argument("--data", default=S)
    a.add_argument("--masks", default=S)
    a.add_argument("--recon", nargs="+", default=S)
    a.add_argument("--delimiter", type=_delim, default=S)
    a.add_argument("--error-maps", dest="error_maps", type=int, default=S)
    return p


GLOBAL_KEYS = ("command", "config", "from_manifest", "out", "data_root", "workers", "verbose")


def _fail(category: str, message: str, code: int) -> int:
    sys.stderr.write(json.dumps({"error": category, "message": message}) + "\n")
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    flags = {k: v for k, v in vars(args).items() if k not in GLOBAL_KEYS}
    try:
        file_cfg = {}
        if args.from_manifest:
            m = json.loads(Path(args.from_manifest).read_text())
            if m.get("command") != args.command:
                raise ConfigError(f"manifest is for {m.get('command')!r}, not {args.command!r}")
            file_cfg = m["config"]
        if args.config:
            file_cfg.update(json.loads(Path(args.config).read_text()))
        if not isinstance(file_cfg, dict):
            raise ConfigError("config file must hold a JSON object")
        cfg = resolve_config(args.command, file_cfg, flags)
        run_dir = prepare_run(args.command, cfg, args.out, args.data_root)
        summary = COMMANDS[args.command](cfg, run_dir, args.workers)
    except UrbanDiffError as exc:
        return _fail(exc.category, str(exc), 2)
    except json.JSONDecodeError as exc:
        return _fail("config", f"invalid JSON: {exc}", 2)
    except (TypeError, ValueError) as exc:
        return _fail("parameter", str(exc), 2)
    except OSError as exc:
        return _fail("io", str(exc), 3)
    print(json.dumps({"command": args.command, "run_dir": str(run_dir), **summary}, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())

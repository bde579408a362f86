import json

import pytest

import urbandiff.sweep as sweep_mod
from urbandiff.data import NormalizationSpec, make_toy_dataset
from urbandiff.denoiser import DenoiserConfig, build_denoiser
from urbandiff.errors import ConfigError
from urbandiff.guidance import expected_refinements
from urbandiff.sweep import (
    SweepConfig,
    SweepGrid,
    SweepManifest,
    best_config_table,
    format_table,
    rank_cells,
    read_ledger,
    run_sweep,
)


def row(n, tau, cc=0.85, oc=10, status="ok", **metrics):
    base = dict(ssim=0.8, rmse=1.0, psnr=30.0, r2=0.8, suhi_error=10.0, inference_time=1.0)
    base.update(metrics)
    if status != "ok":
        base = {k: None for k in base}
    return {"coverage": cc, "octaves": oc, "infer_steps": n, "stride": tau, "status": status, **base}


@pytest.fixture(scope="module")
def small():
    scenes = make_toy_dataset(3, (16, 16), seed=2)
    model = build_denoiser(DenoiserConfig.tiny(16, (8, 16)), seed=0).eval()
    return model, scenes, NormalizationSpec.fit(scenes)


def test_full_grid_size():
    grid = SweepGrid()
    assert len(grid) == 216
    assert len({c.key for c in grid.configs()}) == 216


def test_tie_break_prefers_fewer_steps_then_larger_stride():
    rows = [row(70, 1), row(20, 1), row(20, 4), row(70, 4)]
    ranked = rank_cells(rows)
    assert all(r["ns"] == pytest.approx(0.5) for r in ranked)
    order = sorted(ranked, key=lambda r: r["rank"])
    assert [(r["infer_steps"], r["stride"]) for r in order] == [(20, 4), (20, 1), (70, 4), (70, 1)]
    assert best_config_table(ranked) == {(0.85, 10): (20, 4)}


def test_single_config_scores_one():
    ranked = rank_cells([row(70, 1)])
    assert ranked[0]["ns"] == 1.0 and ranked[0]["rank"] == 1


def test_dominant_config_scores_one():
    good = row(40, 2, ssim=0.9, rmse=0.5, psnr=35.0, r2=0.95, suhi_error=1.0, inference_time=0.5)
    ranked = rank_cells([row(70, 1), good, row(100, 3, rmse=2.0)])
    best = next(r for r in ranked if r["infer_steps"] == 40)
    assert best["ns"] == pytest.approx(1.0) and best["rank"] == 1


def test_missing_configs_are_unranked():
    ranked = rank_cells([row(70, 1), row(20, 1, rmse=0.5), row(40, 1, status="missing")])
    missing = next(r for r in ranked if r["infer_steps"] == 40)
    assert missing["ns"] is None and missing["rank"] is None
    assert sorted(r["rank"] for r in ranked if r["rank"]) == [1, 2]


def test_cells_are_ranked_independently():
    rows = [row(20, 1, cc=0.2, rmse=0.5), row(70, 1, cc=0.2), row(20, 1, cc=0.85), row(70, 1, cc=0.85, rmse=0.5)]
    best = best_config_table(rank_cells(rows))
    assert best == {(0.2, 10): (20, 1), (0.85, 10): (70, 1)}


def test_manifest_round_trip_and_digest():
    m = SweepManifest(SweepGrid((0.5,), (6,), (20, 70), (1, 4)), seed=3, timing="nfe")
    assert SweepManifest.from_dict(json.loads(json.dumps(m.to_dict()))) == m
    assert m.digest() != SweepManifest(SweepGrid((0.5,), (6,), (20,), (1, 4)), seed=3, timing="nfe").digest()
    with pytest.raises(ConfigError):
        SweepManifest(timing="cpu")
    with pytest.raises(ConfigError):
        SweepGrid(strides=())


def test_sweep_bookkeeping_and_nfe_determinism(small, tmp_path):
    model, scenes, norm = small
    manifest = SweepManifest(SweepGrid((0.5,), (4,), (4, 10), (1, 3)), timing="nfe", backtrack=0)
    rows = run_sweep(model, scenes, norm, manifest)
    assert [(r["infer_steps"], r["stride"]) for r in rows] == [(4, 1), (4, 3), (10, 1), (10, 3)]
    for r in rows:
        assert r["status"] == "ok" and r["n"] == len(scenes)
        assert r["gradient_steps"] == expected_refinements(1000, r["infer_steps"], r["stride"])
        assert r["refinement_phases"] == r["gradient_steps"]
        # one denoiser call per step plus one per refinement
        assert r["inference_time"] == r["infer_steps"] + r["gradient_steps"]
    again = run_sweep(model, scenes, norm, manifest)
    assert format_table(rows, sweep_mod.SWEEP_METRIC_COLUMNS) == format_table(again, sweep_mod.SWEEP_METRIC_COLUMNS)


def test_ledger_resume_skips_finished_configs(small, tmp_path, monkeypatch):
    model, scenes, norm = small
    manifest = SweepManifest(SweepGrid((0.5,), (4,), (4, 6), (1, 2)), timing="nfe", backtrack=0)
    ledger = tmp_path / "ledger.jsonl"
    first = run_sweep(model, scenes, norm, manifest, ledger)
    with open(ledger, "a") as fh:
        fh.write('{"truncated": ')
    assert len(read_ledger(ledger)) == 4

    def boom(*a, **k):
        raise AssertionError("config recomputed")

    monkeypatch.setattr(sweep_mod, "evaluate_config", boom)
    assert run_sweep(model, scenes, norm, manifest, ledger) == first

    # a different manifest does not reuse the rows
    other = SweepManifest(SweepGrid((0.5,), (4,), (4, 6), (1, 2)), seed=1, timing="nfe", backtrack=0)
    with pytest.raises(AssertionError):
        run_sweep(model, scenes, norm, other, ledger)


def test_failed_config_is_recorded_missing(small, monkeypatch):
    model, scenes, norm = small

    def broken(*a, **k):
        raise RuntimeError("diverged")

    monkeypatch.setattr(sweep_mod, "reconstruct", broken)
    manifest = SweepManifest(SweepGrid((0.5,), (4,), (4,), (1,)), timing="nfe")
    (r,) = run_sweep(model, scenes, norm, manifest)
    assert r["status"] == "missing" and "diverged" in r["reason"]
    assert rank_cells([r])[0]["ns"] is None


def test_format_table_uses_repr_floats():
    text = format_table([{"a": 0.1, "b": None, "c": 3}], ["a", "b", "c"])
    assert text == "a,b,c\n0.1,,3\n"


def test_sweep_config_key():
    assert SweepConfig(0.85, 10, 70, 1).key == "cc0.85_oct10_T70_tau1"

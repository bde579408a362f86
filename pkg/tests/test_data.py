import json

import numpy as np
import pytest

from urbandiff.data import (
    NormalizationSpec,
    Scene,
    load_raster,
    load_scene,
    make_toy_dataset,
    save_dataset,
    save_raster,
    save_scene,
    scene_paths,
    sidecar_path,
    split_dataset,
    urban_rural_masks,
)
from urbandiff.errors import FormatError


def test_golden_bytes(tmp_path):
    p = save_raster(tmp_path / "g.rast", {"lst": np.array([[1.0, 2.0], [3.0, 4.0]])})
    assert p.read_bytes().hex() == "0000803f" "00000040" "00004040" "00008040"
    side = json.loads(sidecar_path(p).read_text())
    assert side["shape"] == [2, 2] and side["dtype"] == "<f4"
    assert side["bands"] == [{"name": "lst", "units": "", "offset": 0}]


def test_multiband_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    bands = {"a": rng.normal(size=(5, 7)), "b": rng.normal(size=(5, 7))}
    save_raster(tmp_path / "x.rast", bands, units={"a": "K"}, metadata={"seed": 3})
    back, side = load_raster(tmp_path / "x.rast")
    for k in bands:
        np.testing.assert_array_equal(back[k], bands[k].astype(np.float32))
    assert side["metadata"] == {"seed": 3}
    assert side["bands"][1]["offset"] == 5 * 7 * 4


def test_shape_mismatch_is_format_error(tmp_path):
    p = save_raster(tmp_path / "x.rast", {"lst": np.zeros((4, 4))})
    side = json.loads(sidecar_path(p).read_text())
    side["shape"] = [4, 5]
    sidecar_path(p).write_text(json.dumps(side))
    with pytest.raises(FormatError, match="bytes"):
        load_raster(p)


def test_missing_sidecar(tmp_path):
    (tmp_path / "x.rast").write_bytes(b"\0" * 16)
    with pytest.raises(FormatError):
        load_raster(tmp_path / "x.rast")


def test_scene_round_trip_and_bounds(tmp_path):
    scene = make_toy_dataset(1, (16, 16), seed=2)[0]
    back = load_scene(save_scene(scene, tmp_path / "s.rast"))
    np.testing.assert_array_equal(back.lst, scene.lst)
    np.testing.assert_array_equal(back.elevation, scene.elevation)
    assert back.scene_id == scene.scene_id and back.lst_bounds == scene.lst_bounds
    with pytest.raises(FormatError):
        Scene(np.full((4, 4), 400.0), np.zeros((4, 4)), np.zeros((4, 4)))
    with pytest.raises(FormatError):
        Scene(np.full((4, 4), 300.0), np.zeros((4, 5)), np.zeros((4, 4)))


def test_save_dataset_listing(tmp_path):
    scenes = make_toy_dataset(3, (16, 16), seed=0)
    save_dataset(scenes, tmp_path)
    assert [p.name for p in scene_paths(tmp_path)] == sorted(f"{s.scene_id}.rast" for s in scenes)


def test_split_sizes_and_determinism():
    items = list(range(10))
    tr, te = split_dataset(items, 0.8, seed=1)
    assert len(tr) == 8 and len(te) == 2
    assert sorted(tr + te) == items
    assert split_dataset(items, 0.8, seed=1) == (tr, te)
    with pytest.raises(ValueError):
        split_dataset([1, 2, 3], 0.8)


def test_toy_dataset_properties():
    scenes = make_toy_dataset(100, (32, 32), seed=0)
    corr = []
    for s in scenes:
        urban, rural = urban_rural_masks(s.built_up)
        assert s.lst[urban].mean() - s.lst[rural].mean() > 0
        corr.append(np.corrcoef(s.built_up.ravel(), s.lst.ravel())[0, 1])
    assert np.mean(corr) > 0.3


def test_toy_dataset_determinism():
    a = make_toy_dataset(5, (16, 16), seed=4)
    b = make_toy_dataset(5, (16, 16), seed=4)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.lst, y.lst)
    assert not np.array_equal(a[0].lst, make_toy_dataset(1, (16, 16), seed=5)[0].lst)


def test_normalization_round_trip():
    scenes = make_toy_dataset(10, (16, 16), seed=1)
    norm = NormalizationSpec.fit(scenes)
    z = np.stack([norm.normalize_lst(s.lst) for s in scenes])
    assert z.min() == pytest.approx(-1.0) and z.max() == pytest.approx(1.0)
    np.testing.assert_allclose(norm.denormalize_lst(norm.normalize_lst(scenes[0].lst)), scenes[0].lst, rtol=1e-12)
    assert NormalizationSpec.from_dict(norm.to_dict()) == norm

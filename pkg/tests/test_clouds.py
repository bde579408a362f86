import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from urbandiff.clouds import (
    CloudParams,
    generate_mask,
    hidden_orientation_deg,
    largest_hidden_component,
    load_mask,
    mask_grid_suite,
    save_mask,
)


def test_coverage_085_within_one_percent():
    m = generate_mask(CloudParams(0.85, 10, 135, 3), (32, 32))
    assert 0.84 <= 1 - m.grid.mean() <= 0.86
    assert m.achieved_coverage == pytest.approx(1 - m.grid.mean())


def test_near_empty_mask():
    m = generate_mask(CloudParams(0.01, 4, 0, 1), (32, 32))
    assert 1 - m.grid.mean() <= 0.02


@settings(max_examples=60, deadline=None)
@given(
    cov=st.floats(0.01, 0.99),
    octaves=st.integers(1, 10),
    wind=st.floats(0, 360),
    seed=st.integers(0, 2**31),
    side=st.sampled_from([8, 16, 32, 48]),
)
def test_binary_and_coverage(cov, octaves, wind, seed, side):
    m = generate_mask(CloudParams(cov, octaves, wind, seed), (side, side))
    assert set(np.unique(m.grid)) <= {0, 1}
    assert abs((1 - m.grid.mean()) - cov) <= 0.01


def test_determinism():
    p = CloudParams(0.5, 6, 90, 7)
    np.testing.assert_array_equal(generate_mask(p, (32, 32)).grid, generate_mask(p, (32, 32)).grid)
    assert not np.array_equal(generate_mask(p, (32, 32)).grid, generate_mask(CloudParams(0.5, 6, 90, 8), (32, 32)).grid)


def test_parameter_validation():
    with pytest.raises(ValueError):
        CloudParams(0.0, 2)
    with pytest.raises(ValueError):
        CloudParams(0.5, 0)
    with pytest.raises(ValueError):
        generate_mask(CloudParams(0.5, 2), (4, 4))


def test_higher_octaves_give_larger_gaps():
    def mean_largest(octaves):
        return np.mean([largest_hidden_component(generate_mask(CloudParams(0.5, octaves, 0, s), (32, 32))) for s in range(50)])

    sizes = [mean_largest(o) for o in (2, 6, 10)]
    assert sizes[0] < sizes[1] <= sizes[2]
    assert mean_largest(10) > mean_largest(2)


@pytest.mark.parametrize("wind", [0.0, 90.0, 135.0])
def test_wind_aligns_hidden_region(wind):
    angles = np.array([hidden_orientation_deg(generate_mask(CloudParams(0.5, 8, wind, s), (32, 32))) for s in range(100)])
    # axial mean: double the angles so 0 and 180 coincide
    mean = np.rad2deg(0.5 * np.angle(np.mean(np.exp(2j * np.deg2rad(angles)))))
    diff = (mean - wind + 90) % 180 - 90
    assert abs(diff) <= 15


def test_suite_cross_product():
    suite = mask_grid_suite()
    assert len(suite) == 100
    assert (suite[0].coverage, suite[0].octaves, suite[0].wind_deg) == (0.2, 2, 0.0)
    combos = {(p.coverage, p.octaves, p.wind_deg) for p in suite}
    expect = set(itertools.product((0.2, 0.4, 0.5, 0.7, 0.85), (2, 4, 6, 8, 10), (0.0, 90.0, 135.0, 180.0)))
    assert combos == expect
    assert mask_grid_suite() == suite


def test_mask_file_round_trip(tmp_path):
    m = generate_mask(CloudParams(0.7, 4, 180, 2), (16, 16))
    save_mask(m, tmp_path / "m.rast")
    back = load_mask(tmp_path / "m.rast")
    np.testing.assert_array_equal(back.grid, m.grid)
    assert back.params == m.params

import numpy as np
import pytest
import torch

from urbandiff.denoiser import (
    ConditioningStack,
    Denoiser,
    DenoiserConfig,
    assemble_input,
    build_denoiser,
    load_parameters,
    parameter_hash,
    predict_noise,
    read_parameter_header,
    save_parameters,
)
from urbandiff.errors import CompatibilityError, ShapeError, StateError


@pytest.fixture(scope="module")
def tiny():
    return build_denoiser(DenoiserConfig.tiny(16, (8, 16)), seed=0)


def _cond(h=16, w=16, seed=0):
    g = torch.Generator().manual_seed(seed)
    return ConditioningStack(torch.rand(h, w, generator=g), torch.randn(h, w, generator=g))


def test_output_shape(tiny):
    out = tiny(torch.randn(3, 3, 16, 16), torch.tensor([1, 500, 1000]))
    assert out.shape == (3, 1, 16, 16)
    assert torch.isfinite(out).all()


def test_default_config_builds():
    cfg = DenoiserConfig()
    assert cfg.levels == 4 and cfg.channel_widths == (64, 128, 256, 256)
    model = Denoiser(DenoiserConfig(spatial_size=32))
    assert model(torch.zeros(1, 3, 32, 32), torch.tensor([10])).shape == (1, 1, 32, 32)


def test_channel_order_and_broadcast():
    xt = torch.full((2, 4, 4), 7.0)
    cond = ConditioningStack(torch.full((4, 4), 0.25), torch.full((4, 4), -3.0))
    inp = assemble_input(xt, cond)
    assert inp.shape == (2, 3, 4, 4)
    assert inp[:, 0].eq(7.0).all() and inp[:, 1].eq(0.25).all() and inp[:, 2].eq(-3.0).all()
    with pytest.raises(ShapeError):
        assemble_input(torch.zeros(5, 5), cond)


def test_conditioning_validation():
    with pytest.raises(ValueError):
        ConditioningStack(torch.full((4, 4), 1.5), torch.zeros(4, 4))
    with pytest.raises(ShapeError):
        ConditioningStack(torch.zeros(4, 4), torch.zeros(4, 5))


def test_conditioning_changes_output(tiny):
    xt = torch.randn(16, 16, generator=torch.Generator().manual_seed(1))
    a = predict_noise(tiny, xt, _cond(seed=0), 300)
    b = predict_noise(tiny, xt, _cond(seed=1), 300)
    assert not torch.allclose(a, b)


def test_timestep_changes_output(tiny):
    xt = torch.randn(16, 16)
    assert not torch.allclose(predict_noise(tiny, xt, _cond(), 10), predict_noise(tiny, xt, _cond(), 900))


def test_batched_matches_single(tiny):
    xt = torch.randn(2, 16, 16)
    cond = _cond()
    both = predict_noise(tiny, xt, cond, 50)
    torch.testing.assert_close(both[1], predict_noise(tiny, xt[1], cond, 50), rtol=1e-5, atol=1e-5)


def test_seeded_build_is_deterministic():
    cfg = DenoiserConfig.tiny(16, (8, 16))
    assert parameter_hash(build_denoiser(cfg, 3)) == parameter_hash(build_denoiser(cfg, 3))
    assert parameter_hash(build_denoiser(cfg, 3)) != parameter_hash(build_denoiser(cfg, 4))


def test_shift_probe_is_spatially_aware(tiny):
    # a localised input change must change the output mostly nearby
    x = torch.zeros(1, 3, 16, 16)
    y = x.clone()
    y[0, 0, 2, 2] = 5.0
    t = torch.tensor([200])
    d = (tiny(y, t) - tiny(x, t)).abs()[0, 0]
    assert d[:8, :8].sum() > d[8:, 8:].sum()


def test_save_load_round_trip(tmp_path, tiny):
    p = save_parameters(tiny, tmp_path / "m.npz", extra={"note": "x"})
    back = load_parameters(p, expected=tiny.config)
    assert parameter_hash(back) == parameter_hash(tiny)
    assert read_parameter_header(p)["extra"] == {"note": "x"}
    x = torch.randn(1, 3, 16, 16)
    t = torch.tensor([5])
    torch.testing.assert_close(back(x, t), tiny(x, t), rtol=0, atol=0)


def test_truncated_file(tmp_path, tiny):
    p = save_parameters(tiny, tmp_path / "m.npz")
    data = p.read_bytes()
    p.write_bytes(data[: len(data) // 2])
    with pytest.raises(CompatibilityError):
        load_parameters(p)


def test_architecture_mismatch(tmp_path, tiny):
    p = save_parameters(tiny, tmp_path / "m.npz")
    with pytest.raises(CompatibilityError):
        load_parameters(p, expected=DenoiserConfig.tiny(16, (8, 16, 16)))


def test_meta_device_is_state_error():
    with torch.device("meta"):
        model = Denoiser(DenoiserConfig.tiny(16, (8, 16)))
    with pytest.raises(StateError):
        predict_noise(model, torch.zeros(16, 16), _cond(), 1)
    with pytest.raises(StateError):
        predict_noise(None, torch.zeros(16, 16), _cond(), 1)


def test_input_gradient_matches_finite_differences():
    model = build_denoiser(DenoiserConfig.tiny(16, (8, 16), dropout=0.0), seed=1, dtype=torch.float64)
    cond = ConditioningStack(torch.rand(16, 16, dtype=torch.float64), torch.randn(16, 16, dtype=torch.float64))
    rng = np.random.default_rng(0)
    x = torch.randn(16, 16, dtype=torch.float64, requires_grad=True)
    w = torch.randn(16, 16, dtype=torch.float64)
    f = lambda z: (predict_noise(model, z, cond, 400) * w).sum()
    (grad,) = torch.autograd.grad(f(x), x)
    for _ in range(8):
        v = torch.as_tensor(rng.standard_normal((16, 16)))
        h = 1e-5
        with torch.no_grad():
            fd = (f(x + h * v) - f(x - h * v)) / (2 * h)
        an = (grad * v).sum()
        assert abs(float(fd - an)) <= 1e-3 * abs(float(an)) + 1e-9

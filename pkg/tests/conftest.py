import hashlib
import json
import time
from dataclasses import dataclass

import pytest

from urbandiff.data import NormalizationSpec, make_toy_dataset, split_dataset
from urbandiff.denoiser import DenoiserConfig, build_denoiser, load_parameters, read_parameter_header, save_parameters
from urbandiff.train import TrainConfig, fit

# desk-scale recipe shared by the trend and sweep checks (also the CLI "toy" preset)
TOY_RECIPE = {
    "n_scenes": 200,
    "size": 32,
    "data_seed": 0,
    "widths": [16, 32, 64],
    "epochs": 150,
    "batch_size": 16,
    "initial_lr": 1e-3,
    "lr_decay_every_epochs": 10,
    "seed": 0,
}

ACCEPTANCE: dict = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[number] = (ok, detail)
    print(f"criterion {number}: {'PASS' if ok else 'FAIL'} ({detail})")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 10):
        if n in ACCEPTANCE:
            ok, detail = ACCEPTANCE[n]
            terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")
        else:
            terminalreporter.write_line(f"criterion {n}: NOT RUN")


@dataclass
class ToySetup:
    model: object
    train: list
    test: list
    norm: NormalizationSpec
    train_seconds: float
    path: object


def _recipe_digest() -> str:
    return hashlib.sha256(json.dumps(TOY_RECIPE, sort_keys=True).encode()).hexdigest()[:12]


@pytest.fixture(scope="session")
def toy_setup(request, tmp_path_factory):
    """200 toy scenes, 80/20 split and a tiny model trained on the training part.

    The trained parameters are cached in pytest's cache directory keyed by
    the recipe; ``pytest --cache-clear`` forces a fresh training run.
    """
    r = TOY_RECIPE
    scenes = make_toy_dataset(r["n_scenes"], (r["size"], r["size"]), r["data_seed"])
    train, test = split_dataset(scenes, 0.8, r["data_seed"])
    norm = NormalizationSpec.fit(train)
    cache_dir = request.config.cache.mkdir("urbandiff-toy-model")
    path = cache_dir / f"toy-{_recipe_digest()}.npz"
    if path.exists():
        model = load_parameters(path)
        seconds = read_parameter_header(path)["extra"]["train_seconds"]
    else:
        cfg = DenoiserConfig.tiny(r["size"], tuple(r["widths"]))
        tcfg = TrainConfig(
            epochs=r["epochs"], batch_size=r["batch_size"], initial_lr=r["initial_lr"],
            lr_decay_every_epochs=r["lr_decay_every_epochs"], seed=r["seed"],
        )
        start = time.perf_counter()
        model = fit(build_denoiser(cfg, r["seed"]), train, tcfg, norm).model
        seconds = time.perf_counter() - start
        save_parameters(model, path, extra={"normalization": norm.to_dict(), "train_seconds": seconds, "recipe": r})
    return ToySetup(model.eval(), train, test, norm, seconds, path)

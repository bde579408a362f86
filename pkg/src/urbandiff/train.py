"""Noise-regression training loop with per-epoch checkpoints.

A checkpoint directory holds ``params.npz`` (the parameter file),
``optimizer.pt`` (Adam state), and ``state.json`` (epoch index, RNG states,
loss history). The training log is JSON lines of
``{"epoch", "mean_loss", "lr"}``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .data import NormalizationSpec, Scene
from .denoiser import Denoiser, load_parameters, save_parameters
from .diffusion import NoiseSchedule, build_linear_schedule
from .errors import TrainingError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 75
    batch_size: int = 16
    initial_lr: float = 1e-4
    lr_decay_factor: float = 0.9
    lr_decay_every_epochs: int = 2
    total_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1 or self.initial_lr <= 0 or self.lr_decay_every_epochs < 1:
            raise ValueError("batch_size, initial_lr and lr_decay_every_epochs must be positive")
        if not 0 < self.lr_decay_factor <= 1:
            raise ValueError("lr_decay_factor must lie in (0, 1]")

    def schedule(self) -> NoiseSchedule:
        return build_linear_schedule(self.total_steps, self.beta_start, self.beta_end)

    def to_dict(self) -> dict:
        return asdict(self)


def learning_rate(cfg: TrainConfig, epoch: int) -> float:
    """Learning rate in force during 0-based ``epoch``."""
    return cfg.initial_lr * cfg.lr_decay_factor ** (epoch // cfg.lr_decay_every_epochs)


def scenes_to_tensors(scenes: Sequence[Scene], norm: NormalizationSpec, dtype=torch.float32):
    """Normalised ``x0 (N, H, W)`` and conditioning ``(N, 2, H, W)``."""
    x0 = np.stack([norm.normalize_lst(s.lst) for s in scenes])
    cond = np.stack([np.stack([s.built_up, norm.normalize_elevation(s.elevation)]) for s in scenes])
    return torch.as_tensor(x0, dtype=dtype), torch.as_tensor(cond, dtype=dtype)


def denoising_loss(model, x0, cond, t, noise, schedule: NoiseSchedule) -> torch.Tensor:
    """Mean squared error between ``noise`` and the model's estimate at per-sample steps ``t``."""
    ab = torch.as_tensor(schedule.alpha_bars[np.asarray(t) - 1], dtype=x0.dtype)[:, None, None]
    xt = ab.sqrt() * x0 + (1.0 - ab).sqrt() * noise
    pred = model(torch.cat([xt[:, None], cond], dim=1), torch.as_tensor(t))[:, 0]
    return ((noise - pred) ** 2).mean()


def training_step(
    model,
    optimizer: torch.optim.Optimizer,
    x0: torch.Tensor,
    cond: torch.Tensor,
    schedule: NoiseSchedule,
    generator: torch.Generator,
    scene_ids: Optional[Sequence[str]] = None,
) -> float:
    """Draw ``t ~ U{1..T}`` and ``eps ~ N(0, I)`` per sample, take one optimizer step."""
    if x0.shape[0] == 0:
        raise TrainingError("empty batch")
    t = torch.randint(1, schedule.total_steps + 1, (x0.shape[0],), generator=generator)
    noise = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    model.train()
    loss = denoising_loss(model, x0, cond, t, noise, schedule)
    if not torch.isfinite(loss):
        raise TrainingError(f"non-finite loss at t={t.tolist()} scenes={list(scene_ids or [])}")
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return float(loss.detach())


@dataclass
class FitResult:
    model: Denoiser
    history: list = field(default_factory=list)


def _save_checkpoint(ckpt_dir: Path, model, optimizer, epoch, history, np_rng, gen, cfg, norm, extra):
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    save_parameters(model, ckpt_dir / "params.npz", extra={"normalization": norm.to_dict() if norm else None, **extra})
    torch.save(optimizer.state_dict(), ckpt_dir / "optimizer.pt")
    state = {
        "epoch": epoch,
        "history": history,
        "train_config": cfg.to_dict(),
        "numpy_rng": np_rng.bit_generator.state,
        "torch_rng": gen.get_state().tolist(),
        "dropout_rng": torch.get_rng_state().tolist(),
    }
    (ckpt_dir / "state.json").write_text(json.dumps(state))


def fit(
    model: Denoiser,
    scenes: Sequence[Scene],
    cfg: TrainConfig,
    norm: Optional[NormalizationSpec] = None,
    checkpoint_dir=None,
    log_path=None,
    resume: bool = False,
    progress: bool = False,
) -> FitResult:
    """Train on (already split) training scenes; returns the model and per-epoch losses.

    Batching is single-threaded and ordered by a seeded shuffle, and dropout
    draws from a forked, seeded global generator, so equal seeds give equal
    histories.
    """
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        return _fit(model, scenes, cfg, norm, checkpoint_dir, log_path, resume, progress)


def _fit(model, scenes, cfg, norm, checkpoint_dir, log_path, resume, progress) -> FitResult:
    schedule = cfg.schedule()
    norm = norm or NormalizationSpec.fit(scenes)
    x0_all, cond_all = scenes_to_tensors(scenes, norm)
    ids = [s.scene_id for s in scenes]
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.initial_lr)
    np_rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    history: list[dict] = []
    start_epoch = 0

    ckpt = Path(checkpoint_dir) if checkpoint_dir else None
    if resume and ckpt and (ckpt / "state.json").exists():
        state = json.loads((ckpt / "state.json").read_text())
        loaded = load_parameters(ckpt / "params.npz", expected=model.config)
        model.load_state_dict(loaded.state_dict())
        optimizer.load_state_dict(torch.load(ckpt / "optimizer.pt"))
        np_rng.bit_generator.state = state["numpy_rng"]
        gen.set_state(torch.tensor(state["torch_rng"], dtype=torch.uint8))
        torch.set_rng_state(torch.tensor(state["dropout_rng"], dtype=torch.uint8))
        history = state["history"]
        start_epoch = state["epoch"] + 1
        log.info("resuming from epoch %d", start_epoch)

    n = len(scenes)
    for epoch in range(start_epoch, cfg.epochs):
        lr = learning_rate(cfg, epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr
        order = np_rng.permutation(n)
        losses = []
        for b in range(0, n, cfg.batch_size):
            idx = order[b : b + cfg.batch_size]
            losses.append(
                training_step(model, optimizer, x0_all[idx], cond_all[idx], schedule, gen, [ids[i] for i in idx])
            )
        record = {"epoch": epoch, "mean_loss": float(np.mean(losses)), "lr": lr}
        history.append(record)
        if progress:
            log.info("epoch %d loss %.5f lr %.3g", epoch, record["mean_loss"], lr)
        if log_path:
            with open(log_path, "a") as fh:
                fh.write(json.dumps(record) + "\n")
        if ckpt:
            _save_checkpoint(ckpt, model, optimizer, epoch, history, np_rng, gen, cfg, norm, {})
    model.eval()
    return FitResult(model, history)

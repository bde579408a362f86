"""Conditional noise-predicting U-Net and its parameter file format.

Input channels are fixed as ``[noisy LST, built_up, elevation]``. The
timestep enters through a sinusoidal embedding that is projected and added
inside every residual block. Normalisation is GroupNorm, the nonlinearity
SiLU, downsampling a stride-2 conv and upsampling nearest-neighbour + conv.
"""

from __future__ import annotations

import io
import json
import math
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import CompatibilityError, ShapeError, StateError

PARAM_FORMAT = "urbandiff-params"
PARAM_VERSION = 1
CHANNEL_ORDER = ("noisy_lst", "built_up", "elevation")


@dataclass(frozen=True)
class ConditioningStack:
    built_up: torch.Tensor
    elevation: torch.Tensor

    def __post_init__(self):
        if self.built_up.shape != self.elevation.shape:
            raise ShapeError("built_up and elevation shapes differ")
        if not (torch.isfinite(self.built_up).all() and torch.isfinite(self.elevation).all()):
            raise ValueError("conditioning layers must be finite")
        if self.built_up.min() < 0 or self.built_up.max() > 1:
            raise ValueError("built_up must lie in [0, 1]")

    @property
    def shape(self):
        return tuple(self.built_up.shape)

    def tensor(self) -> torch.Tensor:
        """Stacked ``(..., 2, H, W)`` conditioning tensor."""
        return torch.stack([self.built_up, self.elevation], dim=-3)


@dataclass(frozen=True)
class DenoiserConfig:
    levels: int = 4
    channel_widths: tuple = (64, 128, 256, 256)
    blocks_per_level: int = 2
    attention_levels: tuple = (2, 3)
    attention_heads: int = 8
    dropout: float = 0.1
    input_channels: int = 3
    output_channels: int = 1
    spatial_size: int = 128
    time_embed_dim: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "channel_widths", tuple(self.channel_widths))
        object.__setattr__(self, "attention_levels", tuple(self.attention_levels))
        if len(self.channel_widths) != self.levels:
            raise ValueError("channel_widths must have one entry per level")
        if self.input_channels != 1 + 2:
            raise ValueError("input_channels must be 1 + number of conditioning layers (2)")
        if any(not 0 <= lvl < self.levels for lvl in self.attention_levels):
            raise ValueError("attention_levels out of range")
        if self.spatial_size % (2 ** (self.levels - 1)):
            raise ValueError("spatial_size must be divisible by 2**(levels-1)")

    @classmethod
    def tiny(cls, spatial_size: int = 16, widths: Sequence[int] = (8, 16), **kw) -> "DenoiserConfig":
        """Scaled-down config for desk-scale training and tests."""
        levels = len(widths)
        kw.setdefault("attention_levels", (levels - 1,))
        kw.setdefault("attention_heads", 2)
        kw.setdefault("blocks_per_level", 1)
        return cls(levels=levels, channel_widths=tuple(widths), spatial_size=spatial_size, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_widths"] = list(self.channel_widths)
        d["attention_levels"] = list(self.attention_levels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        return cls(**d)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def _groups(ch: int) -> int:
    for g in (8, 4, 2, 1):
        if ch % g == 0:
            return g
    return 1


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, t_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(c_in), c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.t_proj = nn.Linear(t_dim, c_out)
        self.norm2 = nn.GroupNorm(_groups(c_out), c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.t_proj(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class AttentionBlock(nn.Module):
    def __init__(self, ch: int, heads: int, dropout: float):
        super().__init__()
        self.norm = nn.GroupNorm(_groups(ch), ch)
        self.attn = nn.MultiheadAttention(ch, heads, dropout=dropout, batch_first=True)

    def forward(self, x):
        b, c, h, w = x.shape
        seq = self.norm(x).flatten(2).transpose(1, 2)
        out, _ = self.attn(seq, seq, seq, need_weights=False)
        return x + out.transpose(1, 2).reshape(b, c, h, w)


class Denoiser(nn.Module):
    """U-Net predicting the noise component of ``x_t``."""

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        widths = config.channel_widths
        t_dim = config.time_embed_dim or 4 * widths[0]
        self.t_dim = t_dim
        self.time_mlp = nn.Sequential(nn.Linear(widths[0], t_dim), nn.SiLU(), nn.Linear(t_dim, t_dim))
        self.stem = nn.Conv2d(config.input_channels, widths[0], 3, padding=1)

        def attn(level, ch):
            if level in config.attention_levels:
                return AttentionBlock(ch, config.attention_heads, config.dropout)
            return nn.Identity()

        self.down_blocks = nn.ModuleList()
        self.down_attn = nn.ModuleList()
        self.downsample = nn.ModuleList()
        skip_ch = [widths[0]]
        ch = widths[0]
        for lvl, w in enumerate(widths):
            for _ in range(config.blocks_per_level):
                self.down_blocks.append(ResBlock(ch, w, t_dim))
                self.down_attn.append(attn(lvl, w))
                ch = w
                skip_ch.append(ch)
            if lvl < config.levels - 1:
                self.downsample.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))
                skip_ch.append(ch)

        deepest = config.levels - 1
        self.mid1 = ResBlock(ch, ch, t_dim)
        self.mid_attn = attn(deepest, ch)
        self.mid2 = ResBlock(ch, ch, t_dim)

        self.up_blocks = nn.ModuleList()
        self.up_attn = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for lvl in reversed(range(config.levels)):
            w = widths[lvl]
            for _ in range(config.blocks_per_level + 1):
                self.up_blocks.append(ResBlock(ch + skip_ch.pop(), w, t_dim))
                self.up_attn.append(attn(lvl, w))
                ch = w
            if lvl > 0:
                self.upsample.append(nn.Conv2d(ch, ch, 3, padding=1))

        self.out_norm = nn.GroupNorm(_groups(ch), ch)
        self.out_conv = nn.Conv2d(ch, config.output_channels, 3, padding=1)

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        cfg = self.config
        temb = timestep_embedding(t, cfg.channel_widths[0]).to(x.dtype)
        temb = self.time_mlp(temb)

        h = self.stem(x)
        skips = [h]
        i = 0
        for lvl in range(cfg.levels):
            for _ in range(cfg.blocks_per_level):
                h = self.down_attn[i](self.down_blocks[i](h, temb))
                skips.append(h)
                i += 1
            if lvl < cfg.levels - 1:
                h = self.downsample[lvl](h)
                skips.append(h)

        h = self.mid2(self.mid_attn(self.mid1(h, temb)), temb)

        i = 0
        for k, lvl in enumerate(reversed(range(cfg.levels))):
            for _ in range(cfg.blocks_per_level + 1):
                h = torch.cat([h, skips.pop()], dim=1)
                h = self.up_attn[i](self.up_blocks[i](h, temb))
                i += 1
            if lvl > 0:
                h = F.interpolate(h, scale_factor=2, mode="nearest")
                h = self.upsample[k](h)

        return self.out_conv(F.silu(self.out_norm(h)))


def build_denoiser(config: DenoiserConfig, seed: int = 0, dtype=torch.float32) -> Denoiser:
    """Deterministically initialised model in evaluation mode."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = Denoiser(config)
    return model.to(dtype).eval()


def assemble_input(xt: torch.Tensor, cond: ConditioningStack) -> torch.Tensor:
    """Stack ``[x_t, built_up, elevation]`` along a new channel axis.

    ``(H, W)`` inputs give ``(3, H, W)``; ``(B, H, W)`` give ``(B, 3, H, W)``.
    Conditioning without a batch axis is broadcast over the batch.
    """
    bu, el = cond.built_up, cond.elevation
    if xt.shape[-2:] != bu.shape[-2:]:
        raise ShapeError(f"grid {tuple(xt.shape)} does not match conditioning {tuple(bu.shape)}")
    if bu.dim() < xt.dim():
        bu = bu.expand_as(xt)
        el = el.expand_as(xt)
    elif bu.shape != xt.shape:
        raise ShapeError(f"grid {tuple(xt.shape)} does not match conditioning {tuple(bu.shape)}")
    return torch.stack([xt, bu.to(xt.dtype), el.to(xt.dtype)], dim=-3)


def predict_noise(model: nn.Module, xt: torch.Tensor, cond: ConditioningStack, t: int) -> torch.Tensor:
    """Noise estimate with the same shape as ``xt``.

    Gradients flow through when ``xt`` requires grad.
    """
    if model is None:
        raise StateError("no denoiser supplied")
    if any(p.is_meta for p in model.parameters()):
        raise StateError("denoiser parameters are not initialised")
    x_in = assemble_input(xt, cond)
    squeeze = x_in.dim() == 3
    if squeeze:
        x_in = x_in[None]
    tt = torch.full((x_in.shape[0],), t, dtype=torch.long)
    out = model(x_in, tt)[:, 0]
    return out[0] if squeeze else out


def parameter_hash(model: nn.Module) -> str:
    import hashlib

    h = hashlib.sha256()
    for name, p in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()[:16]


def save_parameters(model: Denoiser, path, extra: Optional[dict] = None) -> Path:
    """Write an ``.npz`` container: a JSON header plus one array per tensor."""
    path = Path(path)
    meta = {
        "format": PARAM_FORMAT,
        "version": PARAM_VERSION,
        "config": model.config.to_dict(),
        "channel_order": list(CHANNEL_ORDER),
        "dtype": str(next(model.parameters()).dtype).replace("torch.", ""),
        "extra": extra or {},
    }
    arrays = {f"p/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    buf = io.BytesIO()
    np.savez(buf, __meta__=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8), **arrays)
    path.write_bytes(buf.getvalue())
    return path


def read_parameter_header(path) -> dict:
    try:
        with np.load(Path(path), allow_pickle=False) as data:
            meta = json.loads(bytes(data["__meta__"]).decode())
    except (OSError, ValueError, KeyError, EOFError, zipfile.BadZipFile) as exc:
        raise CompatibilityError(f"unreadable parameter file {path}: {exc}") from exc
    if meta.get("format") != PARAM_FORMAT or meta.get("version") != PARAM_VERSION:
        raise CompatibilityError(f"unsupported parameter file format/version in {path}")
    return meta


def load_parameters(path, expected: Optional[DenoiserConfig] = None) -> Denoiser:
    """Rebuild a model from a parameter file.

    ``expected`` guards against loading weights for a different architecture.
    """
    meta = read_parameter_header(path)
    try:
        config = DenoiserConfig.from_dict(meta["config"])
    except (TypeError, ValueError) as exc:
        raise CompatibilityError(f"bad embedded config: {exc}") from exc
    if expected is not None and config != expected:
        raise CompatibilityError(f"file config {config} does not match expected {expected}")
    if tuple(meta.get("channel_order", ())) != CHANNEL_ORDER:
        raise CompatibilityError("channel order mismatch")
    try:
        with np.load(Path(path), allow_pickle=False) as data:
            state = {k[2:]: torch.from_numpy(np.array(data[k])) for k in data.files if k.startswith("p/")}
    except (OSError, ValueError, EOFError, zipfile.BadZipFile) as exc:
        raise CompatibilityError(f"corrupt parameter payload in {path}: {exc}") from exc
    model = Denoiser(config).to(getattr(torch, meta.get("dtype", "float32")))
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise CompatibilityError(str(exc)) from exc
    return model.eval()

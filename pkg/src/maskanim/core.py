"""Shared domain types, resampling operators, value-range contracts and file I/O.

Resampling convention, used by every module: pixel i spans [i, i+1) with its
center at i + 0.5 ("half-pixel centers"). Resizing applies a triangle
(bilinear) kernel whose support widens by the reduction factor when
downscaling, so every input pixel contributes (area-consistent) and constant
images are fixed points. Weights are built and applied in float64 and
renormalized per output pixel, which keeps constants bit-exact after the cast
back to the input dtype; border pixels renormalize over their in-bounds taps.

All images and masks are real-valued in [0, 1]. File I/O converts 8-bit PNG
data to [0, 1] by dividing by 255.
"""

from __future__ import annotations

import configparser
import hashlib
import math
from dataclasses import dataclass, fields
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch
from PIL import Image


class ConfigError(Exception):
    """Raised for structurally invalid or inconsistent configuration."""


def _is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def _check_unit_range(data: torch.Tensor, what: str) -> None:
    if data.numel() == 0:
        raise ValueError(f"{what} is empty")
    if not torch.isfinite(data).all():
        raise ValueError(f"{what} contains non-finite values")
    lo, hi = data.min().item(), data.max().item()
    if lo < 0.0 or hi > 1.0:
        raise ValueError(f"{what} values outside [0, 1]: min={lo}, max={hi}")


@dataclass(frozen=True, eq=False)
class Frame:
    """A square RGB image, shape (3, H, H), float in [0, 1].

    The side must be a power of two (>= 4, so that downscaled working copies
    of toy-scale frames remain valid); the configured pipeline resolution is
    additionally required to be >= 32 by PipelineConfig.
    """

    data: torch.Tensor

    def __post_init__(self):
        d = self.data
        if d.ndim != 3 or d.shape[0] != 3:
            raise ValueError(f"Frame must have shape (3, H, W), got {tuple(d.shape)}")
        if d.shape[1] != d.shape[2]:
            raise ValueError(f"Frame must be square, got {tuple(d.shape)}")
        if not _is_power_of_two(d.shape[1]) or d.shape[1] < 4:
            raise ValueError(f"Frame side must be a power of two >= 4, got {d.shape[1]}")
        if not d.dtype.is_floating_point:
            raise ValueError(f"Frame data must be floating point, got {d.dtype}")
        _check_unit_range(d, "Frame")

    @property
    def resolution(self) -> int:
        return self.data.shape[1]

    @classmethod
    def from_array(cls, array) -> "Frame":
        return cls(torch.as_tensor(array, dtype=torch.float32))


@dataclass(frozen=True, eq=False)
class Mask:
    """A square single-channel soft foreground map, shape (1, H, H), float in [0, 1]."""

    data: torch.Tensor

    def __post_init__(self):
        d = self.data
        if d.ndim != 3 or d.shape[0] != 1:
            raise ValueError(f"Mask must have shape (1, H, W), got {tuple(d.shape)}")
        if d.shape[1] != d.shape[2]:
            raise ValueError(f"Mask must be square, got {tuple(d.shape)}")
        if not d.dtype.is_floating_point:
            raise ValueError(f"Mask data must be floating point, got {d.dtype}")
        _check_unit_range(d, "Mask")

    @property
    def resolution(self) -> int:
        return self.data.shape[1]

    @classmethod
    def from_array(cls, array) -> "Mask":
        return cls(torch.as_tensor(array, dtype=torch.float32))


@dataclass(frozen=True, eq=False)
class VideoClip:
    """An ordered sequence of frames from one identity/scene.

    Dataset clips always carry >= 2 frames (a source/driver pair must exist);
    generated clips may be shorter (reconstructing a 2-frame clip yields one
    frame), so only non-emptiness is enforced here.
    """

    id: str
    frames: tuple

    def __post_init__(self):
        if len(self.frames) < 1:
            raise ValueError(f"VideoClip {self.id!r} has no frames")
        res = self.frames[0].resolution
        for f in self.frames:
            if f.resolution != res:
                raise ValueError(f"VideoClip {self.id!r} mixes resolutions {res} and {f.resolution}")

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def resolution(self) -> int:
        return self.frames[0].resolution


# ---------------------------------------------------------------------------
# Resampling operators D (downscale) and U (upscale)
# ---------------------------------------------------------------------------


@lru_cache(maxsize=128)
def _resample_weights(n_in: int, n_out: int) -> torch.Tensor:
    """Row-stochastic (n_out, n_in) float64 matrix for one axis."""
    scale = n_out / n_in
    # Triangle kernel; widen support by the reduction factor on downscale.
    f = min(scale, 1.0)
    radius = 1.0 / f
    w = torch.zeros(n_out, n_in, dtype=torch.float64)
    for j in range(n_out):
        center = (j + 0.5) / scale
        lo = max(0, int(math.floor(center - radius)))
        hi = min(n_in, int(math.ceil(center + radius)) + 1)
        for i in range(lo, hi):
            t = (i + 0.5 - center) * f
            w[j, i] = max(0.0, 1.0 - abs(t))
        w[j] /= w[j].sum()
    return w

def resample_tensor(x: torch.Tensor, target_resolution: int) -> torch.Tensor:
    """Resize the last two (equal) dims of `x` to target_resolution.

    Accepts any leading batch/channel dims; differentiable; returns the input
    dtype, values clamped to [0, 1].
    """
    h, w = x.shape[-2], x.shape[-1]
    if h != w:
        raise ValueError(f"resample expects square input, got {h}x{w}")
    if target_resolution < 1:
        raise ValueError(f"target resolution must be positive, got {target_resolution}")
    if target_resolution == h:
        return x
    wy = _resample_weights(h, target_resolution)
    y = torch.matmul(wy, x.to(torch.float64))
    y = torch.matmul(y, wy.transpose(0, 1))
    return y.clamp(0.0, 1.0).to(x.dtype)


def downscale(x, target_resolution: int):
    """Operator D: reduce a Frame/Mask/tensor to target_resolution per axis."""
    data = x.data if isinstance(x, (Frame, Mask)) else x
    if target_resolution < 1:
        raise ValueError(f"target resolution must be positive, got {target_resolution}")
    if target_resolution > data.shape[-1]:
        raise ValueError(
            f"downscale target {target_resolution} exceeds source {data.shape[-1]}"
        )
    out = resample_tensor(data, target_resolution)
    if isinstance(x, Frame):
        return Frame(out)
    if isinstance(x, Mask):
        return Mask(out)
    return out


def upscale(x, target_resolution: int):
    """Operator U: enlarge a Frame/Mask/tensor to target_resolution per axis."""
    data = x.data if isinstance(x, (Frame, Mask)) else x
    if target_resolution < 1:
        raise ValueError(f"target resolution must be positive, got {target_resolution}")
    if target_resolution < data.shape[-1]:
        raise ValueError(
            f"upscale target {target_resolution} is below source {data.shape[-1]}"
        )
    out = resample_tensor(data, target_resolution)
    if isinstance(x, Frame):
        return Frame(out)
    if isinstance(x, Mask):
        return Mask(out)
    return out


# ---------------------------------------------------------------------------
# Pipeline configuration
# ---------------------------------------------------------------------------


@dataclass
class PipelineConfig:
    """All hyperparameters of the pipeline.

    Defaults are the full-scale values; PipelineConfig.toy() gives a
    desk-scale variant that trains in minutes on a CPU.
    """

    # Geometry / model structure
    frame_resolution: int = 256
    mask_resolution: int = 64
    base_channels: int = 64
    max_channels: int = 512
    encoder_depth: int = 5

    # Loss weights and schedule
    lambda_mask: float = 100.0
    lambda_reconstruct: float = 10.0
    learning_rate: float = 2e-4
    betas: tuple = (0.5, 0.9)
    batch_size: int = 16
    epochs: int = 100
    lr_decay_epochs: tuple = (60, 90)
    lr_decay_factor: float = 0.1
    refinement_start_epoch: int = 1
    seed: int = 0

    # Perturbation constants
    strip_count: int = 6
    strip_scale_range: tuple = (0.75, 1.25)
    global_scale_range: tuple = (0.75, 1.25)
    poisson_lambda: float = 20.0
    shrink_factor: float = 0.75
    jitter_scale_range: tuple = (0.9, 1.1)
    jitter_hue_range: tuple = (-0.1, 0.1)

    # Reconstruction loss: scales default to (R, R/2, R/4); feature layers
    # are indices into the selected extractor's layer list.
    reconstruction_scales: tuple = ()
    vgg_weights: str = ""
    vgg_layers: tuple = (1, 11, 29)
    stub_pool_factors: tuple = (1, 2, 4)
    freeze_mask_in_coarse: bool = False

    # Run behavior
    checkpoint_every: int = 1
    num_threads: int = 0
    workers: int = 0

    def __post_init__(self):
        if not self.reconstruction_scales:
            r = self.frame_resolution
            self.reconstruction_scales = (r, r // 2, r // 4)
        self.validate()

    def validate(self) -> None:
        c = self
        if c.mask_resolution * 4 != c.frame_resolution:
            raise ConfigError(
                f"mask_resolution*4 must equal frame_resolution "
                f"({c.mask_resolution}*4 != {c.frame_resolution})"
            )
        if not _is_power_of_two(c.frame_resolution) or c.frame_resolution < 32:
            raise ConfigError(f"frame_resolution must be a power of two >= 32, got {c.frame_resolution}")
        if c.base_channels < 1 or c.max_channels < c.base_channels:
            raise ConfigError("base_channels must be >= 1 and <= max_channels")
        if c.encoder_depth < 1:
            raise ConfigError("encoder_depth must be >= 1")
        if c.frame_resolution >> c.encoder_depth < 1:
            raise ConfigError("encoder_depth too deep for frame_resolution")
        if c.lambda_mask < 0 or c.lambda_reconstruct < 0:
            raise ConfigError("loss weights must be non-negative")
        if c.learning_rate <= 0 or c.batch_size < 1 or c.epochs < 1:
            raise ConfigError("learning_rate, batch_size and epochs must be positive")
        if not 0 < c.lr_decay_factor <= 1:
            raise ConfigError("lr_decay_factor must be in (0, 1]")
        if list(c.lr_decay_epochs) != sorted(c.lr_decay_epochs):
            raise ConfigError("lr_decay_epochs must be sorted")
        if c.refinement_start_epoch < 0:
            raise ConfigError("refinement_start_epoch must be >= 0")
        if c.strip_count < 1:
            raise ConfigError("strip_count must be >= 1")
        for name in ("strip_scale_range", "global_scale_range", "jitter_scale_range", "jitter_hue_range"):
            lo, hi = getattr(c, name)
            if lo > hi:
                raise ConfigError(f"{name} is not well-ordered: ({lo}, {hi})")
        if not 0 < c.shrink_factor <= 1:
            raise ConfigError("shrink_factor must be in (0, 1]")
        if c.poisson_lambda < 0:
            raise ConfigError("poisson_lambda must be >= 0")
        for s in c.reconstruction_scales:
            if s < 1 or s > c.frame_resolution:
                raise ConfigError(f"reconstruction scale {s} outside [1, frame_resolution]")

    @classmethod
    def toy(cls, **overrides) -> "PipelineConfig":
        """Desk-scale configuration: 64x64 frames, 16x16 masks, tiny networks."""
        values = dict(
            frame_resolution=64,
            mask_resolution=16,
            base_channels=8,
            max_channels=64,
            encoder_depth=3,
            batch_size=4,
            epochs=2,
            lr_decay_epochs=(),
            num_threads=1,
        )
        values.update(overrides)
        return cls(**values)

    def structural_fingerprint(self) -> str:
        """Hash of the fields a checkpoint's weights structurally depend on."""
        key = (
            f"{self.frame_resolution}|{self.mask_resolution}|{self.base_channels}"
            f"|{self.max_channels}|{self.encoder_depth}"
        )
        return hashlib.sha256(key.encode()).hexdigest()[:16]

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, values: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        coerced = {k: _coerce_field(cls, k, v) for k, v in values.items()}
        return cls(**coerced)

    @classmethod
    def from_file(cls, path) -> "PipelineConfig":
        """Read key = value pairs from a sectioned text file; sections are flattened."""
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise ConfigError(f"config file not found or unreadable: {path}")
        values = {}
        for section in parser.sections():
            for key, raw in parser.items(section):
                if key in values:
                    raise ConfigError(f"duplicate config key {key!r}")
                values[key] = raw
        return cls.from_dict(values)

    def with_overrides(self, overrides: dict) -> "PipelineConfig":
        known = {f.name for f in fields(self)}
        unknown = set(overrides) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        coerced = {k: _coerce_field(type(self), k, v) for k, v in overrides.items()}
        merged = self.to_dict()
        merged.update(coerced)
        if "frame_resolution" in coerced and "reconstruction_scales" not in coerced:
            merged["reconstruction_scales"] = ()  # re-derive from the new resolution
        return type(self)(**merged)

    def write_file(self, path) -> None:
        lines = ["[pipeline]"]
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ", ".join(str(e) for e in v)
            lines.append(f"{f.name} = {v}")
        Path(path).write_text("\n".join(lines) + "\n")


def _coerce_field(cls, name: str, raw):
    """Coerce a raw (possibly string) value to the declared field's type."""
    default = next(f for f in fields(cls) if f.name == name).default
    if not isinstance(raw, str):
        if isinstance(raw, (list, tuple)):
            return tuple(raw)
        return raw
    text = raw.strip()
    if isinstance(default, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"cannot parse boolean for {name!r}: {raw!r}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        if not text:
            return ()
        parts = [p for p in text.replace(",", " ").split() if p]
        out = []
        for p in parts:
            out.append(float(p) if ("." in p or "e" in p.lower()) else int(p))
        return tuple(out)
    return text


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


@dataclass
class CheckpointState:
    """Serialized weights of the four networks plus optimizer state."""

    model_state: dict
    optimizer_state: dict
    epoch: int
    global_step: int
    config_fingerprint: str
    config: dict

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(
            {
                "version": CHECKPOINT_VERSION,
                "model_state": self.model_state,
                "optimizer_state": self.optimizer_state,
                "epoch": self.epoch,
                "global_step": self.global_step,
                "config_fingerprint": self.config_fingerprint,
                "config": self.config,
            },
            path,
        )

    @classmethod
    def load(cls, path) -> "CheckpointState":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"checkpoint not found: {path}")
        payload = torch.load(path, map_location="cpu", weights_only=False)
        if payload.get("version") != CHECKPOINT_VERSION:
            raise ConfigError(f"unsupported checkpoint version in {path}: {payload.get('version')}")
        return cls(
            model_state=payload["model_state"],
            optimizer_state=payload["optimizer_state"],
            epoch=payload["epoch"],
            global_step=payload["global_step"],
            config_fingerprint=payload["config_fingerprint"],
            config=payload["config"],
        )

    def check_compatible(self, config: PipelineConfig) -> None:
        if self.config_fingerprint != config.structural_fingerprint():
            raise ConfigError(
                "checkpoint was trained with a structurally different config "
                f"(fingerprint {self.config_fingerprint} != {config.structural_fingerprint()})"
            )


# ---------------------------------------------------------------------------
# Seed derivation and PNG I/O
# ---------------------------------------------------------------------------


def derive_seed(base_seed: int, role: str, index: int = 0) -> int:
    """Stable sub-seed for an rng role; never share streams across roles."""
    digest = hashlib.sha256(f"{base_seed}:{role}:{index}".encode()).digest()
    return int.from_bytes(digest[:8], "big") & 0x7FFF_FFFF_FFFF_FFFF


def load_frame_png(path) -> Frame:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    return Frame(torch.from_numpy(arr.transpose(2, 0, 1)).contiguous())


def save_frame_png(frame: Frame, path) -> None:
    arr = (frame.data.clamp(0, 1).numpy() * 255.0).round().astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(path)


def load_mask_png(path) -> Mask:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("L"), dtype=np.float32) / 255.0
    return Mask(torch.from_numpy(arr[None, :, :]).contiguous())


def save_mask_png(mask: Mask, path) -> None:
    arr = (mask.data[0].clamp(0, 1).numpy() * 255.0).round().astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="L").save(path)

"""The four networks: mask generator, mask refinement, low-res and high-res
frame generators, plus their forward contracts.

M, R and H share one encoder-decoder architecture (H adds U-Net skips); L is
a residual generator with two 2x decode stages, so it maps mask-resolution
inputs to full-resolution frames. All forwards end in a 7x7 conv + sigmoid,
so outputs are strictly inside (0, 1). The mask generator runs at full frame
resolution and its output is reduced to frame/4 with the shared downscale
operator before use.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from maskanim.core import ConfigError, PipelineConfig, downscale


@dataclass(frozen=True)
class NetworkSpec:
    in_channels: int
    out_channels: int
    base_channels: int
    max_channels: int
    depth: int
    skip_connections: bool = False

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        for name in ("in_channels", "out_channels", "base_channels", "max_channels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.max_channels < self.base_channels:
            raise ConfigError("max_channels must be >= base_channels")


class EncodeBlock(nn.Module):
    # conv3x3 - relu - batch_norm - avg_pool2x2
    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.norm = nn.BatchNorm2d(out_ch)

    def forward(self, x):
        return F.avg_pool2d(self.norm(F.relu(self.conv(x))), 2)


class DecodeBlock(nn.Module):
    # up_sample2x2 - conv3x3 - batch_norm - relu; skip is concatenated
    # after the upsample, so in_ch includes the skip channels.
    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.norm = nn.BatchNorm2d(out_ch)

    def forward(self, x, skip=None):
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        if skip is not None:
            x = torch.cat([x, skip], dim=1)
        return F.relu(self.norm(self.conv(x)))


class ResidualBlock(nn.Module):
    # batch_norm - relu - conv3x3 - batch_norm - relu - conv3x3, additive skip
    def __init__(self, channels):
        super().__init__()
        self.norm1 = nn.BatchNorm2d(channels)
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm2 = nn.BatchNorm2d(channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        h = self.conv1(F.relu(self.norm1(x)))
        h = self.conv2(F.relu(self.norm2(h)))
        return x + h


class EncoderDecoder(nn.Module):
    """Symmetric encoder-decoder ending in conv7x7 + sigmoid.

    With skip_connections, each encode stage feeds its mirror decode stage
    (the top decode stage receives the raw input), forming a U-Net.
    """

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.spec = spec
        d = spec.depth
        widths = [min(spec.max_channels, spec.base_channels * 2 ** i) for i in range(d)]

        enc = []
        for i in range(d):
            in_ch = spec.in_channels if i == 0 else widths[i - 1]
            enc.append(EncodeBlock(in_ch, widths[i]))
        self.encoders = nn.ModuleList(enc)

        dec = []
        prev = widths[d - 1]
        for j in range(d):
            out_ch = widths[d - 2 - j] if j <= d - 2 else spec.base_channels
            skip_ch = 0
            if spec.skip_connections:
                skip_ch = widths[d - 2 - j] if j <= d - 2 else spec.in_channels
            dec.append(DecodeBlock(prev + skip_ch, out_ch))
            prev = out_ch
        self.decoders = nn.ModuleList(dec)
        self.final = nn.Conv2d(prev, spec.out_channels, 7, padding=3)

    def forward(self, x):
        skips = [x]  # inputs to each encode stage, shallowest first
        h = x
        for enc in self.encoders[:-1]:
            h = enc(h)
            skips.append(h)
        h = self.encoders[-1](h)
        for j, dec in enumerate(self.decoders):
            skip = skips[len(skips) - 1 - j] if self.spec.skip_connections else None
            h = dec(h, skip)
        return torch.sigmoid(self.final(h))


class ResidualGenerator(nn.Module):
    """Low-res generator: conv7x7 front end, six residual blocks, two 2x
    decode stages, conv7x7 + sigmoid. Output is 4x the input resolution."""

    def __init__(self, in_channels, out_channels, base_channels, num_blocks=6, decode_stages=2):
        super().__init__()
        self.first = nn.Conv2d(in_channels, base_channels, 7, padding=3)
        self.first_norm = nn.BatchNorm2d(base_channels)
        self.blocks = nn.ModuleList(ResidualBlock(base_channels) for _ in range(num_blocks))
        self.decoders = nn.ModuleList(
            DecodeBlock(base_channels, base_channels) for _ in range(decode_stages)
        )
        self.final = nn.Conv2d(base_channels, out_channels, 7, padding=3)

    def forward(self, x):
        h = F.relu(self.first_norm(self.first(x)))
        for block in self.blocks:
            h = block(h)
        for dec in self.decoders:
            h = dec(h)
        return torch.sigmoid(self.final(h))


@dataclass
class ModelBundle:
    """The four networks plus the config they were built for."""

    mask_generator: EncoderDecoder
    refinement: EncoderDecoder
    lowres_generator: ResidualGenerator
    highres_generator: EncoderDecoder
    config: PipelineConfig

    def named_models(self) -> dict:
        return {
            "mask_generator": self.mask_generator,
            "refinement": self.refinement,
            "lowres_generator": self.lowres_generator,
            "highres_generator": self.highres_generator,
        }

    def train_mode(self) -> None:
        for m in self.named_models().values():
            m.train()

    def eval_mode(self) -> None:
        for m in self.named_models().values():
            m.eval()

    def parameters(self):
        for m in self.named_models().values():
            yield from m.parameters()

    def state_dicts(self) -> dict:
        return {name: m.state_dict() for name, m in self.named_models().items()}

    def load_state_dicts(self, state: dict) -> None:
        for name, m in self.named_models().items():
            m.load_state_dict(state[name])


# Channel contracts: R and L consume (frame, source mask, driver mask),
# H consumes (frame, two upscaled masks, coarse frame).
REFINE_IN_CHANNELS = 3 + 1 + 1
LOWRES_IN_CHANNELS = 3 + 1 + 1
HIGHRES_IN_CHANNELS = 3 + 1 + 1 + 3


def build_models(config: PipelineConfig) -> ModelBundle:
    """Construct M, R, L, H for `config`; parameter init is seeded by config.seed."""
    config.validate()
    torch.manual_seed(config.seed ^ 0x6D6F6465)  # model-init stream, separate from data/perturbation
    common = dict(
        base_channels=config.base_channels,
        max_channels=config.max_channels,
        depth=config.encoder_depth,
    )
    mask_gen = EncoderDecoder(NetworkSpec(in_channels=3, out_channels=1, **common))
    refine = EncoderDecoder(NetworkSpec(in_channels=REFINE_IN_CHANNELS, out_channels=1, **common))
    lowres = ResidualGenerator(LOWRES_IN_CHANNELS, 3, config.base_channels)
    highres = EncoderDecoder(
        NetworkSpec(in_channels=HIGHRES_IN_CHANNELS, out_channels=3, skip_connections=True, **common)
    )
    return ModelBundle(mask_gen, refine, lowres, highres, config)


def _batched(x: torch.Tensor):
    if x.ndim == 3:
        return x.unsqueeze(0), True
    if x.ndim == 4:
        return x, False
    raise ValueError(f"expected 3D or 4D tensor, got shape {tuple(x.shape)}")


def _check_res(t: torch.Tensor, res: int, what: str) -> None:
    if t.shape[-2] != res or t.shape[-1] != res:
        raise ValueError(f"{what} must be {res}x{res}, got {t.shape[-2]}x{t.shape[-1]}")


def mask_forward(mask_net: EncoderDecoder, frames: torch.Tensor) -> torch.Tensor:
    """m = D(M(x)): run the mask generator and reduce to frame/4 resolution."""
    x, squeeze = _batched(frames)
    if x.shape[-2] != x.shape[-1]:
        raise ValueError(f"frames must be square, got {tuple(x.shape)}")
    out = downscale(mask_net(x), x.shape[-1] // 4)
    return out.squeeze(0) if squeeze else out


def refine_forward(
    refine_net: EncoderDecoder,
    source_small: torch.Tensor,
    source_mask: torch.Tensor,
    perturbed: torch.Tensor,
) -> torch.Tensor:
    """m_d = R(D(s), m_s, p); channel order (source, source mask, perturbed)."""
    s, squeeze = _batched(source_small)
    ms = _batched(source_mask)[0]
    p = _batched(perturbed)[0]
    res = s.shape[-1]
    _check_res(ms, res, "source mask")
    _check_res(p, res, "perturbed mask")
    out = refine_net(torch.cat([s, ms, p], dim=1))
    return out.squeeze(0) if squeeze else out


def lowres_forward(
    lowres_net: ResidualGenerator,
    source_small: torch.Tensor,
    source_mask: torch.Tensor,
    pose_mask: torch.Tensor,
) -> torch.Tensor:
    """c = L(D(s), m_s, pose); output at 4x the input resolution."""
    s, squeeze = _batched(source_small)
    ms = _batched(source_mask)[0]
    pose = _batched(pose_mask)[0]
    res = s.shape[-1]
    _check_res(ms, res, "source mask")
    _check_res(pose, res, "pose mask")
    out = lowres_net(torch.cat([s, ms, pose], dim=1))
    return out.squeeze(0) if squeeze else out


def highres_forward(
    highres_net: EncoderDecoder,
    source: torch.Tensor,
    source_mask_up: torch.Tensor,
    pose_mask_up: torch.Tensor,
    coarse: torch.Tensor,
) -> torch.Tensor:
    """f = H(s, U(m_s), U(pose), c); all inputs at full frame resolution."""
    s, squeeze = _batched(source)
    ms = _batched(source_mask_up)[0]
    pose = _batched(pose_mask_up)[0]
    c = _batched(coarse)[0]
    res = s.shape[-1]
    _check_res(ms, res, "upscaled source mask")
    _check_res(pose, res, "upscaled pose mask")
    _check_res(c, res, "coarse frame")
    out = highres_net(torch.cat([s, ms, pose, c], dim=1))
    return out.squeeze(0) if squeeze else out

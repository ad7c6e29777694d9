"""Mask loss, multi-scale perceptual reconstruction loss, combined objective.

The perceptual loss compares feature maps from a pluggable extractor. With an
external VGG-19 weights file (config key `vgg_weights` or the
MASKANIM_VGG_WEIGHTS environment variable) the standard pretrained taps are
used; without one, a deterministic stub extractor (identity plus average-pool
pyramid) keeps everything runnable offline.

Gradient routing (which loss term may update which network) is enforced where
the graphs are built, in the training module: the mask loss reaches only the
refinement network, the fine-branch reconstruction term only the high-res
generator, and the coarse branch the mask generator and low-res generator.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from maskanim.core import ConfigError, Frame, Mask, PipelineConfig, downscale

VGG_WEIGHTS_ENV = "MASKANIM_VGG_WEIGHTS"

_IMAGENET_MEAN = (0.485, 0.456, 0.406)
_IMAGENET_STD = (0.229, 0.224, 0.225)

# VGG-19 convolutional stem: channel width per conv, "P" marks a 2x2 max pool.
_VGG19_PLAN = (
    64, 64, "P",
    128, 128, "P",
    256, 256, 256, 256, "P",
    512, 512, 512, 512, "P",
    512, 512, 512, 512, "P",
)


class StubFeatureExtractor:
    """Deterministic offline extractor: one layer per pool factor.

    Factor 1 is the identity map; factor k is a k x k average pool, giving a
    fixed multi-resolution pyramid with no learned weights.
    """

    def __init__(self, pool_factors=(1, 2, 4)):
        if not pool_factors:
            raise ConfigError("stub extractor needs at least one pool factor")
        self.pool_factors = tuple(int(f) for f in pool_factors)

    @property
    def num_layers(self) -> int:
        return len(self.pool_factors)

    def feature_maps(self, images: torch.Tensor) -> list:
        out = []
        for f in self.pool_factors:
            out.append(images if f == 1 else F.avg_pool2d(images, f))
        return out


class VggFeatureExtractor:
    """Feature maps from selected layers of a pretrained VGG-19 stem.

    `weights_path` must hold a state dict in the common layout (keys like
    `features.0.weight`); only the layers up to the deepest tap are built.
    Inputs in [0, 1] are normalized with the ImageNet statistics.
    """

    def __init__(self, weights_path, layer_indices=(1, 11, 29)):
        if not layer_indices:
            raise ConfigError("vgg extractor needs at least one tap layer")
        self.layer_indices = tuple(sorted(int(i) for i in layer_indices))
        modules = []
        in_ch = 3
        for entry in _VGG19_PLAN:
            if entry == "P":
                modules.append(nn.MaxPool2d(2))
            else:
                modules.append(nn.Conv2d(in_ch, entry, 3, padding=1))
                modules.append(nn.ReLU(inplace=False))
                in_ch = entry
        if self.layer_indices[-1] >= len(modules):
            raise ConfigError(
                f"tap index {self.layer_indices[-1]} beyond VGG-19 stem ({len(modules)} layers)"
            )
        self.features = nn.Sequential(*modules[: self.layer_indices[-1] + 1])
        state = torch.load(weights_path, map_location="cpu", weights_only=True)
        state = {k.removeprefix("features."): v for k, v in state.items() if not k.startswith("classifier")}
        missing, _unexpected = self.features.load_state_dict(state, strict=False)
        if missing:
            raise ConfigError(f"VGG weights at {weights_path} missing keys: {missing[:4]}...")
        self.features.eval()
        for p in self.features.parameters():
            p.requires_grad_(False)
        self._mean = torch.tensor(_IMAGENET_MEAN).view(1, 3, 1, 1)
        self._std = torch.tensor(_IMAGENET_STD).view(1, 3, 1, 1)

    @property
    def num_layers(self) -> int:
        return len(self.layer_indices)

    def feature_maps(self, images: torch.Tensor) -> list:
        x = (images - self._mean) / self._std
        out = []
        for idx, module in enumerate(self.features):
            x = module(x)
            if idx in self.layer_indices:
                out.append(x)
        return out


def make_feature_extractor(config: PipelineConfig):
    """VGG extractor when weights are configured (or in the environment), else the stub."""
    path = config.vgg_weights or os.environ.get(VGG_WEIGHTS_ENV, "")
    if path:
        return VggFeatureExtractor(path, config.vgg_layers)
    return StubFeatureExtractor(config.stub_pool_factors)


# ---------------------------------------------------------------------------
# Loss terms
# ---------------------------------------------------------------------------


def _as_tensor(x) -> torch.Tensor:
    return x.data if isinstance(x, (Frame, Mask)) else x


def mask_loss(predicted, target) -> torch.Tensor:
    """L1 mask refinement loss: mean absolute difference over all pixels."""
    a, b = _as_tensor(predicted), _as_tensor(target)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).abs().mean()


def _ensure_batched(t: torch.Tensor) -> torch.Tensor:
    return t.unsqueeze(0) if t.ndim == 3 else t


def perceptual_layer_loss(extractor, a, b, layer: int) -> torch.Tensor:
    """Mean absolute difference of the layer-th feature maps of a and b."""
    ta, tb = _ensure_batched(_as_tensor(a)), _ensure_batched(_as_tensor(b))
    if ta.shape != tb.shape:
        raise ValueError(f"frame shapes differ: {tuple(ta.shape)} vs {tuple(tb.shape)}")
    if not 0 <= layer < extractor.num_layers:
        raise ValueError(f"layer {layer} out of range [0, {extractor.num_layers})")
    fa = extractor.feature_maps(ta)[layer]
    fb = extractor.feature_maps(tb)[layer]
    return (fa - fb).abs().mean()


def perceptual_pyramid_loss(extractor, predicted, target, scales) -> tuple:
    """One reconstruction branch: sum of every (scale, layer) perceptual term.

    Returns (total, {(scale, layer): value}).
    """
    pred = _ensure_batched(_as_tensor(predicted))
    tgt = _ensure_batched(_as_tensor(target))
    if pred.shape != tgt.shape:
        raise ValueError(f"frame shapes differ: {tuple(pred.shape)} vs {tuple(tgt.shape)}")
    total = pred.new_zeros(())
    breakdown = {}
    for scale in scales:
        ps = downscale(pred, scale)
        ts = downscale(tgt, scale)
        feats_p = extractor.feature_maps(ps)
        feats_t = extractor.feature_maps(ts)
        for j, (fp, ft) in enumerate(zip(feats_p, feats_t)):
            term = (fp - ft).abs().mean()
            breakdown[(scale, j)] = term
            total = total + term
    return total, breakdown


def reconstruction_loss(extractor, coarse, fine, target, scales) -> tuple:
    """Multi-scale perceptual loss over both generator branches.

    Returns (total, breakdown) with breakdown keyed by (scale, layer, branch)
    for branch in {"c", "f"}.
    """
    c_total, c_parts = perceptual_pyramid_loss(extractor, coarse, target, scales)
    f_total, f_parts = perceptual_pyramid_loss(extractor, fine, target, scales)
    breakdown = {(s, j, "c"): v for (s, j), v in c_parts.items()}
    breakdown.update({(s, j, "f"): v for (s, j), v in f_parts.items()})
    return c_total + f_total, breakdown


def combined_loss(mask_value, reconstruct_value, lambda_mask, lambda_reconstruct):
    """Exact weighted sum lambda_mask * mask + lambda_reconstruct * reconstruct."""
    if lambda_mask < 0 or lambda_reconstruct < 0:
        raise ValueError("loss weights must be non-negative")
    return lambda_mask * mask_value + lambda_reconstruct * reconstruct_value


@dataclass
class LossReport:
    """Scalar loss summary for one step; total == λ1*mask + λ2*reconstruct exactly."""

    mask_loss: float
    reconstruct_loss: float
    total: float
    breakdown: dict = field(default_factory=dict)

    @classmethod
    def build(cls, mask_value: float, reconstruct_value: float,
              lambda_mask: float, lambda_reconstruct: float, breakdown=None) -> "LossReport":
        return cls(
            mask_loss=mask_value,
            reconstruct_loss=reconstruct_value,
            total=combined_loss(mask_value, reconstruct_value, lambda_mask, lambda_reconstruct),
            breakdown=dict(breakdown or {}),
        )

    def to_flat(self) -> dict:
        flat = {
            "loss_mask": self.mask_loss,
            "loss_reconstruct": self.reconstruct_loss,
            "loss_total": self.total,
        }
        for (scale, layer, branch), value in sorted(self.breakdown.items()):
            flat[f"vgg_s{scale}_l{layer}_{branch}"] = value
        return flat

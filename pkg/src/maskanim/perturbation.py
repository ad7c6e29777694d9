"""Color augmentation and the identity-perturbation operators for masks.

The test-time perturbation thresholds a mask at its median and shrinks the
content to 75% linear size about the image center on a fixed canvas. The
training-time perturbation warps six strips with random scales, applies the
same median threshold, and adds Poisson noise. Geometric warps use the same
half-pixel-center bilinear convention as the core resamplers; out-of-region
samples read as zero, so shrinking vacates a zero border and magnifying crops.

All randomness flows through an explicit torch.Generator argument; equal
seeds give bit-identical outputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from maskanim.core import Frame, Mask

VERTICAL = "vertical"
HORIZONTAL = "horizontal"

# ITU-R 601 luminance weights, shared with the metrics module.
LUMA_WEIGHTS = (0.299, 0.587, 0.114)


@dataclass(frozen=True)
class JitterParams:
    """Color-jitter factors; scales in [0.9, 1.1], hue shift in [-0.1, 0.1] turns."""

    brightness_scale: float
    contrast_scale: float
    saturation_scale: float
    hue_shift: float

    def __post_init__(self):
        for name in ("brightness_scale", "contrast_scale", "saturation_scale"):
            v = getattr(self, name)
            if not 0.9 <= v <= 1.1:
                raise ValueError(f"{name} must be in [0.9, 1.1], got {v}")
        if not -0.1 <= self.hue_shift <= 0.1:
            raise ValueError(f"hue_shift must be in [-0.1, 0.1], got {self.hue_shift}")


@dataclass(frozen=True)
class StripWarpParams:
    """Per-strip and global scales for the training-time geometric warp."""

    orientation: str
    strip_scales: tuple
    global_scale: float
    strip_scale_range: tuple = (0.75, 1.25)
    global_scale_range: tuple = (0.75, 1.25)

    def __post_init__(self):
        if self.orientation not in (VERTICAL, HORIZONTAL):
            raise ValueError(f"orientation must be vertical or horizontal, got {self.orientation!r}")
        lo, hi = self.strip_scale_range
        for s in self.strip_scales:
            if not lo <= s <= hi:
                raise ValueError(f"strip scale {s} outside [{lo}, {hi}]")
        lo, hi = self.global_scale_range
        if not lo <= self.global_scale <= hi:
            raise ValueError(f"global scale {self.global_scale} outside [{lo}, {hi}]")


def _uniform(rng: torch.Generator, lo: float, hi: float) -> float:
    return lo + (hi - lo) * torch.rand((), generator=rng, dtype=torch.float64).item()


def draw_jitter_params(rng: torch.Generator, scale_range=(0.9, 1.1), hue_range=(-0.1, 0.1)) -> JitterParams:
    return JitterParams(
        brightness_scale=_uniform(rng, *scale_range),
        contrast_scale=_uniform(rng, *scale_range),
        saturation_scale=_uniform(rng, *scale_range),
        hue_shift=_uniform(rng, *hue_range),
    )


def draw_strip_params(
    rng: torch.Generator,
    strip_count: int = 6,
    strip_scale_range=(0.75, 1.25),
    global_scale_range=(0.75, 1.25),
) -> StripWarpParams:
    orientation = VERTICAL if torch.rand((), generator=rng).item() < 0.5 else HORIZONTAL
    scales = tuple(_uniform(rng, *strip_scale_range) for _ in range(strip_count))
    return StripWarpParams(
        orientation=orientation,
        strip_scales=scales,
        global_scale=_uniform(rng, *global_scale_range),
        strip_scale_range=tuple(strip_scale_range),
        global_scale_range=tuple(global_scale_range),
    )


# ---------------------------------------------------------------------------
# Color jitter (augmentation A)
# ---------------------------------------------------------------------------


def _luminance(rgb: torch.Tensor) -> torch.Tensor:
    w = torch.tensor(LUMA_WEIGHTS, dtype=rgb.dtype).view(3, 1, 1)
    return (rgb * w).sum(dim=0, keepdim=True)


def _rgb_to_hsv(rgb: torch.Tensor) -> torch.Tensor:
    r, g, b = rgb[0], rgb[1], rgb[2]
    maxc = rgb.max(dim=0).values
    minc = rgb.min(dim=0).values
    delta = maxc - minc
    safe_delta = torch.where(delta > 0, delta, torch.ones_like(delta))
    rc = (maxc - r) / safe_delta
    gc = (maxc - g) / safe_delta
    bc = (maxc - b) / safe_delta
    h = torch.where(
        maxc == r, bc - gc, torch.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc)
    )
    h = torch.where(delta > 0, (h / 6.0) % 1.0, torch.zeros_like(h))
    safe_max = torch.where(maxc > 0, maxc, torch.ones_like(maxc))
    s = torch.where(maxc > 0, delta / safe_max, torch.zeros_like(maxc))
    return torch.stack([h, s, maxc])


def _hsv_to_rgb(hsv: torch.Tensor) -> torch.Tensor:
    h, s, v = hsv[0], hsv[1], hsv[2]
    h6 = (h % 1.0) * 6.0
    i = torch.floor(h6)
    f = h6 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.long() % 6
    r = torch.stack([v, q, p, p, t, v])
    g = torch.stack([t, v, v, q, p, p])
    b = torch.stack([p, p, t, v, v, q])
    sel = i.unsqueeze(0)
    return torch.cat(
        [r.gather(0, sel), g.gather(0, sel), b.gather(0, sel)], dim=0
    )


def color_jitter(frame: Frame, params: JitterParams) -> Frame:
    """Augmentation A: scale brightness, contrast, saturation; rotate hue.

    Brightness multiplies all channels; contrast blends toward the image's
    mean luminance; saturation blends toward the per-pixel luminance; hue
    rotates the HSV hue by hue_shift of a full turn. With unit scales and
    zero shift the frame passes through bit-exact.
    """
    x = frame.data
    x = x * params.brightness_scale
    mean_luma = _luminance(x).mean()
    x = params.contrast_scale * x + (1.0 - params.contrast_scale) * mean_luma
    x = params.saturation_scale * x + (1.0 - params.saturation_scale) * _luminance(x)
    if params.hue_shift != 0.0:
        hsv = _rgb_to_hsv(x.clamp(0.0, 1.0))
        hsv[0] = (hsv[0] + params.hue_shift) % 1.0
        x = _hsv_to_rgb(hsv)
    return Frame(x.clamp(0.0, 1.0))


# ---------------------------------------------------------------------------
# Mask perturbations
# ---------------------------------------------------------------------------


def median_threshold(mask: Mask) -> Mask:
    """Zero out pixels below the mask's median; ties at the median are kept.

    The median of an even pixel count is the midpoint of the two middle
    order statistics.
    """
    data = mask.data
    flat = data.flatten().sort().values
    n = flat.numel()
    rho = (flat[(n - 1) // 2] + flat[n // 2]) / 2.0
    return Mask(torch.where(data < rho, torch.zeros_like(data), data))


def _scale_axis(data: torch.Tensor, scale: float, axis: int) -> torch.Tensor:
    """Rescale content along one axis about its center on a fixed canvas.

    Output pixel centers map back to source coordinate mid + (c - mid)/scale;
    bilinear taps outside the canvas read zero. scale == 1 is the exact
    identity; scale < 1 shrinks (zero border), scale > 1 magnifies (crops).
    """
    n = data.shape[axis]
    centers = torch.arange(n, dtype=torch.float64) + 0.5
    mid = n / 2.0
    src = mid + (centers - mid) / scale
    pos = src - 0.5
    i0 = torch.floor(pos)
    frac = (pos - i0).to(data.dtype)
    i0 = i0.long()
    i1 = i0 + 1

    moved = torch.movedim(data, axis, -1)
    padded = torch.cat([moved, torch.zeros_like(moved[..., :1])], dim=-1)
    pad_idx = padded.shape[-1] - 1
    idx0 = torch.where((i0 >= 0) & (i0 < n), i0, torch.full_like(i0, pad_idx))
    idx1 = torch.where((i1 >= 0) & (i1 < n), i1, torch.full_like(i1, pad_idx))
    shape = [1] * (moved.ndim - 1) + [n]
    g0 = padded.gather(-1, idx0.view(shape).expand_as(moved))
    g1 = padded.gather(-1, idx1.view(shape).expand_as(moved))
    out = (1.0 - frac) * g0 + frac * g1
    return torch.movedim(out, -1, axis)


def _strip_bounds(length: int, count: int) -> list:
    return [round(k * length / count) for k in range(count + 1)]


def strip_warp(mask: Mask, params: StripWarpParams) -> Mask:
    """Warp six strips with per-strip scales, then rescale globally.

    Vertical orientation cuts the canvas into column strips, scales each
    along x about its own center, then scales the whole canvas along y;
    horizontal orientation is the transpose. Unit scales are bit-exact
    identity.
    """
    data = mask.data
    h, w = data.shape[-2], data.shape[-1]
    strip_axis = -1 if params.orientation == VERTICAL else -2
    global_axis = -2 if params.orientation == VERTICAL else -1
    length = w if params.orientation == VERTICAL else h

    bounds = _strip_bounds(length, len(params.strip_scales))
    out = torch.zeros_like(data)
    for k, scale in enumerate(params.strip_scales):
        lo, hi = bounds[k], bounds[k + 1]
        if hi <= lo:
            continue
        region = data.narrow(strip_axis, lo, hi - lo)
        warped = _scale_axis(region, scale, strip_axis)
        out.narrow(strip_axis, lo, hi - lo).copy_(warped)
    out = _scale_axis(out, params.global_scale, global_axis)
    return Mask(out.clamp(0.0, 1.0))


def shrink_about_center(mask: Mask, factor: float) -> Mask:
    """Scale mask content by `factor` about the image center; canvas fixed."""
    if factor <= 0:
        raise ValueError(f"shrink factor must be positive, got {factor}")
    out = _scale_axis(mask.data, factor, -1)
    out = _scale_axis(out, factor, -2)
    return Mask(out.clamp(0.0, 1.0))


def perturb_test(mask: Mask, shrink_factor: float = 0.75) -> Mask:
    """Test-time identity perturbation: median threshold, then 25% shrink."""
    return shrink_about_center(median_threshold(mask), shrink_factor)


def perturb_train(
    mask: Mask,
    rng: torch.Generator,
    strip_count: int = 6,
    strip_scale_range=(0.75, 1.25),
    global_scale_range=(0.75, 1.25),
    poisson_lambda: float = 20.0,
) -> Mask:
    """Training-time identity perturbation.

    Sequentially: (i) random strip warp, (ii) median threshold, (iii) additive
    Poisson(lambda)/255 noise, clamped to [0, 1]. poisson_lambda == 0 disables
    the noise step exactly.
    """
    params = draw_strip_params(rng, strip_count, strip_scale_range, global_scale_range)
    out = median_threshold(strip_warp(mask, params))
    if poisson_lambda > 0:
        rate = torch.full_like(out.data, float(poisson_lambda))
        noise = torch.poisson(rate, generator=rng) / 255.0
        out = Mask((out.data + noise).clamp(0.0, 1.0))
    return out

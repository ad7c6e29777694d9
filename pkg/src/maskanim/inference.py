"""Test-time pipelines: single-frame animation, video animation, the video
reconstruction protocol, and the ablation variants.

Every driving frame is processed independently (no reference frame, no
temporal state): masks for source and driver come from the shared mask
generator, the driver's mask is perturbed and refined, and the two generators
render the coarse and final frames. The perturbation threshold is the median
of each driver's own mask, so it is recomputed per driving frame.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import torch

from maskanim.core import (
    CheckpointState,
    Frame,
    Mask,
    PipelineConfig,
    VideoClip,
    downscale,
    save_frame_png,
    save_mask_png,
    upscale,
)
from maskanim.networks import ModelBundle, build_models, highres_forward, lowres_forward, mask_forward, refine_forward
from maskanim.perturbation import perturb_test

MODES = ("full", "no_pert", "no_ref", "no_id")

# Panels written by dump_intermediates, in display order.
PANEL_ORDER = ("s", "m_s", "d", "Md", "p", "m_d", "c", "f")


@dataclass(frozen=True)
class AnimationMode:
    variant: str = "full"

    def __post_init__(self):
        if self.variant not in MODES:
            raise ValueError(f"variant must be one of {MODES}, got {self.variant!r}")

    @property
    def use_perturbation(self) -> bool:
        return self.variant in ("full", "no_ref")

    @property
    def use_refinement(self) -> bool:
        return self.variant in ("full", "no_pert")


def _as_mode(mode) -> AnimationMode:
    return mode if isinstance(mode, AnimationMode) else AnimationMode(mode)


def load_checkpoint(path) -> tuple:
    """Rebuild a ModelBundle from a checkpoint; returns (bundle, config)."""
    ck = CheckpointState.load(path)
    config = PipelineConfig.from_dict(ck.config)
    ck.check_compatible(config)
    bundle = build_models(config)
    bundle.load_state_dicts(ck.model_state)
    bundle.eval_mode()
    return bundle, config


def animate_frame(bundle: ModelBundle, source: Frame, driving: Frame, mode="full") -> tuple:
    """Animate one source frame by one driving frame.

    Returns (generated Frame, intermediates dict). Intermediates: the working
    source mask `m_s`, the full-resolution mask-generator output `m_s_full`,
    the working driver mask `Md`, the perturbed mask `p`, the refined mask
    `m_d`, and the coarse frame `c`.
    """
    mode = _as_mode(mode)
    cfg = bundle.config
    for name, frame in (("source", source), ("driving", driving)):
        if frame.resolution != cfg.frame_resolution:
            raise ValueError(
                f"{name} frame is {frame.resolution}px, model expects {cfg.frame_resolution}px"
            )
    bundle.eval_mode()
    with torch.no_grad():
        s = source.data
        m_s_full = bundle.mask_generator(s.unsqueeze(0)).squeeze(0)
        m_s = downscale(m_s_full, cfg.mask_resolution)
        md_raw = mask_forward(bundle.mask_generator, driving.data)

        s_small = downscale(s, cfg.mask_resolution)
        p = perturb_test(Mask(md_raw), cfg.shrink_factor).data if mode.use_perturbation else md_raw
        if mode.use_refinement:
            m_d = refine_forward(bundle.refinement, s_small, m_s, p)
        else:
            m_d = p

        c = lowres_forward(bundle.lowres_generator, s_small, m_s, m_d)
        f = highres_forward(
            bundle.highres_generator,
            s,
            upscale(m_s, cfg.frame_resolution),
            upscale(m_d, cfg.frame_resolution),
            c,
        )
    intermediates = {
        "m_s": Mask(m_s),
        "m_s_full": Mask(m_s_full),
        "Md": Mask(md_raw),
        "p": Mask(p),
        "m_d": Mask(m_d),
        "c": Frame(c),
    }
    return Frame(f), intermediates


def animate_video(bundle: ModelBundle, source: Frame, driving: VideoClip, mode="full") -> VideoClip:
    """One generated frame per driving frame, each computed independently."""
    mode = _as_mode(mode)
    frames = tuple(animate_frame(bundle, source, d, mode)[0] for d in driving.frames)
    return VideoClip(id=f"{driving.id}_animated", frames=frames)


def reconstruct_video(bundle: ModelBundle, clip: VideoClip) -> VideoClip:
    """Reconstruction protocol: first frame is the source, the rest drive.

    The output has len(clip) - 1 frames and equals animating frames[1:] from
    frames[0] in full mode.
    """
    if len(clip) < 2:
        raise ValueError(f"clip {clip.id!r} has {len(clip)} frame(s); need at least 2")
    driving = VideoClip(id=clip.id, frames=clip.frames[1:])
    generated = animate_video(bundle, clip.frames[0], driving, "full")
    return VideoClip(id=clip.id, frames=generated.frames)


def dump_intermediates(out_dir, index: int, source: Frame, driving: Frame,
                       generated: Frame, intermediates: dict) -> None:
    """Write the per-frame panels as PNGs named <index>_<panel>.png."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    panels = {
        "s": source,
        "d": driving,
        "f": generated,
        "m_s": intermediates["m_s"],
        "Md": intermediates["Md"],
        "p": intermediates["p"],
        "m_d": intermediates["m_d"],
        "c": intermediates["c"],
    }
    for name in PANEL_ORDER:
        panel = panels[name]
        path = out_dir / f"{index:05d}_{name}.png"
        if isinstance(panel, Mask):
            save_mask_png(panel, path)
        else:
            save_frame_png(panel, path)

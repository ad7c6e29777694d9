"""Mask-based image animation: extraction, perturbation, refinement, generation."""

from maskanim.core import Frame, Mask, PipelineConfig, VideoClip, downscale, upscale

__version__ = "0.1.0"

__all__ = ["Frame", "Mask", "PipelineConfig", "VideoClip", "downscale", "upscale", "__version__"]

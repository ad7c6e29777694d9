"""Dataset ingestion, training-pair sampling, and the synthetic toy dataset.

Directory layout: `<root>/<split>/<video_id>/frame_%05d.png`, frames ordered
by index. Toy videos additionally carry exact binary ground-truth masks
(`mask_%05d.png`) and a `keypoints.json` with per-frame (x, y, detected)
entries for the object centroid and the four object-bbox corners, so the
keypoint metrics have an exact oracle without any pretrained backend.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from maskanim.core import Frame, Mask, VideoClip, derive_seed, load_frame_png, resample_tensor, save_frame_png, save_mask_png

logger = logging.getLogger(__name__)

OBJECT_KINDS = ("square", "disc", "figure")
BACKGROUND_KINDS = ("solid", "gradient", "textured")
MOTION_KINDS = ("drift", "swing", "pulse")

KEYPOINTS_PER_FRAME = 5  # centroid + 4 bbox corners
KEYPOINTS_FILENAME = "keypoints.json"


@dataclass(frozen=True)
class ClipHandle:
    """Lazy handle to one on-disk video: frames decode on demand."""

    id: str
    frame_paths: tuple
    resolution: int
    directory: Path

    def __len__(self) -> int:
        return len(self.frame_paths)

    def frame(self, index: int) -> Frame:
        f = load_frame_png(self.frame_paths[index])
        if f.resolution != self.resolution:
            f = Frame(resample_tensor(f.data, self.resolution))
        return f

    def load(self) -> VideoClip:
        return VideoClip(self.id, tuple(self.frame(i) for i in range(len(self))))


@dataclass
class VideoDataset:
    split: str
    resolution: int
    clips: list

    def __len__(self) -> int:
        return len(self.clips)


def _frame_files(video_dir: Path) -> list:
    return sorted(p for p in video_dir.glob("*.png") if not p.name.startswith("mask"))


def load_video_dataset(root, split: str, resolution: int) -> VideoDataset:
    """Enumerate clips under <root>/<split>/ in lexicographic id order.

    Clips with fewer than 2 frames are skipped with a warning; frames are
    resized to `resolution` on decode if needed.
    """
    split_dir = Path(root) / split
    if not split_dir.is_dir():
        raise FileNotFoundError(f"split directory not found: {split_dir}")
    clips = []
    for video_dir in sorted(p for p in split_dir.iterdir() if p.is_dir()):
        frames = _frame_files(video_dir)
        if len(frames) < 2:
            logger.warning("skipping clip %s: fewer than 2 frames", video_dir)
            continue
        clips.append(ClipHandle(video_dir.name, tuple(frames), resolution, video_dir))
    return VideoDataset(split=split, resolution=resolution, clips=clips)


def sample_pair(dataset: VideoDataset, rng: torch.Generator):
    """Uniform clip, then two distinct uniform frame indices from it.

    Returns (source Frame, driving Frame, clip id).
    """
    if not dataset.clips:
        raise ValueError("dataset is empty")
    clip = dataset.clips[int(torch.randint(len(dataset.clips), (), generator=rng))]
    n = len(clip)
    i = int(torch.randint(n, (), generator=rng))
    j = int(torch.randint(n - 1, (), generator=rng))
    if j >= i:
        j += 1
    return clip.frame(i), clip.frame(j), clip.id


# ---------------------------------------------------------------------------
# Synthetic toy dataset
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ToySpec:
    num_videos: int
    frames_per_video: int
    resolution: int
    object_kind: str = "square"
    background_kind: str = "solid"
    motion_kind: str = "drift"
    seed: int = 0

    def __post_init__(self):
        if self.num_videos < 1 or self.frames_per_video < 2:
            raise ValueError("need at least 1 video of at least 2 frames")
        if self.resolution < 8:
            raise ValueError(f"resolution too small: {self.resolution}")
        if self.object_kind not in OBJECT_KINDS:
            raise ValueError(f"object_kind must be one of {OBJECT_KINDS}")
        if self.background_kind not in BACKGROUND_KINDS:
            raise ValueError(f"background_kind must be one of {BACKGROUND_KINDS}")
        if self.motion_kind not in MOTION_KINDS:
            raise ValueError(f"motion_kind must be one of {MOTION_KINDS}")


def _render_background(kind: str, res: int, rng: np.random.Generator) -> np.ndarray:
    if kind == "solid":
        color = rng.uniform(0.15, 0.6, size=3)
        return np.broadcast_to(color[:, None, None], (3, res, res)).copy()
    yy, xx = np.mgrid[0:res, 0:res].astype(np.float64) / max(res - 1, 1)
    if kind == "gradient":
        c0 = rng.uniform(0.1, 0.5, size=3)
        c1 = rng.uniform(0.3, 0.7, size=3)
        t = (xx + yy) / 2.0
        return c0[:, None, None] * (1 - t) + c1[:, None, None] * t
    # textured: a deterministic plaid of two random spatial frequencies
    base = rng.uniform(0.2, 0.5, size=3)
    fx, fy = rng.uniform(1.0, 3.0, size=2)
    px, py = rng.uniform(0, 2 * math.pi, size=2)
    tex = 0.08 * (np.sin(2 * math.pi * fx * xx + px) + np.sin(2 * math.pi * fy * yy + py))
    return np.clip(base[:, None, None] + tex[None], 0.0, 1.0)


def _object_geometry(kind: str, center, half: float):
    """Membership test over pixel centers and the analytic bbox corners."""
    cx, cy = center
    if kind == "square":
        def inside(x, y):
            return (np.abs(x - cx) <= half) & (np.abs(y - cy) <= half)
        bbox = (cx - half, cy - half, cx + half, cy + half)
    elif kind == "disc":
        def inside(x, y):
            return (x - cx) ** 2 + (y - cy) ** 2 <= half ** 2
        bbox = (cx - half, cy - half, cx + half, cy + half)
    else:  # figure: square body with a disc head above it
        head_r = half * 0.5
        head_cy = cy - half - head_r * 0.6
        def inside(x, y):
            body = (np.abs(x - cx) <= half) & (np.abs(y - cy) <= half)
            head = (x - cx) ** 2 + (y - head_cy) ** 2 <= head_r ** 2
            return body | head
        bbox = (cx - half, head_cy - head_r, cx + half, cy + half)
    return inside, bbox


def _motion_center(kind: str, t: float, rng_draws: dict):
    if kind == "drift":
        sx, sy = rng_draws["start"]
        ex, ey = rng_draws["end"]
        return sx + (ex - sx) * t, sy + (ey - sy) * t
    if kind == "swing":
        px, py = rng_draws["pivot"]
        length = rng_draws["length"]
        a = rng_draws["amplitude"] * math.sin(2 * math.pi * t)
        return px + length * math.sin(a), py + length * math.cos(a)
    # pulse: fixed center (size varies instead)
    return rng_draws["start"]


def _render_video(spec: ToySpec, rng: np.random.Generator):
    """Returns (frames, masks, keypoints) as numpy arrays / lists."""
    res = spec.resolution
    bg = _render_background(spec.background_kind, res, rng)
    obj_color = np.clip(1.0 - bg.mean(axis=(1, 2)) + rng.uniform(-0.1, 0.1, 3), 0.0, 1.0)

    half0 = rng.uniform(0.11, 0.16) * res
    margin = half0 * 2.2 + 2
    draws = {
        "margin": margin,
        "start": tuple(rng.uniform(margin, res - margin, size=2)),
        "end": tuple(rng.uniform(margin, res - margin, size=2)),
        "pivot": (rng.uniform(margin, res - margin), margin),
        "length": rng.uniform(0.15, 0.25) * res,
        "amplitude": rng.uniform(0.4, 0.9),
    }

    ys, xs = np.mgrid[0:res, 0:res]
    px = xs + 0.5  # pixel-center coordinates
    py = ys + 0.5

    frames, masks, keypoints = [], [], []
    for k in range(spec.frames_per_video):
        t = k / max(spec.frames_per_video - 1, 1)
        center = _motion_center(spec.motion_kind, t, draws)
        half = half0 * (1.0 + 0.3 * math.sin(2 * math.pi * t)) if spec.motion_kind == "pulse" else half0
        # keep the whole object (incl. the figure's head) inside the frame
        pad = half * 1.1 + 1.5
        top_pad = half * 1.9 + 1.5 if spec.object_kind == "figure" else pad
        center = (
            min(max(center[0], pad), res - pad),
            min(max(center[1], top_pad), res - pad),
        )
        inside, bbox = _object_geometry(spec.object_kind, center, half)
        mask = inside(px, py).astype(np.float64)
        frame = bg * (1.0 - mask[None]) + obj_color[:, None, None] * mask[None]

        total = mask.sum()
        if total > 0:
            com_x = float((mask * px).sum() / total)
            com_y = float((mask * py).sum() / total)
        else:
            com_x, com_y = center
        x0, y0, x1, y1 = bbox
        kp = [
            (com_x, com_y, True),
            (x0, y0, True),
            (x1, y0, True),
            (x0, y1, True),
            (x1, y1, True),
        ]
        frames.append(np.clip(frame, 0.0, 1.0))
        masks.append(mask)
        keypoints.append(kp)
    return frames, masks, keypoints


def generate_toy_dataset(spec: ToySpec, out_root, split: str = "train") -> VideoDataset:
    """Render the toy dataset to disk and return the loaded dataset."""
    out_root = Path(out_root)
    split_dir = out_root / split
    split_dir.mkdir(parents=True, exist_ok=True)
    for v in range(spec.num_videos):
        rng = np.random.default_rng(derive_seed(spec.seed, f"toy-{split}", v))
        frames, masks, keypoints = _render_video(spec, rng)
        video_dir = split_dir / f"vid_{v:03d}"
        video_dir.mkdir(parents=True, exist_ok=True)
        for k, (frame, mask) in enumerate(zip(frames, masks)):
            save_frame_png(Frame(torch.from_numpy(frame.astype(np.float32))), video_dir / f"frame_{k:05d}.png")
            save_mask_png(Mask(torch.from_numpy(mask.astype(np.float32)[None])), video_dir / f"mask_{k:05d}.png")
        payload = [[[x, y, bool(flag)] for x, y, flag in frame_kps] for frame_kps in keypoints]
        (video_dir / KEYPOINTS_FILENAME).write_text(json.dumps(payload, indent=1))
    return load_video_dataset(out_root, split, spec.resolution)


def load_keypoints(video_dir) -> list:
    """Read keypoints.json: per-frame list of (x, y, detected)."""
    path = Path(video_dir) / KEYPOINTS_FILENAME
    payload = json.loads(path.read_text())
    return [[(float(x), float(y), bool(flag)) for x, y, flag in frame_kps] for frame_kps in payload]

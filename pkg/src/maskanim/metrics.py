"""Evaluation metrics (L1, AKD, MKR, AED, SSIM, CSIM) with pluggable keypoint
and embedding backends, plus report aggregation.

Keypoint and embedding backends are injected. The toy detector locates the
foreground object directly from pixels (against a border-estimated
background); the ground-truth detector replays `keypoints.json` written by
the toy data generator, which makes AKD/MKR exact on synthetic data. External
pretrained backends load from TorchScript files; their absence disables only
the metrics that need them.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from maskanim.core import ConfigError, Frame, VideoClip, resample_tensor
from maskanim.data import KEYPOINTS_FILENAME, load_keypoints, load_video_dataset
from maskanim.perturbation import LUMA_WEIGHTS


class UndefinedMetricError(Exception):
    """A metric's denominator is empty (e.g. no detected keypoints)."""


def _gray(frame: Frame) -> torch.Tensor:
    w = torch.tensor(LUMA_WEIGHTS, dtype=frame.data.dtype).view(3, 1, 1)
    return (frame.data * w).sum(dim=0)


# ---------------------------------------------------------------------------
# Keypoint detectors
# ---------------------------------------------------------------------------


class KeypointDetector:
    """Deterministic detector with a fixed keypoint count per frame."""

    num_keypoints: int = 0

    def detect(self, frame: Frame) -> list:
        raise NotImplementedError

    def detect_clip(self, clip: VideoClip) -> list:
        return [self.detect(f) for f in clip.frames]


class ToyKeypointDetector(KeypointDetector):
    """Finds the toy foreground object from pixels alone.

    The background color is estimated per channel from a 2px border ring;
    pixels whose largest per-channel distance from it exceeds `threshold` are
    foreground (channel-wise, so objects of equal luminance still register).
    Emits the centroid and the four bounding-box corners, flagged undetected
    when the foreground is (nearly) empty.
    """

    num_keypoints = 5

    def __init__(self, threshold: float = 0.12, min_area: int = 4):
        self.threshold = threshold
        self.min_area = min_area

    def detect(self, frame: Frame) -> list:
        rgb = frame.data
        ring = torch.cat(
            [
                rgb[:, :2].reshape(3, -1),
                rgb[:, -2:].reshape(3, -1),
                rgb[:, :, :2].reshape(3, -1),
                rgb[:, :, -2:].reshape(3, -1),
            ],
            dim=1,
        )
        background = ring.median(dim=1).values.view(3, 1, 1)
        fg = (rgb - background).abs().amax(dim=0) > self.threshold
        if int(fg.sum()) < self.min_area:
            return [(0.0, 0.0, False)] * self.num_keypoints
        ys, xs = torch.nonzero(fg, as_tuple=True)
        xs = xs.double() + 0.5
        ys = ys.double() + 0.5
        cx, cy = float(xs.mean()), float(ys.mean())
        x0, x1 = float(xs.min()) - 0.5, float(xs.max()) + 0.5
        y0, y1 = float(ys.min()) - 0.5, float(ys.max()) + 0.5
        return [
            (cx, cy, True),
            (x0, y0, True),
            (x1, y0, True),
            (x0, y1, True),
            (x1, y1, True),
        ]


class GroundTruthKeypointDetector(KeypointDetector):
    """Replays keypoints.json from a dataset root, looked up by clip id.

    When the clip is one frame shorter than the stored list (the
    reconstruction protocol drops the first frame), the first entry is
    skipped to keep alignment.
    """

    num_keypoints = 5

    def __init__(self, root):
        self.root = Path(root)

    def detect(self, frame: Frame) -> list:
        raise UndefinedMetricError("ground-truth detector works on clips, not single frames")

    def detect_clip(self, clip: VideoClip) -> list:
        path = self.root / clip.id / KEYPOINTS_FILENAME
        if not path.exists():
            raise FileNotFoundError(f"no {KEYPOINTS_FILENAME} for clip {clip.id!r} under {self.root}")
        kps = load_keypoints(path.parent)
        if len(kps) == len(clip) + 1:
            kps = kps[1:]
        if len(kps) != len(clip):
            raise ValueError(
                f"keypoints for {clip.id!r} cover {len(kps)} frames, clip has {len(clip)}"
            )
        return kps


class ExternalKeypointDetector(KeypointDetector):
    """TorchScript adapter: module maps (1,3,H,W) to (K,3) rows (x, y, score)."""

    def __init__(self, path, score_threshold: float = 0.5):
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"external detector weights not found: {path}")
        self.module = torch.jit.load(str(path), map_location="cpu").eval()
        self.score_threshold = score_threshold
        self.num_keypoints = -1  # fixed by the loaded module, discovered on first call

    def detect(self, frame: Frame) -> list:
        with torch.no_grad():
            out = self.module(frame.data.unsqueeze(0))
        rows = out.reshape(-1, 3)
        if self.num_keypoints < 0:
            self.num_keypoints = rows.shape[0]
        return [(float(x), float(y), float(sc) > self.score_threshold) for x, y, sc in rows]


# ---------------------------------------------------------------------------
# Embedding backends
# ---------------------------------------------------------------------------


class EmbeddingBackend:
    dimension: int = 0

    def embed(self, frame: Frame) -> torch.Tensor:
        raise NotImplementedError


class ToyEmbedder(EmbeddingBackend):
    """Deterministic embedding: the 8x8 area-averaged luminance, flattened."""

    def __init__(self, grid: int = 8):
        self.grid = grid
        self.dimension = grid * grid

    def embed(self, frame: Frame) -> torch.Tensor:
        luma = _gray(frame).unsqueeze(0)
        return resample_tensor(luma.double(), self.grid).flatten()


class ExternalEmbedder(EmbeddingBackend):
    """TorchScript adapter: module maps (1,3,H,W) to a fixed-size vector."""

    def __init__(self, path):
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"external embedder weights not found: {path}")
        self.module = torch.jit.load(str(path), map_location="cpu").eval()
        self.dimension = -1

    def embed(self, frame: Frame) -> torch.Tensor:
        with torch.no_grad():
            vec = self.module(frame.data.unsqueeze(0)).flatten()
        if self.dimension < 0:
            self.dimension = vec.numel()
        return vec


def make_detector(spec: str, gt_root=None) -> KeypointDetector:
    """Parse a backend spec: 'toy', 'gt', or 'external:<path>'."""
    if spec == "toy":
        return ToyKeypointDetector()
    if spec == "gt":
        if gt_root is None:
            raise ConfigError("ground-truth detector needs a dataset root")
        return GroundTruthKeypointDetector(gt_root)
    if spec.startswith("external:"):
        return ExternalKeypointDetector(spec.split(":", 1)[1])
    raise ConfigError(f"unknown detector spec {spec!r}")


def make_embedder(spec: str) -> EmbeddingBackend:
    if spec == "toy":
        return ToyEmbedder()
    if spec.startswith("external:"):
        return ExternalEmbedder(spec.split(":", 1)[1])
    raise ConfigError(f"unknown embedder spec {spec!r}")


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def _check_lengths(generated: VideoClip, truth: VideoClip) -> None:
    if len(generated) != len(truth):
        raise ValueError(f"clip lengths differ: {len(generated)} vs {len(truth)}")


def l1_metric(generated: VideoClip, truth: VideoClip) -> float:
    """Mean absolute pixel difference over all frames and channels."""
    _check_lengths(generated, truth)
    total = 0.0
    for g, t in zip(generated.frames, truth.frames):
        if g.resolution != t.resolution:
            raise ValueError(f"resolutions differ: {g.resolution} vs {t.resolution}")
        total += float((g.data.double() - t.data.double()).abs().mean())
    return total / len(generated)


def akd(generated: VideoClip, truth: VideoClip, detector: KeypointDetector,
        truth_detector: KeypointDetector = None) -> float:
    """Average distance between keypoints detected in both videos.

    Per frame, keypoints detected in the truth and present in the generated
    frame contribute their Euclidean distance; frames average over their own
    keypoints, the clip over its frames. Keypoints missing from the generated
    video are counted by MKR instead.
    """
    _check_lengths(generated, truth)
    gen_kps = detector.detect_clip(generated)
    truth_kps = (truth_detector or detector).detect_clip(truth)
    frame_means = []
    for gk, tk in zip(gen_kps, truth_kps):
        if len(gk) != len(tk):
            raise ValueError(f"keypoint counts differ: {len(gk)} vs {len(tk)}")
        dists = [
            math.dist((gx, gy), (tx, ty))
            for (gx, gy, gd), (tx, ty, td) in zip(gk, tk)
            if td and gd
        ]
        if dists:
            frame_means.append(sum(dists) / len(dists))
    if not frame_means:
        raise UndefinedMetricError("no keypoint detected in both videos")
    return sum(frame_means) / len(frame_means)


def mkr(generated: VideoClip, truth: VideoClip, detector: KeypointDetector,
        truth_detector: KeypointDetector = None) -> float:
    """Fraction of truth-detected keypoints missing from the generated video."""
    _check_lengths(generated, truth)
    gen_kps = detector.detect_clip(generated)
    truth_kps = (truth_detector or detector).detect_clip(truth)
    detected = 0
    missing = 0
    for gk, tk in zip(gen_kps, truth_kps):
        for (_, _, gd), (_, _, td) in zip(gk, tk):
            if td:
                detected += 1
                if not gd:
                    missing += 1
    if detected == 0:
        raise UndefinedMetricError("no keypoint detected in the ground-truth video")
    return missing / detected


def aed(generated: VideoClip, truth: VideoClip, embedder: EmbeddingBackend) -> float:
    """Mean Euclidean distance between per-frame embeddings."""
    _check_lengths(generated, truth)
    total = 0.0
    for g, t in zip(generated.frames, truth.frames):
        diff = embedder.embed(g).double() - embedder.embed(t).double()
        total += float(diff.norm())
    return total / len(generated)


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    win = np.outer(g, g)
    return win / win.sum()


def ssim(a: Frame, b: Frame, win_size: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03) -> float:
    """Windowed structural similarity on the luminance channel, data range 1.

    11x11 Gaussian window with sigma 1.5 and the standard stabilizers; the
    map is averaged over all fully valid windows.
    """
    if a.resolution != b.resolution:
        raise ValueError(f"resolutions differ: {a.resolution} vs {b.resolution}")
    if win_size > a.resolution:
        raise ValueError(f"window {win_size} exceeds image size {a.resolution}")
    # luminance in float64 so window statistics keep full precision
    w = torch.tensor(LUMA_WEIGHTS, dtype=torch.float64).view(3, 1, 1)
    x = (a.data.double() * w).sum(dim=0).numpy()
    y = (b.data.double() * w).sum(dim=0).numpy()
    win = _gaussian_window(win_size, sigma)

    kernel = torch.from_numpy(win).view(1, 1, win_size, win_size)

    def filt(img):
        t = torch.from_numpy(img).view(1, 1, *img.shape)
        return torch.nn.functional.conv2d(t, kernel).squeeze().numpy()

    mu_x = filt(x)
    mu_y = filt(y)
    mu_xx = filt(x * x)
    mu_yy = filt(y * y)
    mu_xy = filt(x * y)
    var_x = mu_xx - mu_x ** 2
    var_y = mu_yy - mu_y ** 2
    cov = mu_xy - mu_x * mu_y

    c1 = k1 ** 2
    c2 = k2 ** 2
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2)
    return float((num / den).mean())


def csim(a: Frame, b: Frame, embedder: EmbeddingBackend) -> float:
    """Cosine similarity of the two frames' embeddings."""
    va = embedder.embed(a).double()
    vb = embedder.embed(b).double()
    na, nb = float(va.norm()), float(vb.norm())
    if na == 0.0 or nb == 0.0:
        raise UndefinedMetricError("zero-norm embedding")
    return float((va @ vb) / (na * nb))


def relative_improvement(ours: float, baseline: float) -> float:
    """Percentage improvement of a lower-is-better metric relative to a baseline."""
    if baseline == 0:
        raise ValueError("baseline must be nonzero")
    return (baseline - ours) / baseline * 100.0


# ---------------------------------------------------------------------------
# Report aggregation
# ---------------------------------------------------------------------------

METRIC_COLUMNS = ("l1", "ssim", "akd", "mkr", "aed", "csim")


@dataclass
class MetricReport:
    per_video: dict
    aggregate: dict
    counts: dict = field(default_factory=dict)

    def write(self, out_dir) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        rows = [dict(video_id=vid, **vals) for vid, vals in sorted(self.per_video.items())]
        rows.append(dict(video_id="aggregate", **self.aggregate))
        with (out_dir / "report.csv").open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["video_id", "frames", *METRIC_COLUMNS])
            writer.writeheader()
            for row in rows:
                writer.writerow({k: ("" if v is None else v) for k, v in row.items()})
        (out_dir / "report.json").write_text(
            json.dumps(
                {"per_video": self.per_video, "aggregate": self.aggregate, "counts": self.counts},
                indent=1,
                sort_keys=True,
            )
        )


def _clip_ssim(generated: VideoClip, truth: VideoClip, win_size: int) -> float:
    values = [ssim(g, t, win_size=win_size) for g, t in zip(generated.frames, truth.frames)]
    return sum(values) / len(values)


def _clip_csim(generated: VideoClip, truth: VideoClip, embedder) -> float:
    values = [csim(g, t, embedder) for g, t in zip(generated.frames, truth.frames)]
    return sum(values) / len(values)


def evaluate(generated_root, truth_root, detector: KeypointDetector = None,
             truth_detector: KeypointDetector = None, embedder: EmbeddingBackend = None,
             out_dir=None, ssim_win_size: int = 11) -> MetricReport:
    """Per-video metrics for matching ids under two roots, plus mean aggregates.

    The truth root may be a dataset split directory; when a generated clip is
    exactly one frame shorter than its truth clip, the truth's first frame is
    dropped (reconstruction protocol). Detector/embedder are optional; the
    metrics that need a missing backend are reported as None.
    """
    generated_root, truth_root = Path(generated_root), Path(truth_root)
    resolution = _peek_resolution(generated_root)
    gen_ds = load_video_dataset(generated_root.parent, generated_root.name, resolution)
    truth_ds = load_video_dataset(truth_root.parent, truth_root.name, resolution)
    gen_ids = {c.id for c in gen_ds.clips}
    truth_ids = {c.id for c in truth_ds.clips}
    if gen_ids != truth_ids:
        only_gen = sorted(gen_ids - truth_ids)
        only_truth = sorted(truth_ids - gen_ids)
        raise ValueError(
            f"video id mismatch: only in generated {only_gen}; only in truth {only_truth}"
        )

    per_video = {}
    total_frames = 0
    truth_by_id = {c.id: c for c in truth_ds.clips}
    for handle in gen_ds.clips:
        generated = handle.load()
        truth = truth_by_id[handle.id].load()
        if len(generated) == len(truth) - 1:
            truth = VideoClip(truth.id, truth.frames[1:])
        elif len(generated) != len(truth):
            raise ValueError(
                f"clip {handle.id!r}: generated has {len(generated)} frames, truth {len(truth)}"
            )
        total_frames += len(generated)
        row = {"frames": len(generated)}
        row["l1"] = l1_metric(generated, truth)
        row["ssim"] = _clip_ssim(generated, truth, ssim_win_size)
        if detector is not None:
            # Undefined per-video values (nothing detected) are reported as
            # empty cells rather than silently coerced to 0.
            try:
                row["akd"] = akd(generated, truth, detector, truth_detector)
            except UndefinedMetricError:
                row["akd"] = None
            try:
                row["mkr"] = mkr(generated, truth, detector, truth_detector)
            except UndefinedMetricError:
                row["mkr"] = None
        else:
            row["akd"] = None
            row["mkr"] = None
        if embedder is not None:
            row["aed"] = aed(generated, truth, embedder)
            row["csim"] = _clip_csim(generated, truth, embedder)
        else:
            row["aed"] = None
            row["csim"] = None
        per_video[handle.id] = row

    aggregate = {"frames": total_frames}
    for col in METRIC_COLUMNS:
        values = [row[col] for row in per_video.values() if row[col] is not None]
        aggregate[col] = sum(values) / len(values) if values else None

    report = MetricReport(
        per_video=per_video,
        aggregate=aggregate,
        counts={"videos": len(per_video), "frames": total_frames},
    )
    if out_dir is not None:
        report.write(out_dir)
    return report


def _peek_resolution(video_root: Path) -> int:
    from maskanim.core import load_frame_png

    for video_dir in sorted(p for p in video_root.iterdir() if p.is_dir()):
        frames = sorted(p for p in video_dir.glob("*.png") if not p.name.startswith("mask"))
        if frames:
            return load_frame_png(frames[0]).resolution
    raise ValueError(f"no frames found under {video_root}")

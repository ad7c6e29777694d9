"""Command-line entry point: toy-data generation, training, reconstruction,
animation, evaluation, and perturbation debugging.

Exit codes: 0 success, 2 usage/config errors, 1 runtime failures. Every run
logs its resolved configuration and seeds under the output directory, so a
run is reproducible from its artifacts alone.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import torch

from maskanim import data as data_mod
from maskanim import inference, metrics, training
from maskanim.core import (
    ConfigError,
    Frame,
    PipelineConfig,
    VideoClip,
    load_frame_png,
    load_mask_png,
    resample_tensor,
    save_frame_png,
    save_mask_png,
)
from maskanim.perturbation import perturb_test, perturb_train


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="maskanim", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-toy-data", help="render a synthetic toy dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--videos", type=int, default=8)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--res", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--object", dest="object_kind", choices=data_mod.OBJECT_KINDS, default="square")
    p.add_argument("--background", choices=data_mod.BACKGROUND_KINDS, default="solid")
    p.add_argument("--motion", choices=data_mod.MOTION_KINDS, default="drift")
    p.add_argument("--test-videos", type=int, default=None,
                   help="videos in the test split (default: max(1, videos//4))")

    p = sub.add_parser("train", help="train the four networks")
    p.add_argument("--config", default=None, help="config file; defaults to toy-scale values")
    p.add_argument("--data", required=True, help="dataset root containing a train/ split")
    p.add_argument("--out", required=True)
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--workers", type=int, default=0)

    p = sub.add_parser("reconstruct", help="reconstruct a video from its first frame")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--video", required=True, help="one video directory of frames")
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=0)

    p = sub.add_parser("animate", help="animate a source image by a driving video")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--source", required=True, help="source image (PNG)")
    p.add_argument("--driving", required=True, help="driving video directory of frames")
    p.add_argument("--mode", choices=inference.MODES, default="full")
    p.add_argument("--out", required=True)
    p.add_argument("--dump-intermediates", action="store_true")
    p.add_argument("--workers", type=int, default=0)

    p = sub.add_parser("evaluate", help="compute metrics for generated vs truth videos")
    p.add_argument("--generated", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--detector", default=None, help="toy | external:<path>")
    p.add_argument("--embedder", default=None, help="toy | external:<path>")
    p.add_argument("--out", default=".")
    p.add_argument("--ssim-window", type=int, default=11)

    p = sub.add_parser("perturb", help="apply a mask perturbation to a PNG (debugging)")
    p.add_argument("--op", choices=("test", "train"), required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("input")
    p.add_argument("output")
    return parser


def _parse_overrides(items) -> dict:
    overrides = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"override must be KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    return overrides


def _echo_run_info(out_dir, config: PipelineConfig = None, **extra) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if config is not None:
        config.write_file(out_dir / "resolved_config.ini")
    if extra:
        (out_dir / "run_info.json").write_text(json.dumps(extra, indent=1, sort_keys=True))


def _load_clip_dir(video_dir, resolution) -> VideoClip:
    video_dir = Path(video_dir)
    if not video_dir.is_dir():
        raise FileNotFoundError(f"video directory not found: {video_dir}")
    paths = sorted(p for p in video_dir.glob("*.png") if not p.name.startswith("mask"))
    if not paths:
        raise FileNotFoundError(f"no frames under {video_dir}")
    frames = []
    for path in paths:
        f = load_frame_png(path)
        if f.resolution != resolution:
            f = Frame(resample_tensor(f.data, resolution))
        frames.append(f)
    return VideoClip(video_dir.name, tuple(frames))


def _cmd_make_toy_data(args) -> int:
    test_videos = args.test_videos if args.test_videos is not None else max(1, args.videos // 4)
    common = dict(
        frames_per_video=args.frames,
        resolution=args.res,
        object_kind=args.object_kind,
        background_kind=args.background,
        motion_kind=args.motion,
    )
    train_spec = data_mod.ToySpec(num_videos=args.videos, seed=args.seed, **common)
    test_spec = data_mod.ToySpec(num_videos=test_videos, seed=args.seed + 1, **common)
    data_mod.generate_toy_dataset(train_spec, args.out, split="train")
    data_mod.generate_toy_dataset(test_spec, args.out, split="test")
    _echo_run_info(args.out, train=vars(args) | {"test_videos": test_videos})
    print(f"wrote {args.videos} train and {test_videos} test videos under {args.out}")
    return 0


def _build_config(args) -> PipelineConfig:
    if args.config is not None:
        config = PipelineConfig.from_file(args.config)
    else:
        config = PipelineConfig.toy()
    overrides = _parse_overrides(args.overrides)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.workers:
        overrides["workers"] = args.workers
    if overrides:
        config = config.with_overrides(overrides)
    return config


def _cmd_train(args) -> int:
    config = _build_config(args)
    dataset = data_mod.load_video_dataset(args.data, "train", config.frame_resolution)
    _echo_run_info(args.out, config=config, seed=config.seed, workers=config.workers)
    training.train(config, dataset, args.out, resume=args.resume)
    print(f"training complete; checkpoints and logs under {args.out}")
    return 0


def _cmd_reconstruct(args) -> int:
    bundle, config = inference.load_checkpoint(args.checkpoint)
    if config.num_threads > 0:
        torch.set_num_threads(config.num_threads)
    clip = _load_clip_dir(args.video, config.frame_resolution)
    result = inference.reconstruct_video(bundle, clip)
    out_dir = Path(args.out) / result.id
    for k, frame in enumerate(result.frames):
        save_frame_png(frame, out_dir / f"frame_{k:05d}.png")
    _echo_run_info(args.out, config=config, video=str(args.video), workers=args.workers)
    print(f"wrote {len(result.frames)} frames to {out_dir}")
    return 0


def _cmd_animate(args) -> int:
    bundle, config = inference.load_checkpoint(args.checkpoint)
    if config.num_threads > 0:
        torch.set_num_threads(config.num_threads)
    source = load_frame_png(args.source)
    if source.resolution != config.frame_resolution:
        source = Frame(resample_tensor(source.data, config.frame_resolution))
    driving = _load_clip_dir(args.driving, config.frame_resolution)
    out_dir = Path(args.out)
    for k, d in enumerate(driving.frames):
        generated, intermediates = inference.animate_frame(bundle, source, d, args.mode)
        save_frame_png(generated, out_dir / f"frame_{k:05d}.png")
        if args.dump_intermediates:
            inference.dump_intermediates(out_dir / "intermediates", k, source, d, generated, intermediates)
    _echo_run_info(args.out, config=config, mode=args.mode, source=str(args.source),
                   driving=str(args.driving), workers=args.workers)
    print(f"wrote {len(driving.frames)} frames to {out_dir}")
    return 0


def _cmd_evaluate(args) -> int:
    detector = truth_detector = None
    if args.detector:
        detector = metrics.make_detector(args.detector)
        if args.detector == "toy":
            # Prefer exact ground-truth keypoints wherever a side carries them.
            truth_root, gen_root = Path(args.truth), Path(args.generated)
            if any(truth_root.glob(f"*/{data_mod.KEYPOINTS_FILENAME}")):
                truth_detector = metrics.GroundTruthKeypointDetector(truth_root)
            if any(gen_root.glob(f"*/{data_mod.KEYPOINTS_FILENAME}")):
                detector = metrics.GroundTruthKeypointDetector(gen_root)
    embedder = metrics.make_embedder(args.embedder) if args.embedder else None
    report = metrics.evaluate(
        args.generated,
        args.truth,
        detector=detector,
        truth_detector=truth_detector,
        embedder=embedder,
        out_dir=args.out,
        ssim_win_size=args.ssim_window,
    )
    _echo_run_info(args.out, generated=str(args.generated), truth=str(args.truth),
                   detector=args.detector, embedder=args.embedder, ssim_window=args.ssim_window)
    print(json.dumps(report.aggregate, indent=1, sort_keys=True))
    return 0


def _cmd_perturb(args) -> int:
    mask = load_mask_png(args.input)
    if args.op == "test":
        out = perturb_test(mask)
    else:
        rng = torch.Generator().manual_seed(args.seed)
        out = perturb_train(mask, rng)
    save_mask_png(out, args.output)
    print(f"perturb op={args.op} seed={args.seed}: wrote {args.output}")
    return 0


_HANDLERS = {
    "make-toy-data": _cmd_make_toy_data,
    "train": _cmd_train,
    "reconstruct": _cmd_reconstruct,
    "animate": _cmd_animate,
    "evaluate": _cmd_evaluate,
    "perturb": _cmd_perturb,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exit_err:
        return exit_err.code if exit_err.code is not None else 2
    try:
        return _HANDLERS[args.command](args)
    except (ConfigError, FileNotFoundError) as err:
        print(f"error[usage]: {err}", file=sys.stderr)
        return 2
    except Exception as err:  # noqa: BLE001 - single CLI boundary
        print(f"error[runtime]: {err}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()

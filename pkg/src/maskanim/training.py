"""Training pipeline: pair sampling, augmentation, perturbation, forwards,
selective backprop, optimizer schedule, checkpointing.

Gradient routing is enforced by how each loss term's graph is built: the mask
refinement loss sees only R (its mask inputs are detached), the fine-branch
reconstruction term sees only H (masks and the coarse frame are detached),
and the coarse branch reaches L and, by default, the mask generator M.

Determinism: model init is seeded from config.seed, and the data and
perturbation streams are re-derived per epoch from (seed, role, epoch), so a
resumed run consumes exactly the same randomness as an uninterrupted one.
Persisted log records contain only deterministic fields; wall-clock timing
stays on the in-memory record.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass
from pathlib import Path

import torch

from maskanim.core import CheckpointState, Frame, Mask, PipelineConfig, derive_seed, downscale, upscale
from maskanim.data import VideoDataset
from maskanim.losses import LossReport, make_feature_extractor, mask_loss, perceptual_pyramid_loss
from maskanim.networks import (
    ModelBundle,
    build_models,
    highres_forward,
    lowres_forward,
    mask_forward,
    refine_forward,
)
from maskanim.perturbation import color_jitter, draw_jitter_params, perturb_train

ALL_TERMS = ("mask", "coarse", "fine")


class NanLossError(RuntimeError):
    """Raised when a step produces a non-finite loss; carries the batch."""

    def __init__(self, message: str, dump: dict):
        super().__init__(message)
        self.dump = dump


@dataclass
class TrainState:
    bundle: ModelBundle
    optimizer: torch.optim.Optimizer
    extractor: object
    epoch: int = 0
    global_step: int = 0
    data_rng: torch.Generator = None
    perturb_rng: torch.Generator = None

    @property
    def config(self) -> PipelineConfig:
        return self.bundle.config


@dataclass
class TrainBatchRecord:
    report: LossReport
    learning_rate: float
    epoch: int
    step: int
    duration_s: float = 0.0

    def to_log_dict(self) -> dict:
        # duration is deliberately excluded: log files must be reproducible
        # bit-for-bit across runs with equal seeds.
        out = {"step": self.step, "epoch": self.epoch, "lr": self.learning_rate}
        out.update(self.report.to_flat())
        return out


def lr_schedule(epoch: int, config: PipelineConfig) -> float:
    """Base learning rate decayed once per passed milestone epoch."""
    if not 0 <= epoch < config.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.epochs})")
    passed = sum(1 for m in config.lr_decay_epochs if epoch >= m)
    return config.learning_rate * config.lr_decay_factor ** passed


def _seed_streams(state: TrainState, epoch: int) -> None:
    seed = state.config.seed
    state.data_rng = torch.Generator().manual_seed(derive_seed(seed, "data", epoch))
    state.perturb_rng = torch.Generator().manual_seed(derive_seed(seed, "perturbation", epoch))


def init_train_state(config: PipelineConfig) -> TrainState:
    bundle = build_models(config)
    optimizer = torch.optim.Adam(bundle.parameters(), lr=config.learning_rate, betas=tuple(config.betas))
    state = TrainState(bundle=bundle, optimizer=optimizer, extractor=make_feature_extractor(config))
    _seed_streams(state, 0)
    return state


def _stack_pairs(pairs) -> tuple:
    sources = torch.stack([p[0].data for p in pairs])
    drivers = torch.stack([p[1].data for p in pairs])
    return sources, drivers


def train_step(state: TrainState, pairs, terms=ALL_TERMS) -> tuple:
    """One optimization step on a batch of (source, driver) Frame pairs.

    `terms` selects which loss terms drive the step; the default is all of
    them (with the mask term gated on refinement_start_epoch).
    """
    cfg = state.config
    bundle = state.bundle
    bundle.train_mode()
    t0 = time.perf_counter()

    s, d = _stack_pairs(pairs)
    if s.shape[-1] != cfg.frame_resolution:
        raise ValueError(f"pairs are {s.shape[-1]}px, config expects {cfg.frame_resolution}px")

    d_aug = torch.stack(
        [
            color_jitter(
                Frame(d[b]),
                draw_jitter_params(state.perturb_rng, cfg.jitter_scale_range, cfg.jitter_hue_range),
            ).data
            for b in range(d.shape[0])
        ]
    )

    m_s = mask_forward(bundle.mask_generator, s)
    target = mask_forward(bundle.mask_generator, d_aug)
    s_small = downscale(s, cfg.mask_resolution)

    zero = s.new_zeros(())
    l_mask = zero
    refinement_active = "mask" in terms and state.epoch >= cfg.refinement_start_epoch
    if refinement_active:
        target_det = target.detach()
        perturbed = torch.stack(
            [
                perturb_train(
                    Mask(target_det[b]),
                    state.perturb_rng,
                    strip_count=cfg.strip_count,
                    strip_scale_range=cfg.strip_scale_range,
                    global_scale_range=cfg.global_scale_range,
                    poisson_lambda=cfg.poisson_lambda,
                ).data
                for b in range(target_det.shape[0])
            ]
        )
        m_d = refine_forward(bundle.refinement, s_small, m_s.detach(), perturbed)
        l_mask = mask_loss(m_d, target_det)

    breakdown = {}
    rec_c = zero
    if "coarse" in terms:
        m_s_in = m_s.detach() if cfg.freeze_mask_in_coarse else m_s
        target_in = target.detach() if cfg.freeze_mask_in_coarse else target
        c = lowres_forward(bundle.lowres_generator, s_small, m_s_in, target_in)
        rec_c, parts = perceptual_pyramid_loss(state.extractor, c, d, cfg.reconstruction_scales)
        breakdown.update({(sc, j, "c"): float(v.detach()) for (sc, j), v in parts.items()})
    else:
        with torch.no_grad():
            c = lowres_forward(bundle.lowres_generator, s_small, m_s.detach(), target.detach())

    rec_f = zero
    if "fine" in terms:
        f = highres_forward(
            bundle.highres_generator,
            s,
            upscale(m_s.detach(), cfg.frame_resolution),
            upscale(target.detach(), cfg.frame_resolution),
            c.detach(),
        )
        rec_f, parts = perceptual_pyramid_loss(state.extractor, f, d, cfg.reconstruction_scales)
        breakdown.update({(sc, j, "f"): float(v.detach()) for (sc, j), v in parts.items()})

    reconstruct = rec_c + rec_f
    total = cfg.lambda_mask * l_mask + cfg.lambda_reconstruct * reconstruct
    if not torch.isfinite(total):
        raise NanLossError(
            f"non-finite loss at epoch {state.epoch} step {state.global_step}",
            dump={
                "sources": s.detach(),
                "drivers": d.detach(),
                "drivers_augmented": d_aug.detach(),
                "epoch": state.epoch,
                "step": state.global_step,
            },
        )

    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    state.optimizer.step()
    state.global_step += 1

    report = LossReport.build(
        float(l_mask.detach()),
        float(reconstruct.detach()),
        cfg.lambda_mask,
        cfg.lambda_reconstruct,
        breakdown,
    )
    record = TrainBatchRecord(
        report=report,
        learning_rate=state.optimizer.param_groups[0]["lr"],
        epoch=state.epoch,
        step=state.global_step,
        duration_s=time.perf_counter() - t0,
    )
    return state, record


class TrainLogWriter:
    """Appends one record per step to JSON-lines and CSV logs."""

    def __init__(self, out_dir):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        self.jsonl_path = out_dir / "train_log.jsonl"
        self.csv_path = out_dir / "train_log.csv"
        self._csv_fields = None

    def write(self, record: TrainBatchRecord) -> None:
        row = record.to_log_dict()
        with self.jsonl_path.open("a") as fh:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
        new_file = self._csv_fields is None and not self.csv_path.exists()
        if self._csv_fields is None:
            self._csv_fields = sorted(row)
        with self.csv_path.open("a", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=self._csv_fields)
            if new_file:
                writer.writeheader()
            writer.writerow(row)


def _sample_epoch_pairs(dataset: VideoDataset, rng: torch.Generator) -> list:
    """One (source, driver) pair per video, in a fresh shuffled order."""
    order = torch.randperm(len(dataset.clips), generator=rng).tolist()
    pairs = []
    for v in order:
        clip = dataset.clips[v]
        n = len(clip)
        i = int(torch.randint(n, (), generator=rng))
        j = int(torch.randint(n - 1, (), generator=rng))
        if j >= i:
            j += 1
        pairs.append((clip.frame(i), clip.frame(j), clip.id))
    return pairs


def make_checkpoint(state: TrainState, completed_epochs: int) -> CheckpointState:
    cfg = state.config
    return CheckpointState(
        model_state=state.bundle.state_dicts(),
        optimizer_state=state.optimizer.state_dict(),
        epoch=completed_epochs,
        global_step=state.global_step,
        config_fingerprint=cfg.structural_fingerprint(),
        config=cfg.to_dict(),
    )


def restore_train_state(checkpoint: CheckpointState, config: PipelineConfig) -> TrainState:
    checkpoint.check_compatible(config)
    state = init_train_state(config)
    state.bundle.load_state_dicts(checkpoint.model_state)
    state.optimizer.load_state_dict(checkpoint.optimizer_state)
    state.epoch = checkpoint.epoch
    state.global_step = checkpoint.global_step
    return state


def train(config: PipelineConfig, dataset: VideoDataset, out_dir, resume=None) -> CheckpointState:
    """Run config.epochs epochs over the dataset, checkpointing each epoch.

    `resume` may name an epoch checkpoint; training continues from the next
    epoch and, with equal seeds, reproduces an uninterrupted run exactly.
    """
    if not dataset.clips:
        raise ValueError("dataset is empty")
    if config.num_threads > 0:
        torch.set_num_threads(config.num_threads)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    config.write_file(out_dir / "config.ini")

    if resume is not None:
        state = restore_train_state(CheckpointState.load(resume), config)
    else:
        state = init_train_state(config)
    log = TrainLogWriter(out_dir)

    batch = config.batch_size
    for epoch in range(state.epoch, config.epochs):
        state.epoch = epoch
        _seed_streams(state, epoch)
        lr = lr_schedule(epoch, config)
        for group in state.optimizer.param_groups:
            group["lr"] = lr

        samples = _sample_epoch_pairs(dataset, state.data_rng)
        num_batches = math.ceil(len(samples) / batch)
        for b in range(num_batches):
            pairs = [(s, d) for s, d, _cid in samples[b * batch : (b + 1) * batch]]
            try:
                state, record = train_step(state, pairs)
            except NanLossError as err:
                dump_path = out_dir / "nan_dump.pt"
                torch.save(err.dump, dump_path)
                raise NanLossError(f"{err} (batch dumped to {dump_path})", err.dump) from None
            log.write(record)

        completed = epoch + 1
        if completed % max(config.checkpoint_every, 1) == 0 or completed == config.epochs:
            make_checkpoint(state, completed).save(out_dir / f"epoch_{epoch:04d}.ckpt")

    final = make_checkpoint(state, config.epochs)
    final.save(out_dir / "final.ckpt")
    return final

"""Episodic training.

Two regimes. Shared weights: one network applied at every cascade step,
minimizing the mean cross-entropy over all step estimates, with gradients
flowing through the unroll. Sequential: stage t is trained alone on the
frozen outputs of stages 1..t-1, each stage getting an equal share of the
epoch budget. Both use SGD with momentum, weight decay, and polynomial
learning-rate decay, and checkpoint once per epoch.
"""

from __future__ import annotations

import copy
import os
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import evaluation
from .backbone import ToyBackbone, extract_features
from .checkpoints import (
    load_checkpoint,
    load_fusion_checkpoint,
    save_checkpoint,
    save_fusion_checkpoint,
    state_checksum,
)
from .episodes import Episode, SegmentationDataset, SplitPlan, augment, sample_episode
from .fusion import FusionNet, pyramid_scales
from .prior import ProbMap
from .refine import CascadeConfig, run_episode
from .seeding import configure_determinism, rng_for, torch_generator

CE_EPS = 1e-7


def _replace_text(path: Path, text: str) -> None:
    # write-then-rename so a crash mid-write never truncates an existing log
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; weights were restored to the last epoch end."""

    def __init__(self, step: int, log: "TrainLog"):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step
        self.log = log


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 4
    batch_size: int = 4
    base_lr: float = 0.0025
    momentum: float = 0.9
    weight_decay: float = 0.0001
    poly_power: float = 0.9
    seed: int = 0
    cascade: CascadeConfig = field(default_factory=CascadeConfig)
    kshot: int = 1
    fusion_width: int = 32
    fusion_scales: tuple[int, ...] | None = None
    augment: bool = True
    crop_size: int | None = None
    max_rotation_deg: float = 45.0
    val_episodes: int = 0
    detach_between_steps: bool = False
    single_thread: bool = True

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1 or self.kshot < 1:
            raise ValueError("epochs, batch_size, and kshot must be positive")
        # base_lr 0 is legal (degenerate no-update run)
        if self.base_lr < 0 or self.poly_power <= 0:
            raise ValueError("base_lr must be >= 0 and poly_power positive")
        if not (0.0 <= self.momentum < 1.0):
            raise ValueError(f"momentum must lie in [0,1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.fusion_width < 1:
            raise ValueError("fusion_width must be positive")
        if self.max_rotation_deg < 0:
            raise ValueError("max_rotation_deg must be >= 0")
        if self.val_episodes < 0:
            raise ValueError("val_episodes must be >= 0")
        self.cascade.validate()


@dataclass
class StepRecord:
    step: int
    lr: float
    loss: float
    wall_ms: float


@dataclass
class TrainLog:
    """Per-step records plus optional per-epoch validation mIoU."""

    steps: list[StepRecord] = field(default_factory=list)
    val_miou: list[tuple[int, float]] = field(default_factory=list)

    def append(self, step: int, lr: float, loss: float, wall_ms: float) -> None:
        if self.steps and step <= self.steps[-1].step:
            raise ValueError(f"step {step} not after {self.steps[-1].step}")
        if not np.isfinite(loss):
            raise ValueError(f"non-finite loss at step {step}")
        self.steps.append(StepRecord(step, lr, loss, wall_ms))

    def losses(self) -> list[float]:
        return [r.loss for r in self.steps]

    def extend(self, other: "TrainLog") -> None:
        for r in other.steps:
            self.append(r.step, r.lr, r.loss, r.wall_ms)
        self.val_miou.extend(other.val_miou)

    def save(self, path) -> None:
        """One tab-separated record per step: step, lr, loss, wall_ms."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = ["step\tlr\tloss\twall_ms"]
        lines += [
            f"{r.step}\t{r.lr:.10g}\t{r.loss:.10g}\t{r.wall_ms:.3f}" for r in self.steps
        ]
        _replace_text(path, "\n".join(lines) + "\n")
        if self.val_miou:
            vlines = ["epoch\tval_miou"]
            vlines += [f"{e}\t{m:.10g}" for e, m in self.val_miou]
            _replace_text(path.parent / "val_log.tsv", "\n".join(vlines) + "\n")

    @classmethod
    def load(cls, path) -> "TrainLog":
        log = cls()
        rows = Path(path).read_text().splitlines()
        for line in rows[1:]:
            s, lr, loss, ms = line.split("\t")
            log.append(int(s), float(lr), float(loss), float(ms))
        vpath = Path(path).parent / "val_log.tsv"
        if vpath.exists():
            for line in vpath.read_text().splitlines()[1:]:
                e, m = line.split("\t")
                log.val_miou.append((int(e), float(m)))
        return log


def downsample_mask(y: torch.Tensor, grid: tuple[int, int]) -> torch.Tensor:
    """Nearest-neighbor ground-truth downsampling to the estimate grid."""
    if tuple(y.shape) == tuple(grid):
        return y
    return F.interpolate(y[None, None], size=tuple(grid), mode="nearest")[0, 0]


def cross_entropy(p, y_q: torch.Tensor) -> torch.Tensor:
    """Mean over pixels of -[y log p + (1-y) log(1-p)].

    Probabilities are clamped to [1e-7, 1 - 1e-7] before the logs so the loss
    stays finite when float32 rounds an estimate to exactly 0 or 1. Ground
    truth at a finer resolution is downsampled nearest to p's grid.

    Raises:
        ValueError: if the ground truth is smaller than the estimate grid.
    """
    plane = p.plane if isinstance(p, ProbMap) else (p if p.ndim == 2 else p[0])
    grid = tuple(plane.shape)
    if y_q.shape[0] < grid[0] or y_q.shape[1] < grid[1]:
        raise ValueError(
            f"ground truth {tuple(y_q.shape)} smaller than estimate grid {grid}"
        )
    y = downsample_mask(y_q.to(plane.dtype), grid)
    pc = plane.clamp(CE_EPS, 1.0 - CE_EPS)
    return -(y * pc.log() + (1.0 - y) * (1.0 - pc).log()).mean()


def loss_shared(estimates: list, y_q: torch.Tensor) -> torch.Tensor:
    """Unweighted mean of per-step cross-entropies (the shared objective)."""
    if not estimates:
        raise ValueError("loss_shared needs at least one estimate")
    total = estimates[0].plane.new_zeros(())
    for p in estimates:
        total = total + cross_entropy(p, y_q)
    return total / len(estimates)


def poly_lr(step: int, total_steps: int, base_lr: float, power: float) -> float:
    """Polynomial decay base_lr * (1 - step/total_steps)^power."""
    if not (0 <= step <= total_steps):
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return base_lr * (1.0 - step / total_steps) ** power


def steps_per_epoch(dataset: SegmentationDataset, split: SplitPlan, batch_size: int) -> int:
    n = sum(dataset.count(c) for c in split.train_classes)
    return max(1, n // batch_size)


def _draw_episode(dataset, split, cfg: TrainConfig, rng: np.random.Generator) -> Episode:
    classes = sorted(split.train_classes)
    class_id = int(classes[rng.integers(0, len(classes))])
    ep = sample_episode(dataset, class_id, cfg.kshot, rng)
    if not cfg.augment:
        return ep
    support = tuple(
        augment(s, rng, crop_size=cfg.crop_size, max_rotation_deg=cfg.max_rotation_deg)
        for s in ep.support
    )
    query = augment(ep.query, rng, crop_size=cfg.crop_size, max_rotation_deg=cfg.max_rotation_deg)
    return Episode(support=support, query=query, class_id=class_id)


def _episode_loss(backbone, nets, episode, cfg: TrainConfig, step_cfg: CascadeConfig):
    trace = run_episode(
        backbone,
        nets if step_cfg.weight_mode == "different" else nets[0],
        episode,
        step_cfg,
        detach_between_steps=cfg.detach_between_steps,
    )
    if step_cfg.weight_mode == "identical":
        return loss_shared(trace.estimates, episode.query.mask)
    return cross_entropy(trace.estimates[-1], episode.query.mask)


def _probe_scales(dataset, split, cfg: TrainConfig, backbone) -> tuple[int, ...]:
    if cfg.fusion_scales is not None:
        return tuple(cfg.fusion_scales)
    probe = dataset.samples_of(sorted(split.train_classes)[0])[0]
    if cfg.crop_size is not None:
        probe = augment(
            probe, np.random.default_rng(0), crop_size=cfg.crop_size,
            max_rotation_deg=0.0, flip_prob=0.0,
        )
    f_m, _ = extract_features(probe.image, backbone)
    return pyramid_scales(min(f_m.grid))


def _validation_miou(backbone, nets, dataset, split, cfg: TrainConfig, step_cfg) -> float:
    classes = sorted(split.train_classes)

    def predict(episode):
        with torch.no_grad():
            trace = run_episode(
                backbone,
                nets if step_cfg.weight_mode == "different" else nets[0],
                episode,
                step_cfg,
            )
        return trace.final_mask_full

    report = evaluation.evaluate_classes(
        predict, dataset, classes, cfg.val_episodes, cfg.kshot,
        seed=rng_for(cfg.seed, "val").integers(0, 2**31),
    )
    return report.miou


class _EpochRunner:
    """One stage's training loop: schedule, batching, divergence handling,
    per-epoch checkpoints, resume."""

    def __init__(self, backbone, net, prefix, cfg, step_cfg, epochs, dataset, split,
                 out_dir, step_offset, stage):
        self.backbone = backbone
        self.net = net
        self.prefix = prefix
        self.cfg = cfg
        self.step_cfg = step_cfg
        self.epochs = epochs
        self.dataset = dataset
        self.split = split
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.step_offset = step_offset
        self.stage = stage
        self.spe = steps_per_epoch(dataset, split, cfg.batch_size)
        self.total = self.epochs * self.spe

    def _state_dir(self):
        return self.out_dir / "state" / f"stage{self.stage}"

    def _save_epoch(self, opt, epoch):
        if self.out_dir is None:
            return
        save_checkpoint(
            self._state_dir() / f"epoch_{epoch:04d}.pt",
            "train-state",
            {
                "model": self.net.state_dict(),
                "optimizer": opt.state_dict(),
                "epoch": epoch,
                "stage": self.stage,
                "seed": self.cfg.seed,
            },
        )

    def _try_resume(self, opt) -> int:
        if self.out_dir is None or not self._state_dir().is_dir():
            return 0
        snaps = sorted(self._state_dir().glob("epoch_*.pt"))
        if not snaps:
            return 0
        record = load_checkpoint(snaps[-1], expect_kind="train-state")
        self.net.load_state_dict(record["model"])
        opt.load_state_dict(record["optimizer"])
        return record["epoch"] + 1

    def run(self, log: TrainLog, resume: bool) -> None:
        cfg = self.cfg
        opt = torch.optim.SGD(
            self.net.parameters(), lr=cfg.base_lr,
            momentum=cfg.momentum, weight_decay=cfg.weight_decay,
        )
        start_epoch = self._try_resume(opt) if resume else 0
        if start_epoch > 0:
            # keep only records from before the resume point
            cut = self.step_offset + start_epoch * self.spe
            log.steps = [r for r in log.steps if r.step < cut]
        nets = self.prefix + [self.net]
        last_good = copy.deepcopy(self.net.state_dict())
        global_step = start_epoch * self.spe

        for epoch in range(start_epoch, self.epochs):
            rng = rng_for(cfg.seed, "episodes", self.stage, epoch)
            for _ in range(self.spe):
                t0 = time.perf_counter()
                lr = poly_lr(global_step, self.total, cfg.base_lr, cfg.poly_power)
                for group in opt.param_groups:
                    group["lr"] = lr
                opt.zero_grad()
                losses = []
                for _ in range(cfg.batch_size):
                    episode = _draw_episode(self.dataset, self.split, cfg, rng)
                    losses.append(
                        _episode_loss(self.backbone, nets, episode, cfg, self.step_cfg)
                    )
                loss = torch.stack(losses).mean()
                if not torch.isfinite(loss):
                    self.net.load_state_dict(last_good)
                    raise TrainingDiverged(self.step_offset + global_step, log)
                loss.backward()
                opt.step()
                wall_ms = (time.perf_counter() - t0) * 1000.0
                log.append(self.step_offset + global_step, lr, loss.item(), wall_ms)
                global_step += 1
            last_good = copy.deepcopy(self.net.state_dict())
            # log before state: a crash between the two writes retrains the
            # epoch on resume instead of leaving a gap in the log
            if self.out_dir is not None:
                log.save(self.out_dir / "train_log.tsv")
            self._save_epoch(opt, epoch)
            if cfg.val_episodes > 0:
                miou = _validation_miou(
                    self.backbone, nets, self.dataset, self.split, cfg, self.step_cfg
                )
                log.val_miou.append((epoch, miou))


def _final_stage_path(out_dir, stage: int) -> Path:
    return Path(out_dir) / f"cascade_step{stage}.pt"


def _preload_log(out_dir, resume: bool) -> TrainLog:
    if resume and out_dir is not None:
        path = Path(out_dir) / "train_log.tsv"
        if path.exists():
            return TrainLog.load(path)
    return TrainLog()


def cascade_to_dict(cfg: CascadeConfig) -> dict:
    return {
        "T": cfg.T,
        "weight_mode": cfg.weight_mode,
        "prior_mode": cfg.prior_mode,
        "threshold": cfg.threshold,
    }


def train_shared(
    cfg: TrainConfig,
    dataset: SegmentationDataset,
    split: SplitPlan,
    backbone: ToyBackbone,
    *,
    out_dir=None,
    resume: bool = False,
) -> tuple[FusionNet, TrainLog]:
    """Shared-weights regime: one network, mean CE over all T step estimates.

    Raises:
        ValueError: if cfg.cascade.weight_mode is not "identical".
        TrainingDiverged: on non-finite loss (weights restored to last epoch).
    """
    cfg.validate()
    if cfg.cascade.weight_mode != "identical":
        raise ValueError("train_shared requires weight_mode=identical")
    configure_determinism(cfg.single_thread)

    scales = _probe_scales(dataset, split, cfg, backbone)
    net = FusionNet(
        mid_channels=backbone.config.mid_channels,
        scales=scales,
        width=cfg.fusion_width,
        generator=torch_generator(cfg.seed, "fusion", 1),
    )
    log = _preload_log(out_dir, resume)
    runner = _EpochRunner(
        backbone, net, [], cfg, cfg.cascade, cfg.epochs, dataset, split,
        out_dir, step_offset=0, stage=1,
    )
    runner.run(log, resume)
    net.eval()
    if out_dir is not None:
        save_fusion_checkpoint(
            _final_stage_path(out_dir, 1), net,
            stage=1, epoch=cfg.epochs - 1, seed=cfg.seed,
            cascade=cascade_to_dict(cfg.cascade),
            backbone_fingerprint=state_checksum(backbone),
        )
        log.save(Path(out_dir) / "train_log.tsv")
    return net, log


def stage_epochs(total_epochs: int, t: int) -> list[int]:
    """Split the epoch budget evenly across T stages, remainder to the
    earliest stages. Requires at least one epoch per stage."""
    if total_epochs < t:
        raise ValueError(f"{total_epochs} epochs cannot cover {t} stages")
    base, rem = divmod(total_epochs, t)
    return [base + (1 if i < rem else 0) for i in range(t)]


def train_sequential(
    cfg: TrainConfig,
    dataset: SegmentationDataset,
    split: SplitPlan,
    backbone: ToyBackbone,
    *,
    out_dir=None,
    resume: bool = False,
) -> tuple[list[FusionNet], TrainLog]:
    """Sequential regime: train stage 1, freeze it, train stage 2 on its
    frozen outputs, and so on through stage T.

    Raises:
        ValueError: if cfg.cascade.weight_mode is not "different".
    """
    cfg.validate()
    if cfg.cascade.weight_mode != "different":
        raise ValueError("train_sequential requires weight_mode=different")
    configure_determinism(cfg.single_thread)

    scales = _probe_scales(dataset, split, cfg, backbone)
    budgets = stage_epochs(cfg.epochs, cfg.cascade.T)
    nets: list[FusionNet] = []
    log = _preload_log(out_dir, resume)
    step_offset = 0

    for stage in range(1, cfg.cascade.T + 1):
        final_path = _final_stage_path(out_dir, stage) if out_dir is not None else None
        if resume and final_path is not None and final_path.exists():
            net, _ = load_fusion_checkpoint(final_path)
            nets.append(net)
            step_offset += budgets[stage - 1] * steps_per_epoch(dataset, split, cfg.batch_size)
            continue
        net = FusionNet(
            mid_channels=backbone.config.mid_channels,
            scales=scales,
            width=cfg.fusion_width,
            generator=torch_generator(cfg.seed, "fusion", stage),
        )
        for frozen in nets:
            frozen.requires_grad_(False)
            frozen.eval()
        step_cfg = replace(cfg.cascade, T=stage, weight_mode="different")
        runner = _EpochRunner(
            backbone, net, list(nets), cfg, step_cfg, budgets[stage - 1],
            dataset, split, out_dir, step_offset=step_offset, stage=stage,
        )
        runner.run(log, resume)
        net.eval()
        nets.append(net)
        step_offset += budgets[stage - 1] * steps_per_epoch(dataset, split, cfg.batch_size)
        if out_dir is not None:
            save_fusion_checkpoint(
                final_path, net,
                stage=stage, epoch=budgets[stage - 1] - 1, seed=cfg.seed,
                cascade=cascade_to_dict(cfg.cascade),
                backbone_fingerprint=state_checksum(backbone),
            )
            log.save(Path(out_dir) / "train_log.tsv")

    if out_dir is not None:
        log.save(Path(out_dir) / "train_log.tsv")
    return nets, log

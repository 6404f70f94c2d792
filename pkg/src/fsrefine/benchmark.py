"""Cascade-length and prior-augmentation comparison runs.

Trains, per (seed, split) cell, the three standard variants

    T=1  different  plain
    T=2  different  plain
    T=2  different  augmented

and evaluates all of them on the held-out classes with a shared episode
stream. Stage 1 is trained once per cell: a T=2 sequential run draws the same
episode stream and initialises stage 1 from the same generator as a T=1 run,
so the stage-1 checkpoint is copied into the T=2 directories and training
resumes from stage 2 there. The two T=2 variants therefore differ only in the
region estimate fed to the second step, and every variant of a cell is scored
on identical episodes. Checkpoints land in the layout consumed by
run_ablation_table.
"""

from __future__ import annotations

import logging
import shutil
import time
from dataclasses import dataclass, replace
from pathlib import Path

from .backbone import BackboneConfig
from .checkpoints import load_backbone_checkpoint
from .episodes import SegmentationDataset, SplitPlan
from .evaluation import AblationRow, run_ablation_table, variant_slug
from .pretrain import PretrainConfig, pretrain_backbone, save_pretrained
from .refine import CascadeConfig
from .seeding import derive_seed
from .training import TrainConfig, train_sequential

log = logging.getLogger(__name__)

TREND_VARIANTS = (
    CascadeConfig(T=1, weight_mode="different", prior_mode="plain"),
    CascadeConfig(T=2, weight_mode="different", prior_mode="plain"),
    CascadeConfig(T=2, weight_mode="different", prior_mode="augmented"),
)


@dataclass(frozen=True)
class BenchmarkConfig:
    """Sizing knobs for one comparison run; seeds are passed separately."""

    epochs_per_stage: int = 2
    eval_episodes: int = 60
    kshot: int = 1
    pretrain: PretrainConfig = PretrainConfig()
    train: TrainConfig = TrainConfig()
    backbone: BackboneConfig = BackboneConfig()

    def validate(self) -> None:
        if self.epochs_per_stage < 1:
            raise ValueError(f"epochs_per_stage must be >= 1, got {self.epochs_per_stage}")
        if self.eval_episodes < 1:
            raise ValueError(f"eval_episodes must be >= 1, got {self.eval_episodes}")
        if self.kshot < 1:
            raise ValueError(f"kshot must be >= 1, got {self.kshot}")


def _cell_dir(root: Path, seed: int, split_index: int) -> Path:
    return root / f"seed{seed}_split{split_index}"


def _ensure_backbone(base: Path, dataset, split, cfg: BenchmarkConfig, seed: int):
    path = base / "backbone.pt"
    if path.exists():
        backbone, record = load_backbone_checkpoint(path)
        return backbone
    pre = replace(cfg.pretrain, seed=derive_seed(seed, "pretrain", split.split_index))
    backbone, meta = pretrain_backbone(dataset, split, pre, cfg.backbone)
    save_pretrained(path, backbone, meta)
    return backbone


def _train_cell(base: Path, dataset, split, backbone, cfg: BenchmarkConfig, seed: int) -> None:
    train_seed = derive_seed(seed, "train", split.split_index)
    for variant in TREND_VARIANTS:
        out = base / variant_slug(variant)
        out.mkdir(parents=True, exist_ok=True)
        if variant.T > 1:
            # stage 1 is identical across variants; reuse the T=1 checkpoint
            src = base / variant_slug(TREND_VARIANTS[0]) / "cascade_step1.pt"
            dst = out / "cascade_step1.pt"
            if not dst.exists():
                shutil.copy2(src, dst)
        tc = replace(
            cfg.train,
            seed=train_seed,
            epochs=cfg.epochs_per_stage * variant.T,
            cascade=variant,
            kshot=cfg.kshot,
        )
        train_sequential(tc, dataset, split, backbone, out_dir=out, resume=True)


def run_trend_benchmark(
    dataset: SegmentationDataset,
    splits: list[SplitPlan],
    seeds,
    out_root,
    cfg: BenchmarkConfig = BenchmarkConfig(),
) -> tuple[str, list[AblationRow]]:
    """Train and score the three variants over every (seed, split) cell.

    Already-trained cells are detected from their checkpoints and skipped, so
    an interrupted run continues where it stopped. Returns the formatted
    comparison table and its rows (per-seed mIoU percentages, variants with
    missing checkpoints counted absent).
    """
    cfg.validate()
    seeds = list(seeds)
    if not seeds:
        raise ValueError("need at least one seed")
    out_root = Path(out_root)
    for seed in seeds:
        for split in splits:
            started = time.monotonic()
            base = _cell_dir(out_root, seed, split.split_index)
            base.mkdir(parents=True, exist_ok=True)
            backbone = _ensure_backbone(base, dataset, split, cfg, seed)
            _train_cell(base, dataset, split, backbone, cfg, seed)
            log.info(
                "cell seed=%d split=%d done in %.1fs",
                seed, split.split_index, time.monotonic() - started,
            )
    return run_ablation_table(
        dataset, splits, list(TREND_VARIANTS), seeds, out_root,
        n_episodes=cfg.eval_episodes, kshot=cfg.kshot,
    )

"""Backbone pretraining.

The trunk learns plain classification on the train-split classes (a linear
head over global-pooled high-stage features), then the head is discarded and
the trunk frozen. A leakage guard aborts if any held-out class reaches the
pretraining stream, and the seen-class manifest travels with the checkpoint
so evaluation can re-verify the separation.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import torch
import torch.nn.functional as F
from torch import nn

from .backbone import BackboneConfig, ToyBackbone, freeze_backbone
from .checkpoints import save_backbone_checkpoint
from .episodes import SegmentationDataset, SplitPlan, augment
from .evaluation import LeakageError
from .seeding import configure_determinism, rng_for, torch_generator


@dataclass(frozen=True)
class PretrainConfig:
    # Adam: the trunk has no normalization layers, and plain SGD stalls at
    # chance accuracy on the classification task at these sizes
    epochs: int = 30
    batch_size: int = 16
    lr: float = 0.001
    weight_decay: float = 0.0001
    holdout_fraction: float = 0.1
    augment: bool = True
    max_rotation_deg: float = 45.0
    seed: int = 0
    single_thread: bool = True

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.max_rotation_deg < 0:
            raise ValueError("max_rotation_deg must be >= 0")
        if not (0.0 < self.holdout_fraction < 1.0):
            raise ValueError("holdout_fraction must lie in (0,1)")


def pretrain_backbone(
    dataset: SegmentationDataset,
    split: SplitPlan,
    cfg: PretrainConfig,
    bb_config: BackboneConfig | None = None,
    *,
    samples=None,
) -> tuple[ToyBackbone, dict]:
    """Train the trunk as a classifier on train classes, then freeze it.

    Args:
        samples: optional explicit pretraining stream; defaults to every
            sample of split.train_classes. Whatever stream is used passes
            the leakage guard first.

    Returns:
        (frozen backbone, metadata) where metadata records seen_classes,
        holdout accuracy, and the seed.

    Raises:
        LeakageError: if any stream sample belongs to split.test_classes.
    """
    cfg.validate()
    configure_determinism(cfg.single_thread)
    if bb_config is None:
        bb_config = BackboneConfig()

    if samples is not None:
        stream = list(samples)
    else:
        stream = [s for c in sorted(split.train_classes) for s in dataset.samples_of(c)]
    if not stream:
        raise ValueError("pretraining stream is empty")
    leaked = sorted({s.class_id for s in stream} & split.test_classes)
    if leaked:
        raise LeakageError(
            f"pretraining stream contains test classes {leaked} of split "
            f"{split.split_index}"
        )

    classes = sorted({s.class_id for s in stream})
    label_of = {c: i for i, c in enumerate(classes)}
    rng = rng_for(cfg.seed, "pretrain")

    # deterministic per-class holdout: the tail of each class's sample list
    by_class: dict[int, list] = {}
    for s in stream:
        by_class.setdefault(s.class_id, []).append(s)
    train_set, holdout = [], []
    for c in classes:
        pool = by_class[c]
        n_hold = max(1, int(round(cfg.holdout_fraction * len(pool)))) if len(pool) > 1 else 0
        train_set += pool[: len(pool) - n_hold]
        holdout += pool[len(pool) - n_hold :]

    backbone = ToyBackbone(
        replace(bb_config, frozen=False),
        generator=torch_generator(cfg.seed, "backbone"),
    )
    head = nn.Linear(bb_config.high_channels, len(classes))
    gen = torch_generator(cfg.seed, "backbone", "head")
    with torch.no_grad():
        head.weight.copy_(torch.randn(head.weight.shape, generator=gen) * 0.01)
        head.bias.zero_()

    opt = torch.optim.Adam(
        list(backbone.parameters()) + list(head.parameters()),
        lr=cfg.lr, weight_decay=cfg.weight_decay,
    )

    def logits_of(batch):
        x = torch.stack([s.image for s in batch])
        feats = backbone(x)[bb_config.high_stage].mean(dim=(2, 3))
        return head(feats)

    backbone.train()
    for _ in range(cfg.epochs):
        order = rng.permutation(len(train_set))
        for start in range(0, len(order), cfg.batch_size):
            batch = [train_set[i] for i in order[start : start + cfg.batch_size]]
            if cfg.augment:
                batch = [
                    augment(s, rng, max_rotation_deg=cfg.max_rotation_deg) for s in batch
                ]
            y = torch.tensor([label_of[s.class_id] for s in batch])
            loss = F.cross_entropy(logits_of(batch), y)
            opt.zero_grad()
            loss.backward()
            opt.step()

    backbone.eval()
    correct = total = 0
    with torch.no_grad():
        for start in range(0, len(holdout), cfg.batch_size):
            batch = holdout[start : start + cfg.batch_size]
            y = torch.tensor([label_of[s.class_id] for s in batch])
            correct += (logits_of(batch).argmax(dim=1) == y).sum().item()
            total += len(batch)
    accuracy = correct / total if total else float("nan")

    freeze_backbone(backbone)
    backbone.config = replace(bb_config, frozen=True)
    meta = {
        "seen_classes": classes,
        "holdout_accuracy": accuracy,
        "seed": cfg.seed,
        "epochs": cfg.epochs,
    }
    return backbone, meta


def save_pretrained(path, backbone: ToyBackbone, meta: dict) -> None:
    save_backbone_checkpoint(path, backbone, meta)

"""Episodic evaluation.

The metric is mIoU over foreground classes: intersection and union pixel
counts are accumulated per class across all episodes of a run, divided at the
end, and averaged over the classes that appeared. Ablation runners evaluate
trained checkpoints across seeds and splits and format plain-text tables.
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoints import file_sha256, load_backbone_checkpoint, load_fusion_checkpoint
from .episodes import SegmentationDataset, SplitPlan, sample_episode
from .refine import CascadeConfig, run_episode


class LeakageError(RuntimeError):
    """A class meant to be held out reached a stage that must not see it."""


@dataclass
class EvalReport:
    per_class_iou: dict[int, float]
    miou: float
    n_episodes: int
    seed: int
    kshot: int
    cascade: CascadeConfig
    fingerprint: str = ""
    split_index: int = -1
    skipped_classes: list[int] = field(default_factory=list)

    def validate(self) -> None:
        for c, v in self.per_class_iou.items():
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"IoU for class {c} outside [0,1]: {v}")
        if self.per_class_iou:
            mean = sum(self.per_class_iou.values()) / len(self.per_class_iou)
            if abs(mean - self.miou) > 1e-9:
                raise ValueError("mIoU is not the mean of per-class IoUs")

    def save(self, path) -> None:
        """Structured plain text, one key per line; class rows at the end."""
        lines = [
            "# eval report",
            f"split: {self.split_index}",
            f"episodes: {self.n_episodes}",
            f"kshot: {self.kshot}",
            f"seed: {self.seed}",
            (
                f"cascade: T={self.cascade.T} weight_mode={self.cascade.weight_mode} "
                f"prior_mode={self.cascade.prior_mode} threshold={self.cascade.threshold}"
            ),
            f"fingerprint: {self.fingerprint}",
            f"miou: {self.miou:.6f}",
            f"skipped: {' '.join(str(c) for c in self.skipped_classes) or '-'}",
        ]
        lines += [f"class {c}: {v:.6f}" for c, v in sorted(self.per_class_iou.items())]
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(lines) + "\n")


def iou(pred: torch.Tensor, gt: torch.Tensor) -> float:
    """Intersection over union of two binary masks; 1.0 when both are empty.

    Raises:
        ValueError: on resolution mismatch.
    """
    if pred.shape != gt.shape:
        raise ValueError(f"resolution mismatch: pred {tuple(pred.shape)} vs gt {tuple(gt.shape)}")
    p = pred > 0.5
    g = gt > 0.5
    inter = (p & g).sum().item()
    union = (p | g).sum().item()
    if union == 0:
        return 1.0
    return inter / union


def evaluate_classes(
    predict,
    dataset: SegmentationDataset,
    classes,
    n_episodes: int,
    kshot: int,
    seed: int,
    cascade: CascadeConfig | None = None,
) -> EvalReport:
    """Core episodic loop over an explicit class pool.

    predict(episode) -> binary mask at the query's resolution. Episode
    classes are drawn uniformly with a seeded generator, so runs are
    deterministic; classes that happen to draw zero episodes are excluded
    from the mean with a warning.
    """
    classes = sorted(int(c) for c in classes)
    if not classes:
        raise ValueError("no classes to evaluate")
    rng = np.random.default_rng(seed)
    inter = {c: 0 for c in classes}
    union = {c: 0 for c in classes}
    seen = {c: 0 for c in classes}
    for _ in range(n_episodes):
        c = classes[rng.integers(0, len(classes))]
        episode = sample_episode(dataset, c, kshot, rng)
        pred = predict(episode)
        gt = episode.query.mask
        if pred.shape != gt.shape:
            raise ValueError(
                f"prediction {tuple(pred.shape)} does not match ground truth "
                f"{tuple(gt.shape)}"
            )
        p = pred > 0.5
        g = gt > 0.5
        inter[c] += int((p & g).sum().item())
        union[c] += int((p | g).sum().item())
        seen[c] += 1

    skipped = [c for c in classes if seen[c] == 0]
    if skipped:
        warnings.warn(f"classes {skipped} drew no episodes and are excluded")
    per_class = {
        c: (1.0 if union[c] == 0 else inter[c] / union[c])
        for c in classes
        if seen[c] > 0
    }
    miou = sum(per_class.values()) / len(per_class) if per_class else 0.0
    report = EvalReport(
        per_class_iou=per_class,
        miou=miou,
        n_episodes=n_episodes,
        seed=seed,
        kshot=kshot,
        cascade=cascade if cascade is not None else CascadeConfig(),
        skipped_classes=skipped,
    )
    report.validate()
    return report


def report_fingerprint(checkpoint_paths, seed: int, cascade: CascadeConfig) -> str:
    """sha256 over checkpoint file hashes, the seed, and the cascade config:
    changes whenever any of them does."""
    h = hashlib.sha256()
    for p in checkpoint_paths:
        h.update(file_sha256(p).encode())
    h.update(str(seed).encode())
    h.update(
        f"T={cascade.T};{cascade.weight_mode};{cascade.prior_mode};{cascade.threshold}".encode()
    )
    return h.hexdigest()


def evaluate_split(
    networks,
    backbone,
    dataset: SegmentationDataset,
    split: SplitPlan,
    n_episodes: int,
    kshot: int,
    seed: int,
    cascade: CascadeConfig,
    *,
    fingerprint: str = "",
    seen_classes=None,
) -> EvalReport:
    """Benchmark a trained cascade on the split's held-out classes.

    seen_classes, when given (from the backbone checkpoint manifest), is
    re-verified against the test classes before any episode runs.

    Raises:
        LeakageError: if seen_classes intersects split.test_classes.
    """
    if seen_classes is not None:
        bad = sorted(set(int(c) for c in seen_classes) & split.test_classes)
        if bad:
            raise LeakageError(
                f"backbone saw classes {bad} that belong to test split "
                f"{split.split_index}"
            )

    def predict(episode):
        with torch.no_grad():
            trace = run_episode(backbone, networks, episode, cascade)
        return trace.final_mask_full

    report = evaluate_classes(
        predict, dataset, sorted(split.test_classes), n_episodes, kshot, seed,
        cascade=cascade,
    )
    report.split_index = split.split_index
    report.fingerprint = fingerprint
    return report


def variant_label(cfg: CascadeConfig) -> str:
    return f"T={cfg.T} {cfg.weight_mode} {cfg.prior_mode}"


def variant_slug(cfg: CascadeConfig) -> str:
    return f"T{cfg.T}_{cfg.weight_mode}_{cfg.prior_mode}"


@dataclass
class AblationRow:
    label: str
    values: list[float]  # one per seed, already averaged over splits, percent
    absent: int = 0  # (seed, split) cells skipped for missing checkpoints

    @property
    def mean(self) -> float:
        return float(np.mean(self.values)) if self.values else float("nan")

    @property
    def std(self) -> float:
        return float(np.std(self.values)) if self.values else float("nan")


def format_ablation_table(rows: list[AblationRow]) -> str:
    """Aligned plain-text grid: variant, mean mIoU%, std, seed count."""
    width = max([len(r.label) for r in rows] + [len("variant")])
    lines = [f"{'variant':<{width}}  {'mIoU%':>7}  {'std':>6}  {'seeds':>5}"]
    for r in rows:
        if not r.values:
            lines.append(f"{r.label:<{width}}  {'absent':>7}  {'-':>6}  {0:>5}")
        else:
            lines.append(
                f"{r.label:<{width}}  {r.mean:>7.2f}  {r.std:>6.2f}  {len(r.values):>5}"
            )
    return "\n".join(lines) + "\n"


def run_ablation_table(
    dataset: SegmentationDataset,
    splits: list[SplitPlan],
    variants: list[CascadeConfig],
    seeds,
    root,
    *,
    n_episodes: int,
    kshot: int = 1,
) -> tuple[str, list[AblationRow]]:
    """Evaluate trained checkpoints for every variant x seed and format the
    comparison table.

    Expects the layout the ablate command produces under root:
    seed<S>_split<I>/backbone.pt and seed<S>_split<I>/<variant slug>/
    cascade_step<t>.pt. A missing checkpoint marks that cell absent and the
    run continues.
    """
    root = Path(root)
    rows = []
    for variant in variants:
        values: list[float] = []
        absent = 0
        for seed in seeds:
            per_split: list[float] = []
            for split in splits:
                base = root / f"seed{seed}_split{split.split_index}"
                n_nets = 1 if variant.weight_mode == "identical" else variant.T
                paths = [base / variant_slug(variant) / f"cascade_step{t}.pt"
                         for t in range(1, n_nets + 1)]
                bpath = base / "backbone.pt"
                if not bpath.exists() or any(not p.exists() for p in paths):
                    absent += 1
                    continue
                backbone, brec = load_backbone_checkpoint(bpath)
                nets = [load_fusion_checkpoint(p)[0] for p in paths]
                report = evaluate_split(
                    nets, backbone, dataset, split, n_episodes, kshot,
                    seed=int(seed), cascade=variant,
                    fingerprint=report_fingerprint(paths, int(seed), variant),
                    seen_classes=brec.get("seen_classes"),
                )
                per_split.append(report.miou)
            if per_split:
                values.append(100.0 * float(np.mean(per_split)))
        rows.append(AblationRow(label=variant_label(variant), values=values, absent=absent))
    return format_ablation_table(rows), rows

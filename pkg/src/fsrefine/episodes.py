"""Episodic data handling for few-shot segmentation.

A few-shot task is an Episode: K support (image, mask) pairs plus one query
pair, all of a single class. Classes are partitioned into disjoint train and
test sets (SplitPlan), and episodes are sampled from one side only. A
synthetic shape dataset stands in for the full-scale benchmarks so the whole
pipeline runs on a desk in minutes.
"""

from __future__ import annotations

import colorsys
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw
from torchvision.transforms import functional as TF
from torchvision.transforms.functional import InterpolationMode


@dataclass(frozen=True)
class Sample:
    """One (image, mask) pair.

    image: 3xHxW float32 tensor in [0,1].
    mask:  HxW float32 tensor with values in {0,1}, >=1 foreground pixel.
    """

    image: torch.Tensor
    mask: torch.Tensor
    class_id: int
    sample_id: str = ""

    def validate(self) -> None:
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise ValueError(f"image must be 3xHxW, got {tuple(self.image.shape)}")
        if self.mask.shape != self.image.shape[1:]:
            raise ValueError(
                f"mask {tuple(self.mask.shape)} does not match image "
                f"{tuple(self.image.shape[1:])}"
            )
        values = torch.unique(self.mask)
        if not all(v in (0.0, 1.0) for v in values.tolist()):
            raise ValueError("mask values must be in {0,1}")
        if self.mask.sum() < 1:
            raise ValueError("mask has no foreground pixel")


@dataclass(frozen=True)
class Episode:
    """K support samples plus one query, all of one class."""

    support: tuple[Sample, ...]
    query: Sample
    class_id: int

    def validate(self) -> None:
        if len(self.support) < 1:
            raise ValueError("episode needs at least one support sample")
        for s in self.support:
            if s.class_id != self.class_id:
                raise ValueError("support class does not match episode class")
        if self.query.class_id != self.class_id:
            raise ValueError("query class does not match episode class")
        for s in self.support:
            if s.sample_id == self.query.sample_id and s.sample_id:
                raise ValueError("query sample reappears in its own support set")

    @property
    def k(self) -> int:
        return len(self.support)


@dataclass(frozen=True)
class SplitPlan:
    """Disjoint class partition: train on C_train, evaluate on C_test."""

    train_classes: frozenset[int]
    test_classes: frozenset[int]
    split_index: int

    def validate(self) -> None:
        if self.train_classes & self.test_classes:
            raise ValueError("train and test classes overlap")


@dataclass(frozen=True)
class SynthConfig:
    """Synthetic shape dataset parameters."""

    n_classes: int = 12
    image_size: int = 48
    samples_per_class: int = 25
    noise_level: float = 0.08
    seed: int = 0

    def validate(self) -> None:
        if self.n_classes < 4:
            raise ValueError(f"n_classes must be >= 4, got {self.n_classes}")
        if self.image_size < 32:
            raise ValueError(f"image_size must be >= 32, got {self.image_size}")
        if self.samples_per_class < 1:
            raise ValueError("samples_per_class must be >= 1")
        if self.noise_level < 0:
            raise ValueError("noise_level must be >= 0")


class SegmentationDataset:
    """Pool of Samples grouped by class id."""

    def __init__(self, samples):
        self._by_class: dict[int, list[Sample]] = {}
        for s in samples:
            self._by_class.setdefault(s.class_id, []).append(s)

    @property
    def classes(self) -> list[int]:
        return sorted(self._by_class)

    def samples_of(self, class_id: int) -> list[Sample]:
        return list(self._by_class.get(class_id, []))

    def count(self, class_id: int) -> int:
        return len(self._by_class.get(class_id, []))

    def __len__(self) -> int:
        return sum(len(v) for v in self._by_class.values())

    def __iter__(self):
        for c in self.classes:
            yield from self._by_class[c]


def make_splits(class_ids, n_splits: int) -> list[SplitPlan]:
    """Partition class_ids into n_splits cross-validation plans.

    Plan i takes the i-th contiguous block of the given class order as its
    test set; everything else is train. Deterministic given the input order.

    Raises:
        ValueError: if n_splits does not divide len(class_ids).
    """
    class_ids = list(class_ids)
    if n_splits < 1:
        raise ValueError("n_splits must be >= 1")
    if len(class_ids) % n_splits != 0:
        raise ValueError(
            f"{len(class_ids)} classes not divisible into {n_splits} splits"
        )
    per = len(class_ids) // n_splits
    plans = []
    for i in range(n_splits):
        test = class_ids[i * per : (i + 1) * per]
        train = [c for c in class_ids if c not in test]
        plans.append(
            SplitPlan(
                train_classes=frozenset(train),
                test_classes=frozenset(test),
                split_index=i,
            )
        )
    return plans


def sample_episode(
    dataset: SegmentationDataset,
    class_id: int,
    k: int,
    rng: np.random.Generator,
) -> Episode:
    """Draw K distinct support samples plus one query of the given class.

    Raises:
        ValueError: if the class has fewer than K+1 samples.
    """
    pool = dataset.samples_of(class_id)
    if len(pool) < k + 1:
        raise ValueError(
            f"class {class_id} has {len(pool)} samples, need {k + 1} for a "
            f"{k}-shot episode"
        )
    idx = rng.choice(len(pool), size=k + 1, replace=False)
    support = tuple(pool[i] for i in idx[:k])
    query = pool[idx[k]]
    return Episode(support=support, query=query, class_id=class_id)


def _class_style(class_id: int) -> dict:
    # Stable per-class appearance: polygon arity, canonical color, stripe
    # texture. Independent of the dataset seed so class identity is fixed.
    hue = (class_id * 0.6180339887) % 1.0
    rgb = colorsys.hsv_to_rgb(hue, 0.65, 0.80)
    return {
        "arity": 3 + class_id % 6,
        "color": np.array(rgb, dtype=np.float32),
        "stripe_angle": math.radians((class_id * 47.0) % 180.0),
        "stripe_freq": 3.0 + class_id % 5,
    }


def _polygon_mask(size, arity, cx, cy, radius, rotation):
    pts = []
    for v in range(arity):
        a = rotation + 2.0 * math.pi * v / arity
        pts.append((cx + radius * math.cos(a), cy + radius * math.sin(a)))
    img = Image.new("L", (size, size), 0)
    ImageDraw.Draw(img).polygon(pts, fill=255)
    return (np.asarray(img) > 127).astype(np.float32)


def _stripes(size, angle, freq, phase):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    t = xx * math.cos(angle) + yy * math.sin(angle)
    return np.sin(2.0 * math.pi * freq * t / size + phase).astype(np.float32)


def generate_synthetic_dataset(cfg: SynthConfig) -> SegmentationDataset:
    """Render the synthetic shape dataset described by cfg.

    Each class is a shape family: a regular polygon of class-specific arity
    carrying a class-specific stripe texture, drawn at random pose and scale
    over a textured background. Masks are exact rasterizations. Pure function
    of cfg: the same config yields bit-identical tensors.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    size = cfg.image_size
    samples = []
    for class_id in range(cfg.n_classes):
        style = _class_style(class_id)
        for i in range(cfg.samples_per_class):
            radius = rng.uniform(0.16, 0.30) * size
            margin = radius + 2.0
            cx = rng.uniform(margin, size - margin)
            cy = rng.uniform(margin, size - margin)
            rotation = rng.uniform(0.0, 2.0 * math.pi)
            mask = _polygon_mask(size, style["arity"], cx, cy, radius, rotation)

            base = rng.uniform(0.25, 0.75)
            gdir = rng.uniform(0.0, 2.0 * math.pi)
            yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
            ramp = (xx * math.cos(gdir) + yy * math.sin(gdir)) / size
            bg_tex = _stripes(
                size, rng.uniform(0.0, math.pi), rng.uniform(2.0, 6.0),
                rng.uniform(0.0, 2.0 * math.pi),
            )
            bg = base + 0.15 * (ramp - ramp.mean()) + 0.06 * bg_tex
            bg = np.clip(bg, 0.0, 1.0)[..., None].repeat(3, axis=2)

            fg_tex = _stripes(
                size, style["stripe_angle"], style["stripe_freq"],
                rng.uniform(0.0, 2.0 * math.pi),
            )
            grain = rng.normal(0.0, 1.0, (size, size)).astype(np.float32)
            fg = style["color"][None, None, :] + cfg.noise_level * (
                0.6 * fg_tex + 0.4 * grain
            )[..., None]
            fg = np.clip(fg, 0.0, 1.0)

            m3 = mask[..., None]
            img = (m3 * fg + (1.0 - m3) * bg).astype(np.float32)
            samples.append(
                Sample(
                    image=torch.from_numpy(img.transpose(2, 0, 1)).contiguous(),
                    mask=torch.from_numpy(mask),
                    class_id=class_id,
                    sample_id=f"s{i:03d}",
                )
            )
    return SegmentationDataset(samples)


def hflip_sample(sample: Sample) -> Sample:
    """Mirror image and mask around the vertical axis."""
    return Sample(
        image=torch.flip(sample.image, dims=[2]),
        mask=torch.flip(sample.mask, dims=[1]),
        class_id=sample.class_id,
        sample_id=sample.sample_id,
    )


def rotate_sample(sample: Sample, angle_deg: float) -> Sample:
    """Rotate image (bilinear) and mask (nearest, re-binarized) together."""
    if angle_deg == 0.0:
        return sample
    img = TF.rotate(sample.image, angle_deg, interpolation=InterpolationMode.BILINEAR)
    m = TF.rotate(sample.mask[None], angle_deg, interpolation=InterpolationMode.NEAREST)
    return Sample(
        image=img.clamp(0.0, 1.0),
        mask=(m[0] > 0.5).float(),
        class_id=sample.class_id,
        sample_id=sample.sample_id,
    )


def crop_sample(sample: Sample, top: int, left: int, size: int) -> Sample:
    """Crop a size x size window. Raises ValueError if it does not fit."""
    h, w = sample.mask.shape
    if size > h or size > w:
        raise ValueError(f"crop size {size} exceeds image size {h}x{w}")
    if top < 0 or left < 0 or top + size > h or left + size > w:
        raise ValueError(f"crop window ({top},{left})+{size} outside {h}x{w}")
    return Sample(
        image=sample.image[:, top : top + size, left : left + size],
        mask=sample.mask[top : top + size, left : left + size],
        class_id=sample.class_id,
        sample_id=sample.sample_id,
    )


def augment(
    sample: Sample,
    rng: np.random.Generator,
    *,
    crop_size: int | None = None,
    max_rotation_deg: float = 15.0,
    flip_prob: float = 0.5,
    max_retries: int = 3,
) -> Sample:
    """Random horizontal flip, rotation, and crop with a shared geometry.

    Image and mask receive the identical transform; the mask stays binary
    (nearest rotation resampling). If a draw empties the foreground, the
    transform is redrawn up to max_retries times, after which flip and
    rotation are dropped and the crop window is forced to contain a
    foreground pixel.

    Raises:
        ValueError: if crop_size exceeds the input size.
    """
    h, w = sample.mask.shape
    size = min(h, w) if crop_size is None else crop_size
    if size > h or size > w:
        raise ValueError(f"crop size {size} exceeds image size {h}x{w}")

    for _ in range(max_retries + 1):
        out = sample
        if flip_prob > 0 and rng.random() < flip_prob:
            out = hflip_sample(out)
        if max_rotation_deg > 0:
            out = rotate_sample(out, float(rng.uniform(-max_rotation_deg, max_rotation_deg)))
        top = int(rng.integers(0, h - size + 1))
        left = int(rng.integers(0, w - size + 1))
        out = crop_sample(out, top, left, size)
        if out.mask.sum() > 0:
            return out

    # Fallback: no flip or rotation, crop window centered on a foreground
    # pixel (clamped), so the nonempty-mask invariant always holds.
    ys, xs = torch.nonzero(sample.mask, as_tuple=True)
    cy, cx = int(ys[0]), int(xs[0])
    top = min(max(cy - size // 2, 0), h - size)
    left = min(max(cx - size // 2, 0), w - size)
    return crop_sample(sample, top, left, size)


def save_dataset(dataset: SegmentationDataset, root, force: bool = False) -> None:
    """Write the on-disk layout: <root>/<class_id>/<sample_id>.img|.mask.

    Both files are PNG rasters regardless of extension; images are 8-bit RGB,
    masks single-channel with foreground stored as 255.

    Raises:
        FileExistsError: if root is a non-empty directory and force is False.
    """
    root = Path(root)
    if root.exists() and any(root.iterdir()):
        if not force:
            raise FileExistsError(f"output directory {root} is not empty")
        for p in sorted(root.rglob("*"), reverse=True):
            p.unlink() if p.is_file() else p.rmdir()
    for sample in dataset:
        cdir = root / str(sample.class_id)
        cdir.mkdir(parents=True, exist_ok=True)
        arr = (sample.image.numpy().transpose(1, 2, 0) * 255.0).round().astype(np.uint8)
        Image.fromarray(arr, mode="RGB").save(cdir / f"{sample.sample_id}.img", format="PNG")
        marr = (sample.mask.numpy() * 255.0).astype(np.uint8)
        Image.fromarray(marr, mode="L").save(cdir / f"{sample.sample_id}.mask", format="PNG")


def load_dataset(root) -> SegmentationDataset:
    """Read a dataset written in the documented layout.

    Mask pixels are mapped 255 -> 1, 0 -> 0; any other value is rejected.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    samples = []
    for cdir in sorted(root.iterdir(), key=lambda p: p.name):
        if not cdir.is_dir() or not cdir.name.isdigit():
            continue
        class_id = int(cdir.name)
        for ipath in sorted(cdir.glob("*.img")):
            mpath = ipath.with_suffix(".mask")
            if not mpath.exists():
                raise FileNotFoundError(f"missing mask for {ipath}")
            img = np.asarray(Image.open(ipath).convert("RGB"), dtype=np.float32) / 255.0
            marr = np.asarray(Image.open(mpath).convert("L"))
            bad = set(np.unique(marr)) - {0, 255}
            if bad:
                raise ValueError(f"mask {mpath} contains values {sorted(bad)}, expected {{0,255}}")
            samples.append(
                Sample(
                    image=torch.from_numpy(img.transpose(2, 0, 1)).contiguous(),
                    mask=torch.from_numpy((marr == 255).astype(np.float32)),
                    class_id=class_id,
                    sample_id=ipath.stem,
                )
            )
    return SegmentationDataset(samples)


def save_splits(plans: list[SplitPlan], path) -> None:
    """Write split files: a 'split <i>' header line, then one test-class id
    per line. Train classes are implied (all remaining classes)."""
    lines = []
    for plan in sorted(plans, key=lambda p: p.split_index):
        lines.append(f"split {plan.split_index}")
        lines.extend(str(c) for c in sorted(plan.test_classes))
    Path(path).write_text("\n".join(lines) + "\n")


def load_splits(path, class_ids) -> list[SplitPlan]:
    """Read split files written by save_splits.

    Args:
        class_ids: the full class universe, used to reconstruct train sets.
    """
    all_classes = frozenset(int(c) for c in class_ids)
    plans = []
    current: list[int] | None = None
    index = -1
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("split"):
            if current is not None:
                plans.append(_plan_from(current, index, all_classes))
            index = int(line.split()[1])
            current = []
        else:
            if current is None:
                raise ValueError(f"class id before any split header in {path}")
            current.append(int(line))
    if current is not None:
        plans.append(_plan_from(current, index, all_classes))
    return plans


def _plan_from(test_ids, index, all_classes):
    test = frozenset(test_ids)
    unknown = test - all_classes
    if unknown:
        raise ValueError(f"split {index} names unknown classes {sorted(unknown)}")
    return SplitPlan(
        train_classes=all_classes - test,
        test_classes=test,
        split_index=index,
    )

"""Rendering.

Two kinds of output. Qualitative panels (support, query with ground-truth
outline, baseline mask, prior heatmap, augmented-prior heatmap, final mask)
are composed as raw uint8 arrays with pixel-exact contracts: heatmaps are
nearest-upsampled round(v*255) grayscale, and the outline column modifies
exactly the ground-truth boundary pixels. Report figures (loss curve,
per-class IoU bars, ablation chart) are matplotlib renderings written next
to the delimited logs they chart.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image  # noqa: E402

from .episodes import Episode, Sample  # noqa: E402
from .prior import ProbMap  # noqa: E402
from .refine import CascadeTrace, binarize  # noqa: E402

PANEL_COLUMNS = "abcdef"

_HIGHLIGHT = np.array([255, 64, 64], dtype=np.float32)


def to_uint8_image(image) -> np.ndarray:
    """3xHxW float [0,1] tensor -> HxWx3 uint8 array."""
    arr = image.detach().cpu().numpy().transpose(1, 2, 0)
    return np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)


def nearest_upsample(arr: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbor resize by index mapping: output (i,j) reads source
    (floor(i*h/H), floor(j*w/W))."""
    h, w = arr.shape[:2]
    rows = (np.arange(size[0]) * h) // size[0]
    cols = (np.arange(size[1]) * w) // size[1]
    return arr[rows][:, cols]


def mask_boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with at least one background 4-neighbor; pixels on
    the image border count their out-of-frame side as background."""
    fg = mask > 0.5
    padded = np.pad(fg, 1, constant_values=False)
    inner = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return fg & ~inner


def heatmap_tile(p: ProbMap, size: tuple[int, int]) -> np.ndarray:
    """Grayscale heatmap: round(v*255), nearest-upsampled, 3 channels."""
    gray = np.round(p.plane.detach().cpu().numpy() * 255.0).astype(np.uint8)
    up = nearest_upsample(gray, size)
    return np.stack([up, up, up], axis=2)


def mask_tile(mask, size: tuple[int, int]) -> np.ndarray:
    arr = (mask.detach().cpu().numpy() > 0.5).astype(np.uint8) * 255
    up = nearest_upsample(arr, size)
    return np.stack([up, up, up], axis=2)


def support_tile(sample: Sample, size: tuple[int, int]) -> np.ndarray:
    """Support image with foreground blended halfway toward a highlight."""
    img = to_uint8_image(sample.image).astype(np.float32)
    fg = (sample.mask.numpy() > 0.5)[..., None]
    out = np.where(fg, 0.5 * img + 0.5 * _HIGHLIGHT, img)
    out = np.clip(np.round(out), 0, 255).astype(np.uint8)
    return nearest_upsample(out, size)


def query_tile(sample: Sample, size: tuple[int, int], outline: bool = True) -> np.ndarray:
    """Query image, optionally with ground truth outlined by inverting the
    boundary pixels (inversion differs from the original at every pixel)."""
    img = to_uint8_image(sample.image)
    img = nearest_upsample(img, size)
    if outline:
        mask = nearest_upsample(sample.mask.numpy(), size)
        edge = mask_boundary(mask)
        img = img.copy()
        img[edge] = 255 - img[edge]
    return img


def render_panel(
    episode: Episode,
    trace: CascadeTrace,
    out_path,
    columns: str = PANEL_COLUMNS,
) -> np.ndarray:
    """Compose one episode row and write it as a PNG.

    Columns: (a) first support with highlighted foreground, (b) query with
    ground-truth outline, (c) baseline mask from the first refinement step,
    (d) prior heatmap, (e) augmented-prior heatmap after the first step,
    (f) final mask. Any subset/order via the columns string; tile size is the
    query resolution, so the full panel is len(columns) tiles wide.

    Returns the composed HxWx3 uint8 array.

    Raises:
        ValueError: unknown column letter.
        RuntimeError: when the file cannot be written.
    """
    letters = [c for c in columns.replace(",", "") if not c.isspace()]
    unknown = [c for c in letters if c not in PANEL_COLUMNS]
    if unknown:
        raise ValueError(f"unknown panel columns {unknown}; valid letters are a-f")
    size = tuple(episode.query.mask.shape)

    def tile(letter: str) -> np.ndarray:
        if letter == "a":
            return support_tile(episode.support[0], size)
        if letter == "b":
            return query_tile(episode.query, size)
        if letter == "c":
            return mask_tile(binarize(trace.estimates[0], size=size), size)
        if letter == "d":
            return heatmap_tile(trace.prior, size)
        if letter == "e":
            return heatmap_tile(trace.augmented[0], size)
        return mask_tile(trace.final_mask_full, size)

    panel = np.concatenate([tile(c) for c in letters], axis=1)
    out_path = Path(out_path)
    try:
        out_path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(panel, mode="RGB").save(out_path, format="PNG")
    except OSError as e:
        raise RuntimeError(f"cannot write panel to {out_path}: {e}") from e
    return panel


def _new_axes(width=6.0, height=3.5):
    fig, ax = plt.subplots(figsize=(width, height), dpi=110)
    ax.grid(True, alpha=0.3)
    return fig, ax


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def smooth(values, window: int = 25) -> np.ndarray:
    """Trailing moving average with a warmup-truncated window."""
    values = np.asarray(values, dtype=np.float64)
    if len(values) == 0:
        return values
    out = np.empty_like(values)
    csum = np.cumsum(values)
    for i in range(len(values)):
        lo = max(0, i - window + 1)
        total = csum[i] - (csum[lo - 1] if lo > 0 else 0.0)
        out[i] = total / (i - lo + 1)
    return out


def plot_loss_curve(log, path) -> Path:
    """Loss per step plus its smoothed trace. log: TrainLog-shaped object."""
    steps = [r.step for r in log.steps]
    losses = [r.loss for r in log.steps]
    fig, ax = _new_axes()
    ax.plot(steps, losses, lw=0.8, alpha=0.45, label="loss")
    if len(losses) > 1:
        ax.plot(steps, smooth(losses), lw=1.6, label="smoothed")
    ax.set_xlabel("step")
    ax.set_ylabel("cross-entropy")
    ax.legend()
    return _save(fig, path)


def plot_class_iou(report, path) -> Path:
    """Per-class IoU bars with the mean marked. report: EvalReport-shaped."""
    classes = sorted(report.per_class_iou)
    values = [report.per_class_iou[c] for c in classes]
    fig, ax = _new_axes()
    ax.bar([str(c) for c in classes], values, color="#4878b0")
    ax.axhline(report.miou, color="#b04848", lw=1.4, label=f"mIoU {report.miou:.3f}")
    ax.set_xlabel("class")
    ax.set_ylabel("IoU")
    ax.set_ylim(0, 1)
    ax.legend()
    return _save(fig, path)


def plot_ablation(rows, path) -> Path:
    """Variant means with std error bars. rows: AblationRow-shaped objects."""
    present = [r for r in rows if r.values]
    fig, ax = _new_axes(width=max(6.0, 1.8 * len(present)))
    labels = [r.label for r in present]
    ax.bar(labels, [r.mean for r in present], yerr=[r.std for r in present],
           capsize=4, color="#4878b0")
    ax.set_ylabel("mIoU (%)")
    ax.tick_params(axis="x", rotation=12)
    return _save(fig, path)

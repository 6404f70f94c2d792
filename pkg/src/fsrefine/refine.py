"""Iterative refinement cascade.

Starting from the similarity prior p(0), each step feeds the previous
estimate (or its augmented form: estimate times original prior, renormalized)
back into the fusion network as the prior channel. The final estimate is
upsampled to image resolution and thresholded into the predicted mask.
K-shot episodes aggregate support features and priors by plain averaging
before the cascade runs.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn.functional as F
from PIL import Image

from .backbone import FeatureMap, ToyBackbone, extract_features, resize_mask_area
from .episodes import Episode
from .fusion import EmptySupportWarning, FusionInput, FusionNet, condense_support
from .prior import ProbMap, generate_prior, minmax_normalize, probmap_to_gray

WEIGHT_MODES = ("identical", "different")
PRIOR_MODES = ("plain", "augmented")


@dataclass(frozen=True)
class CascadeConfig:
    """Refinement count and wiring.

    Defaults are the chosen operating point: two refinements with separate
    weights, feeding the augmented prior between steps.
    """

    T: int = 2
    weight_mode: str = "different"
    prior_mode: str = "augmented"
    threshold: float = 0.5

    def validate(self) -> None:
        if self.T < 1:
            raise ValueError(f"T must be >= 1, got {self.T}")
        if self.weight_mode not in WEIGHT_MODES:
            raise ValueError(f"weight_mode must be one of {WEIGHT_MODES}, got {self.weight_mode!r}")
        if self.prior_mode not in PRIOR_MODES:
            raise ValueError(f"prior_mode must be one of {PRIOR_MODES}, got {self.prior_mode!r}")
        if not (0.0 < self.threshold < 1.0):
            raise ValueError(f"threshold must fall in (0,1), got {self.threshold}")


@dataclass
class CascadeTrace:
    """Everything one cascade run produced.

    estimates and augmented both have length T; in plain mode the augmented
    maps are recorded for inspection but never fed back.
    """

    prior: ProbMap
    estimates: list[ProbMap]
    augmented: list[ProbMap]
    logits: list[torch.Tensor]
    final_mask: torch.Tensor
    final_mask_full: torch.Tensor
    empty_support: bool = False

    def validate(self) -> None:
        t = len(self.estimates)
        if len(self.augmented) != t or len(self.logits) != t:
            raise ValueError("trace lists must share length T")
        self.prior.validate()
        for p in self.estimates + self.augmented:
            p.validate()


def softmax_binary(z: torch.Tensor) -> ProbMap:
    """Two-way softmax, channel-1 probability, numerically stable.

    Computed as the complement pair of sigmoid(-|z1 - z0|), which keeps
    p(z) + p(z with channels swapped) == 1.0 bitwise and never overflows.
    float32 rounds 1 - q to exactly 1.0 once the margin exceeds ~18 and q
    itself underflows to exactly 0.0 near margin 90, so the output lives in
    the closed interval [0,1] with both endpoints attainable.
    """
    if z.ndim != 3 or z.shape[0] != 2:
        raise ValueError(f"logits must be 2 x h x w, got {tuple(z.shape)}")
    d = z[1] - z[0]
    q = torch.sigmoid(-d.abs())
    p = torch.where(d > 0, 1.0 - q, q)
    out = ProbMap(data=p[None], kind="estimate")
    if __debug__:
        out.validate()
    return out


def augment_prior(p: ProbMap, p_sim: ProbMap) -> ProbMap:
    """Element-wise product with the original prior, min-max renormalized."""
    if p.grid != p_sim.grid:
        raise ValueError(f"spatial mismatch: estimate {p.grid} vs prior {p_sim.grid}")
    return minmax_normalize(p.plane * p_sim.plane, kind="augmented")


def binarize(p, threshold: float = 0.5, size: tuple[int, int] | None = None) -> torch.Tensor:
    """Strict > threshold comparison, optionally after bilinear upsampling
    of the probability map to the target size (threshold happens last)."""
    plane = p.plane if isinstance(p, ProbMap) else (p if p.ndim == 2 else p[0])
    if size is not None and tuple(plane.shape) != tuple(size):
        plane = F.interpolate(
            plane[None, None], size=tuple(size), mode="bilinear", align_corners=False
        )[0, 0].clamp(0.0, 1.0)
    return (plane > threshold).to(torch.float32)


def kshot_aggregate(mid_features: list, priors: list[ProbMap]) -> tuple[FeatureMap, ProbMap]:
    """Average masked mid-level features and priors across the K supports.

    The averages substitute the single-support inputs downstream; with K=1
    the outputs are bit-identical to the inputs.

    Raises:
        ValueError: empty lists, length mismatch, or inhomogeneous shapes.
    """
    if not mid_features or not priors:
        raise ValueError("kshot_aggregate needs at least one support")
    if len(mid_features) != len(priors):
        raise ValueError(f"{len(mid_features)} feature maps vs {len(priors)} priors")
    fm0 = mid_features[0]
    tensors = [f.data if isinstance(f, FeatureMap) else f for f in mid_features]
    if any(t.shape != tensors[0].shape for t in tensors):
        raise ValueError("support feature shapes differ")
    planes = [p.plane for p in priors]
    if any(pl.shape != planes[0].shape for pl in planes):
        raise ValueError("support prior shapes differ")
    f_bar = torch.stack(tensors).mean(dim=0)
    p_bar = torch.stack(planes).mean(dim=0)
    stride = fm0.stride if isinstance(fm0, FeatureMap) else 1
    return (
        FeatureMap(data=f_bar, level="mid", stride=stride),
        ProbMap(data=p_bar[None], kind="prior"),
    )


def _select_networks(networks, cfg: CascadeConfig) -> list[FusionNet]:
    nets = [networks] if isinstance(networks, FusionNet) else list(networks)
    if cfg.weight_mode == "identical" and len(nets) != 1:
        raise ValueError(f"identical weight mode takes exactly 1 network, got {len(nets)}")
    if cfg.weight_mode == "different" and len(nets) != cfg.T:
        raise ValueError(f"different weight mode takes T={cfg.T} networks, got {len(nets)}")
    return nets


def run_cascade(
    networks,
    prior: ProbMap,
    support_mid: FeatureMap,
    query_mid: FeatureMap,
    cfg: CascadeConfig,
    *,
    image_size: tuple[int, int] | None = None,
    detach_between_steps: bool = False,
    empty_support: bool = False,
) -> CascadeTrace:
    """Iterate the fusion network T times from the similarity prior.

    Step 1 always consumes p(0); step t >= 2 consumes p(t-1) in plain mode or
    its augmented form in augmented mode. The prior is resized bilinearly to
    the mid-feature grid first. Gradients flow through the whole unroll
    unless detach_between_steps cuts the recurrence.

    Args:
        networks: one FusionNet (identical mode) or a list of T (different).
        image_size: when given, the trace also carries the prediction
            upsampled to this H x W.
    """
    cfg.validate()
    nets = _select_networks(networks, cfg)

    grid = query_mid.grid
    plane = prior.plane
    if tuple(plane.shape) != grid:
        plane = F.interpolate(
            plane[None, None], size=grid, mode="bilinear", align_corners=False
        )[0, 0].clamp(0.0, 1.0)
    p0 = ProbMap(data=plane[None], kind="prior")

    estimates: list[ProbMap] = []
    augmented: list[ProbMap] = []
    logits: list[torch.Tensor] = []
    current = p0
    for t in range(1, cfg.T + 1):
        net = nets[0] if cfg.weight_mode == "identical" else nets[t - 1]
        z = net(FusionInput(prior=current, support_mid=support_mid, query_mid=query_mid))
        p_t = softmax_binary(z)
        a_t = augment_prior(p_t, p0)
        estimates.append(p_t)
        augmented.append(a_t)
        logits.append(z)
        nxt = p_t if cfg.prior_mode == "plain" else a_t
        if detach_between_steps:
            nxt = ProbMap(data=nxt.data.detach(), kind=nxt.kind)
        current = nxt

    final = binarize(estimates[-1], cfg.threshold)
    final_full = (
        binarize(estimates[-1], cfg.threshold, size=image_size)
        if image_size is not None
        else final
    )
    trace = CascadeTrace(
        prior=p0,
        estimates=estimates,
        augmented=augmented,
        logits=logits,
        final_mask=final,
        final_mask_full=final_full,
        empty_support=empty_support,
    )
    if __debug__:
        trace.validate()
    return trace


def run_episode(
    backbone: ToyBackbone,
    networks,
    episode: Episode,
    cfg: CascadeConfig,
    *,
    detach_between_steps: bool = False,
) -> CascadeTrace:
    """Full pipeline on one episode: features, priors, K-shot aggregation,
    support condensation, cascade, final mask at query resolution."""
    f_mq, f_hq = extract_features(episode.query.image, backbone)

    mids, soft_masks, priors = [], [], []
    for s in episode.support:
        f_ms, f_hs = extract_features(s.image, backbone)
        m_mid = resize_mask_area(s.mask, f_ms.grid)
        m_high = resize_mask_area(s.mask, f_hs.grid)
        mids.append(FeatureMap(data=f_ms.data * m_mid[None], level="mid", stride=f_ms.stride))
        soft_masks.append(m_mid)
        priors.append(
            generate_prior(
                f_hq, FeatureMap(data=f_hs.data * m_high[None], level="high", stride=f_hs.stride)
            )
        )

    f_bar, p_bar = kshot_aggregate(mids, priors)
    m_bar = torch.stack(soft_masks).mean(dim=0)

    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", EmptySupportWarning)
        proto = condense_support(f_bar, m_bar, grid=f_mq.grid)
    empty = any(isinstance(w.message, EmptySupportWarning) for w in caught)

    h, w = episode.query.mask.shape
    return run_cascade(
        networks,
        p_bar,
        proto,
        f_mq,
        cfg,
        image_size=(h, w),
        detach_between_steps=detach_between_steps,
        empty_support=empty,
    )


def export_trace(trace: CascadeTrace, out_dir) -> list[Path]:
    """Write grayscale heatmaps of p(0), every p(t) and p_aug(t), plus the
    final binary mask, as PNG files named by step."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    def _put(name, arr):
        path = out_dir / name
        Image.fromarray(arr, mode="L").save(path, format="PNG")
        written.append(path)

    _put("step0_prior.png", probmap_to_gray(trace.prior))
    for i, (p, a) in enumerate(zip(trace.estimates, trace.augmented), start=1):
        _put(f"step{i}_estimate.png", probmap_to_gray(p))
        _put(f"step{i}_augmented.png", probmap_to_gray(a))
    mask = (trace.final_mask_full.numpy() * 255).astype("uint8")
    _put("final_mask.png", mask)
    return written

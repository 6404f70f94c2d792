"""Similarity-map prior.

The initial region estimate: cosine similarity between every query pixel and
every masked-support pixel of the high-level features, reduced by a max over
support positions, then min-max normalized into [0,1). Pure functions, no
trainable state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import FeatureMap

MINMAX_EPS = 1e-7

PROB_KINDS = ("prior", "estimate", "augmented")


@dataclass
class ProbMap:
    """1 x h x w map with values in [0,1]."""

    data: torch.Tensor
    kind: str

    def validate(self) -> None:
        if self.kind not in PROB_KINDS:
            raise ValueError(f"kind must be one of {PROB_KINDS}, got {self.kind!r}")
        if self.data.ndim != 2 and not (self.data.ndim == 3 and self.data.shape[0] == 1):
            raise ValueError(f"prob map must be 1 x h x w, got {tuple(self.data.shape)}")
        with torch.no_grad():
            if not torch.isfinite(self.data).all():
                raise ValueError("prob map contains non-finite values")
            lo, hi = self.data.min().item(), self.data.max().item()
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"prob map values outside [0,1]: min {lo}, max {hi}")

    @property
    def grid(self) -> tuple[int, int]:
        return self.data.shape[-2], self.data.shape[-1]

    @property
    def plane(self) -> torch.Tensor:
        """The h x w view regardless of the leading channel axis."""
        return self.data if self.data.ndim == 2 else self.data[0]


def _as_tensor(f) -> torch.Tensor:
    return f.data if isinstance(f, FeatureMap) else f


def pairwise_cosine(f_hq, f_hs_masked) -> torch.Tensor:
    """Dense cosine similarity between all query/support pixel pairs.

    Entry (i, j) is cos(f_hq pixel i, f_hs pixel j) with pixels flattened in
    row-major order. Zero-norm pixel vectors (masked-out support cells, dead
    activations) yield similarity 0.

    Returns:
        hw x hw tensor with entries in [-1, 1].

    Raises:
        ValueError: on channel or spatial mismatch.
    """
    q = _as_tensor(f_hq)
    s = _as_tensor(f_hs_masked)
    if q.shape[0] != s.shape[0]:
        raise ValueError(f"channel mismatch: query {q.shape[0]} vs support {s.shape[0]}")
    if q.shape[1:] != s.shape[1:]:
        raise ValueError(
            f"spatial mismatch: query {tuple(q.shape[1:])} vs support "
            f"{tuple(s.shape[1:])}; resize before calling"
        )
    c = q.shape[0]
    qf = q.reshape(c, -1).transpose(0, 1)
    sf = s.reshape(c, -1).transpose(0, 1)
    qn = qf.norm(dim=1, keepdim=True)
    sn = sf.norm(dim=1, keepdim=True)
    # zero-norm rows divide by 1 and stay exactly zero
    qf = qf / torch.where(qn > 0, qn, torch.ones_like(qn))
    sf = sf / torch.where(sn > 0, sn, torch.ones_like(sn))
    sim = (qf @ sf.transpose(0, 1)).clamp(-1.0, 1.0)
    assert sim.shape[0] == sim.shape[1]
    return sim


def max_over_support(sim: torch.Tensor, grid: tuple[int, int]) -> torch.Tensor:
    """Per query pixel, the maximum similarity over all support pixels,
    reshaped to the h x w query grid."""
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise ValueError(f"similarity matrix must be square, got {tuple(sim.shape)}")
    h, w = grid
    if h * w != sim.shape[0]:
        raise ValueError(f"grid {h}x{w} does not match matrix size {sim.shape[0]}")
    return sim.max(dim=1).values.reshape(h, w)


def minmax_normalize(v: torch.Tensor, kind: str = "prior") -> ProbMap:
    """Min-max normalization (v - min) / (max - min + 1e-7).

    The minimum cell maps to exactly 0; a constant map maps to all zeros. The
    1e-7 guard is part of the definition, so the output lives in [0, 1).
    """
    plane = v if v.ndim == 2 else v.reshape(v.shape[-2], v.shape[-1])
    mn = plane.amin()
    mx = plane.amax()
    out = (plane - mn) / (mx - mn + MINMAX_EPS)
    p = ProbMap(data=out[None], kind=kind)
    if __debug__:
        p.validate()
    return p


def generate_prior(f_hq, f_hs_masked) -> ProbMap:
    """Compose the pipeline: cosine map, max over support, min-max norm.

    Support features are resized bilinearly to the query grid when the two
    grids differ.
    """
    q = _as_tensor(f_hq)
    s = _as_tensor(f_hs_masked)
    if q.shape[0] != s.shape[0]:
        raise ValueError(f"channel mismatch: query {q.shape[0]} vs support {s.shape[0]}")
    if q.shape[1:] != s.shape[1:]:
        s = F.interpolate(s[None], size=q.shape[1:], mode="bilinear", align_corners=False)[0]
    sim = pairwise_cosine(q, s)
    v = max_over_support(sim, (q.shape[1], q.shape[2]))
    return minmax_normalize(v, kind="prior")


def probmap_to_gray(p: ProbMap) -> np.ndarray:
    """Grayscale export: round(v * 255) as uint8 at the map's native grid."""
    plane = p.plane.detach().cpu().numpy()
    return np.round(plane * 255.0).astype(np.uint8)

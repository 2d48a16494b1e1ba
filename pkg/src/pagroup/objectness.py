"""Region objectness scoring, score combination and pseudo-mask selection.

The affinity objectness of a region is its inner pair-affinity density
minus its boundary-crossing affinity density: strong internal cohesion and
a weak cut rank high. An externally supplied localization score (geometric
mean of centerness and IoU quality) can be averaged in.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .masks import InstanceSet, boundary_pixels, iou, mask_area
from .grouping import symmetric_channels, FORWARD_CHANNELS
from .affinity import OFFSETS
from .masks import _shift

__all__ = [
    "ObjectnessBreakdown",
    "ScoredRegion",
    "score_o_pa",
    "score_o_oln",
    "combine_scores",
    "rank_and_select",
]


@dataclass(frozen=True)
class ObjectnessBreakdown:
    inner_sum: float
    outer_sum: float
    inner_count: int
    boundary_count: int

    @property
    def o_pa(self) -> float:
        outer_term = self.outer_sum / self.boundary_count if self.boundary_count else 0.0
        return self.inner_sum / self.inner_count - outer_term


@dataclass
class ScoredRegion:
    region_id: int
    mask: np.ndarray
    o_pa: float
    o_oln: float | None
    provenance: str = ""

    @property
    def combined(self) -> float:
        return combine_scores(self.o_pa, self.o_oln)

    @property
    def area(self) -> int:
        return mask_area(self.mask)


def score_o_pa(region, aff: np.ndarray) -> ObjectnessBreakdown:
    """Affinity objectness components of a region.

    Inner sums the undirected pair affinity over in-image 8-adjacent pairs
    with both pixels in the region; Outer over pairs with exactly one pixel
    in the region. Densities are normalized by region area and boundary
    pixel count; a region with no boundary pixels has outer term 0.
    """
    region = np.asarray(region, dtype=bool)
    aff = np.asarray(aff)
    if aff.shape[1:] != region.shape:
        raise ValueError(f"affinity dims {aff.shape[1:]} != region dims {region.shape}")
    area = int(np.count_nonzero(region))
    if area == 0:
        raise ValueError("region is empty")
    sym, inimg = symmetric_channels(aff)
    inner = 0.0
    outer = 0.0
    for d, p in enumerate(FORWARD_CHANNELS):
        dy, dx = OFFSETS[p]
        nb = _shift(region, dy, dx, fill=False)
        both = region & nb & inimg[d]
        one = (region ^ nb) & inimg[d]
        inner += float(sym[d][both].sum())
        outer += float(sym[d][one].sum())
    n_boundary = int(np.count_nonzero(boundary_pixels(region)))
    return ObjectnessBreakdown(inner, outer, area, n_boundary)


def score_o_oln(centerness: float, iouness: float) -> float:
    """Geometric mean of a region's centerness and IoU-quality scores."""
    for name, v in (("centerness", centerness), ("iouness", iouness)):
        if not (0.0 <= v <= 1.0):
            raise ValueError(f"{name} {v} outside [0, 1]")
    return math.sqrt(centerness * iouness)


def combine_scores(o_pa: float, o_oln: float | None) -> float:
    """o_pa alone, or the mean of the two scores when both are present."""
    if o_oln is None:
        return o_pa
    return 0.5 * (o_pa + o_oln)


def rank_and_select(
    regions: list[ScoredRegion],
    k: int,
    gt: InstanceSet | None = None,
    overlap_iou: float = 0.5,
) -> list[ScoredRegion]:
    """Pick the top-k regions by combined score, excluding GT look-alikes.

    Regions whose IoU with any ground-truth mask exceeds overlap_iou are
    dropped first. Ties break by larger area then lower region id, so the
    output order is fully deterministic.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    kept = []
    for reg in regions:
        if gt is not None and len(gt) > 0:
            best = max(iou(reg.mask, g) for _, g in gt)
            if best > overlap_iou:
                continue
        kept.append(reg)
    kept.sort(key=lambda r: (-r.combined, -r.area, r.region_id))
    return kept[:k]

"""Pairwise-affinity encoding, supervision targets and channel aggregation.

An affinity map is a float array of shape (8, H, W). Channel p holds the
affinity between pixel (i, j) and its neighbor at OFFSETS[p]; entries whose
neighbor falls outside the image are stored as 0 and are excluded from
aggregation, loss evaluation and symmetry checks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .masks import InstanceSet, _shift, instances_to_labelmap

# Row-major 3x3 neighbor offsets; opposite(p) == 7 - p.
OFFSETS = ((-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1))

AGGREGATION_MODES = ("min", "max", "mean")

__all__ = [
    "OFFSETS",
    "AGGREGATION_MODES",
    "SupervisionTarget",
    "neighbor_validity",
    "encode_pa",
    "build_supervision",
    "pos_weight",
    "masked_weighted_bce",
    "aggregate",
    "aggregate_target_1ch",
    "perturb",
]


@dataclass
class SupervisionTarget:
    """Binary affinity target with validity and per-entry loss weights.

    valid is False wherever the neighbor is off-image or the pixel pair is
    background-background; weight is positive only where valid.
    """

    target: np.ndarray  # (8, H, W) float, values in {0, 1}
    valid: np.ndarray  # (8, H, W) bool
    weight: np.ndarray  # (8, H, W) float, >= 0


def neighbor_validity(h: int, w: int) -> np.ndarray:
    """(8, H, W) bool map: True where the p-neighbor lies inside the image."""
    valid = np.zeros((8, h, w), dtype=bool)
    for p, (dy, dx) in enumerate(OFFSETS):
        v = np.ones((h, w), dtype=bool)
        if dy == -1:
            v[0, :] = False
        elif dy == 1:
            v[h - 1 :, :] = False
        if dx == -1:
            v[:, 0] = False
        elif dx == 1:
            v[:, w - 1 :] = False
        valid[p] = v
    return valid


def _to_labelmap(instances) -> np.ndarray:
    if isinstance(instances, InstanceSet):
        return instances_to_labelmap(instances, overlap_policy="error")
    labels = np.asarray(instances)
    if labels.ndim != 2:
        raise ValueError(f"expected a 2D label map, got shape {labels.shape}")
    return labels


def encode_pa(instances) -> np.ndarray:
    """Encode instance masks as a binary 8-channel affinity map.

    Entry (p, i, j) is 1 iff pixel (i, j) and its p-neighbor carry the same
    positive label. Pairs with differing labels, object-background pairs,
    background-background pairs and off-image neighbors are stored as 0.
    """
    labels = _to_labelmap(instances)
    h, w = labels.shape
    aff = np.zeros((8, h, w), dtype=np.float32)
    fg = labels > 0
    for p, (dy, dx) in enumerate(OFFSETS):
        same = (labels == _shift(labels, dy, dx, fill=-1)) & fg
        aff[p] = same
    return aff


def _pair_kind_maps(labels: np.ndarray):
    """Per channel: valid (in-image, not bg-bg) and positive (same instance)."""
    h, w = labels.shape
    geom = neighbor_validity(h, w)
    fg = labels > 0
    valid = np.zeros((8, h, w), dtype=bool)
    positive = np.zeros((8, h, w), dtype=bool)
    for p, (dy, dx) in enumerate(OFFSETS):
        nb_fg = _shift(fg, dy, dx, fill=False)
        nb_labels = _shift(labels, dy, dx, fill=-1)
        any_fg = fg | nb_fg
        valid[p] = geom[p] & any_fg
        positive[p] = geom[p] & fg & (labels == nb_labels)
    return valid, positive


def build_supervision(instances, positive_weight: float | None = None) -> SupervisionTarget:
    """Build the training target, validity mask and loss weights.

    Positive (same-instance) entries get `positive_weight`; negative entries
    get 1.0; invalid entries get 0. When positive_weight is None it is taken
    from the negative/positive ratio of this image (1.0 if no positives).
    """
    labels = _to_labelmap(instances)
    valid, positive = _pair_kind_maps(labels)
    target = positive.astype(np.float32)
    if positive_weight is None:
        n_pos = int(np.count_nonzero(positive))
        n_neg = int(np.count_nonzero(valid & ~positive))
        positive_weight = n_neg / n_pos if n_pos > 0 else 1.0
    weight = np.where(positive, positive_weight, 1.0).astype(np.float64)
    weight[~valid] = 0.0
    return SupervisionTarget(target=target, valid=valid, weight=weight)


def pos_weight(dataset) -> float:
    """Negative/positive count ratio over valid entries of a dataset.

    Intended as the multiplier on positive loss terms; a 20:1
    positive/negative imbalance yields 0.05.
    """
    n_pos = 0
    n_neg = 0
    for instances in dataset:
        labels = _to_labelmap(instances)
        valid, positive = _pair_kind_maps(labels)
        n_pos += int(np.count_nonzero(positive))
        n_neg += int(np.count_nonzero(valid & ~positive))
    if n_pos == 0:
        raise ValueError("dataset contains no positive affinity entries")
    return n_neg / n_pos


def masked_weighted_bce(pred: np.ndarray, sup: SupervisionTarget, clamp_eps: float = 1e-7) -> float:
    """Weighted binary cross entropy over valid entries, weight-normalized.

    Entries outside sup.valid contribute exactly 0; the sum is divided by the
    total weight over valid entries so values are comparable across sizes.
    """
    pred = np.asarray(pred, dtype=np.float64)
    if pred.shape != sup.target.shape:
        raise ValueError(f"pred shape {pred.shape} != target shape {sup.target.shape}")
    valid = sup.valid
    if not valid.any():
        raise ValueError("supervision target has no valid entries")
    p = pred[valid]
    t = sup.target[valid].astype(np.float64)
    w = sup.weight[valid]
    loss = -t * np.log(np.maximum(p, clamp_eps)) - (1.0 - t) * np.log(
        np.maximum(1.0 - p, clamp_eps)
    )
    total_w = w.sum()
    return float((w * loss).sum() / total_w)


def _pool(aff: np.ndarray, mode: str, include: np.ndarray) -> np.ndarray:
    """Pool channels per pixel over `include` entries; all-excluded -> 1."""
    aff = np.asarray(aff, dtype=np.float64)
    any_inc = include.any(axis=0)
    if mode == "min":
        masked = np.where(include, aff, np.inf)
        pooled = masked.min(axis=0)
    elif mode == "max":
        masked = np.where(include, aff, -np.inf)
        pooled = masked.max(axis=0)
    elif mode == "mean":
        cnt = include.sum(axis=0)
        pooled = np.divide(
            np.where(include, aff, 0.0).sum(axis=0),
            np.maximum(cnt, 1),
        )
    else:
        raise ValueError(f"unknown aggregation mode {mode!r}")
    # A pixel with no poolable relation carries no boundary evidence.
    pooled = np.where(any_inc, pooled, 1.0)
    return pooled


def aggregate(aff: np.ndarray, mode: str, valid: np.ndarray | None = None) -> np.ndarray:
    """Pool an affinity map along channels into a boundary-strength map.

    Edge strength is 1 - pooled affinity, so a min-pooled affinity of 0
    yields the maximal edge response. Pooling runs over in-image channels
    only; when a validity mask is given, pooling is further restricted to
    valid entries and pixels with no valid entry get edge 0.
    """
    aff = np.asarray(aff)
    if aff.ndim != 3 or aff.shape[0] != 8:
        raise ValueError(f"expected (8, H, W) affinity map, got {aff.shape}")
    _, h, w = aff.shape
    include = neighbor_validity(h, w)
    if valid is not None:
        include = include & np.asarray(valid, dtype=bool)
    return 1.0 - _pool(aff, mode, include)


def aggregate_target_1ch(instances, mode: str):
    """Single-channel training target: pooled binary affinities plus validity.

    Max pooling is rejected: with max the target is all ones (every pixel
    has at least one same-group neighbor) and carries no signal.
    """
    if mode == "max":
        raise ValueError("max pooling is not applicable to the 1-channel target")
    labels = _to_labelmap(instances)
    h, w = labels.shape
    target = encode_pa(labels)
    valid, _ = _pair_kind_maps(labels)
    edge = 1.0 - _pool(target, mode, neighbor_validity(h, w))
    return edge, valid.any(axis=0)


def perturb(aff: np.ndarray, flip_prob: float, smooth_radius: int, seed: int) -> np.ndarray:
    """Noise model for tests: random flips, box smoothing, re-symmetrization.

    Deterministic given seed. Each in-image entry is replaced by 1 - value
    with probability flip_prob, then box-smoothed per channel, clamped to
    [0, 1], and finally averaged with its opposite-channel partner so the
    symmetry invariant holds. Off-image entries stay 0.
    """
    aff = np.asarray(aff, dtype=np.float64).copy()
    _, h, w = aff.shape
    geom = neighbor_validity(h, w)
    rng = np.random.Generator(np.random.Philox(seed))
    if flip_prob > 0:
        flips = rng.random(aff.shape) < flip_prob
        flips &= geom
        aff[flips] = 1.0 - aff[flips]
    if smooth_radius > 0:
        size = 2 * smooth_radius + 1
        for p in range(8):
            aff[p] = ndimage.uniform_filter(aff[p], size=size, mode="nearest")
    aff = np.clip(aff, 0.0, 1.0)
    out = np.zeros_like(aff)
    for p, (dy, dx) in enumerate(OFFSETS):
        partner = _shift(aff[7 - p], dy, dx, fill=0.0)
        out[p] = 0.5 * (aff[p] + partner)
    out[~geom] = 0.0
    return out

"""Deterministic synthetic scenes and slow brute-force reference oracles.

Scenes are generated with a counter-based RNG (numpy Philox keyed by the
scene seed) so fixtures reproduce exactly across platforms. The oracles
re-derive connected components, affinity objectness and positive/negative
entry counts by direct enumeration, independent of the fast paths.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .affinity import OFFSETS
from .masks import InstanceSet
from .objectness import ObjectnessBreakdown

__all__ = [
    "SceneSpec",
    "PlacementError",
    "generate_scene",
    "oracle_components",
    "oracle_o_pa",
    "oracle_pair_counts",
]

_MAX_ORACLE_DIM = 32


@dataclass
class SceneSpec:
    height: int = 64
    width: int = 64
    n_instances: tuple[int, int] = (2, 8)
    shape_kinds: tuple[str, ...] = ("rectangle", "ellipse", "blob")
    size_range: tuple[int, int] = (8, 20)
    min_separation: int = 2
    allow_contact: bool = False
    seed: int = 0
    max_attempts: int = 3000


class PlacementError(RuntimeError):
    def __init__(self, requested: int, achieved: int):
        super().__init__(
            f"placed only {achieved} of {requested} instances before attempt cap"
        )
        self.requested = requested
        self.achieved = achieved


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


def _rasterize(kind: str, size_y: int, size_x: int, rng: np.random.Generator) -> np.ndarray:
    if kind == "rectangle":
        return np.ones((size_y, size_x), dtype=bool)
    if kind == "ellipse":
        cy, cx = (size_y - 1) / 2.0, (size_x - 1) / 2.0
        yy, xx = np.mgrid[0:size_y, 0:size_x]
        ry, rx = size_y / 2.0, size_x / 2.0
        return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    if kind == "blob":
        # star-shaped region: a smooth random radius profile r(theta)
        # around the center, rasterized then morphologically closed
        cy, cx = (size_y - 1) / 2.0, (size_x - 1) / 2.0
        n_pts = int(rng.integers(6, 11))
        knots = rng.uniform(0.75, 1.0, n_pts)
        yy, xx = np.mgrid[0:size_y, 0:size_x]
        theta = np.arctan2((yy - cy) / (size_y / 2.0), (xx - cx) / (size_x / 2.0))
        pos = (theta + np.pi) / (2 * np.pi) * n_pts
        i0 = np.floor(pos).astype(int) % n_pts
        frac = pos - np.floor(pos)
        smooth = 3 * frac**2 - 2 * frac**3
        radius = knots[i0] * (1 - smooth) + knots[(i0 + 1) % n_pts] * smooth
        rho = np.hypot((yy - cy) / (size_y / 2.0), (xx - cx) / (size_x / 2.0))
        mask = rho <= radius
        mask = ndimage.binary_closing(mask, structure=np.ones((3, 3)))
        return mask
    raise ValueError(f"unknown shape kind {kind!r}")


def generate_scene(spec: SceneSpec) -> InstanceSet:
    """Rejection-sample non-overlapping instances onto a background grid.

    Deterministic given spec.seed. With min_separation >= 1, every pair of
    instances keeps an L-infinity gap of at least that many pixels. Raises
    PlacementError when the attempt cap is hit before the drawn instance
    count is placed.
    """
    rng = _rng(spec.seed)
    h, w = spec.height, spec.width
    lo, hi = spec.n_instances
    n = int(rng.integers(lo, hi + 1))
    sep = spec.min_separation if not spec.allow_contact else 0
    blocked = np.zeros((h, w), dtype=bool)
    masks = []
    attempts = 0
    while len(masks) < n:
        if attempts >= spec.max_attempts:
            raise PlacementError(n, len(masks))
        attempts += 1
        kind = spec.shape_kinds[int(rng.integers(0, len(spec.shape_kinds)))]
        sy = int(rng.integers(spec.size_range[0], spec.size_range[1] + 1))
        sx = int(rng.integers(spec.size_range[0], spec.size_range[1] + 1))
        if sy > h or sx > w:
            continue
        y0 = int(rng.integers(0, h - sy + 1))
        x0 = int(rng.integers(0, w - sx + 1))
        shape = _rasterize(kind, sy, sx, rng)
        if not shape.any():
            continue
        mask = np.zeros((h, w), dtype=bool)
        mask[y0 : y0 + sy, x0 : x0 + sx] = shape
        if (mask & blocked).any():
            continue
        masks.append(mask)
        grow = mask
        if sep > 0:
            grow = ndimage.binary_dilation(
                mask, structure=np.ones((2 * sep + 1, 2 * sep + 1))
            )
        blocked |= grow
    return InstanceSet(masks=masks, ids=list(range(1, len(masks) + 1)))


def _check_oracle_dims(h: int, w: int) -> None:
    if h > _MAX_ORACLE_DIM or w > _MAX_ORACLE_DIM:
        raise ValueError(f"grid {h}x{w} too large for brute-force oracle")


def _sym(aff: np.ndarray, y0: int, x0: int, y1: int, x1: int) -> float:
    p = OFFSETS.index((y1 - y0, x1 - x0))
    return 0.5 * (float(aff[p, y0, x0]) + float(aff[7 - p, y1, x1]))


def oracle_components(aff: np.ndarray, t: float) -> np.ndarray:
    """Reference flood-fill partition of pixels linked by pair affinity >= t."""
    _, h, w = aff.shape
    _check_oracle_dims(h, w)
    labels = np.zeros((h, w), dtype=np.int64)
    next_label = 0
    for sy in range(h):
        for sx in range(w):
            if labels[sy, sx]:
                continue
            next_label += 1
            stack = [(sy, sx)]
            labels[sy, sx] = next_label
            while stack:
                y, x = stack.pop()
                for dy, dx in OFFSETS:
                    ny, nx = y + dy, x + dx
                    if 0 <= ny < h and 0 <= nx < w and not labels[ny, nx]:
                        if _sym(aff, y, x, ny, nx) >= t:
                            labels[ny, nx] = next_label
                            stack.append((ny, nx))
    return labels


def oracle_o_pa(region: np.ndarray, aff: np.ndarray) -> ObjectnessBreakdown:
    """Reference affinity objectness by explicit pair enumeration."""
    region = np.asarray(region, dtype=bool)
    h, w = region.shape
    _check_oracle_dims(h, w)
    inner = 0.0
    outer = 0.0
    for y in range(h):
        for x in range(w):
            for dy, dx in ((0, 1), (1, -1), (1, 0), (1, 1)):
                ny, nx = y + dy, x + dx
                if not (0 <= ny < h and 0 <= nx < w):
                    continue
                a_in, b_in = region[y, x], region[ny, nx]
                if a_in and b_in:
                    inner += _sym(aff, y, x, ny, nx)
                elif a_in != b_in:
                    outer += _sym(aff, y, x, ny, nx)
    area = int(region.sum())
    boundary = 0
    for y in range(h):
        for x in range(w):
            if not region[y, x]:
                continue
            for dy, dx in OFFSETS:
                ny, nx = y + dy, x + dx
                if 0 <= ny < h and 0 <= nx < w and not region[ny, nx]:
                    boundary += 1
                    break
    return ObjectnessBreakdown(inner, outer, area, boundary)


def oracle_pair_counts(instances) -> tuple[int, int]:
    """(positives, negatives) over valid directed entries, by direct loops."""
    from .affinity import _to_labelmap

    labels = _to_labelmap(instances)
    h, w = labels.shape
    _check_oracle_dims(h, w)
    pos = neg = 0
    for y in range(h):
        for x in range(w):
            for dy, dx in OFFSETS:
                ny, nx = y + dy, x + dx
                if not (0 <= ny < h and 0 <= nx < w):
                    continue
                a, b = labels[y, x], labels[ny, nx]
                if a == 0 and b == 0:
                    continue
                if a > 0 and a == b:
                    pos += 1
                else:
                    neg += 1
    return pos, neg

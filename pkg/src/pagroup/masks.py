"""Binary masks, label maps, run-length encoding and mask geometry.

Masks are 2D boolean numpy arrays (row-major, shape (H, W)). Label maps are
2D integer arrays where 0 is background and positive values are instance ids.
RLE follows the COCO convention: column-major pixel order, alternating run
lengths starting with a (possibly zero-length) background run.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "RunLengthMask",
    "InstanceSet",
    "mask_area",
    "iou",
    "rle_encode",
    "rle_decode",
    "labelmap_to_instances",
    "instances_to_labelmap",
    "boundary_pixels",
    "bbox",
]


class DimensionMismatchError(ValueError):
    """Two mask-like inputs do not share the same grid dimensions."""


class OverlapError(ValueError):
    """Instance masks overlap where a disjoint set is required."""


def _as_bool_mask(mask) -> np.ndarray:
    m = np.asarray(mask)
    if m.ndim != 2:
        raise ValueError(f"expected a 2D mask, got shape {m.shape}")
    return m.astype(bool, copy=False)


@dataclass(frozen=True)
class RunLengthMask:
    """Column-major alternating run lengths; first run counts background."""

    height: int
    width: int
    counts: tuple[int, ...]

    def __post_init__(self):
        total = sum(self.counts)
        if total != self.height * self.width:
            raise ValueError(
                f"run lengths sum to {total}, expected {self.height * self.width}"
            )

    @property
    def area(self) -> int:
        return sum(self.counts[1::2])


@dataclass
class InstanceSet:
    """Ordered collection of same-sized binary masks with unique ids."""

    masks: list[np.ndarray] = field(default_factory=list)
    ids: list[int] = field(default_factory=list)
    dims: tuple[int, int] | None = None

    def __post_init__(self):
        if len(self.masks) != len(self.ids):
            raise ValueError("masks and ids must be parallel lists")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("instance ids must be unique")
        self.masks = [_as_bool_mask(m) for m in self.masks]
        for m in self.masks:
            if self.dims is None:
                self.dims = m.shape
            elif m.shape != tuple(self.dims):
                raise DimensionMismatchError(
                    f"mask shape {m.shape} != set dims {self.dims}"
                )
        if self.dims is not None:
            self.dims = tuple(self.dims)

    def __len__(self) -> int:
        return len(self.masks)

    def __iter__(self):
        return iter(zip(self.ids, self.masks))


def mask_area(mask) -> int:
    return int(np.count_nonzero(_as_bool_mask(mask)))


def iou(a, b) -> float:
    """Intersection over union; 0.0 when both masks are empty."""
    a = _as_bool_mask(a)
    b = _as_bool_mask(b)
    if a.shape != b.shape:
        raise DimensionMismatchError(f"{a.shape} vs {b.shape}")
    inter = np.count_nonzero(a & b)
    union = np.count_nonzero(a | b)
    if union == 0:
        return 0.0
    return inter / union


def rle_encode(mask) -> RunLengthMask:
    mask = _as_bool_mask(mask)
    h, w = mask.shape
    flat = mask.flatten(order="F")
    if flat.size == 0:
        return RunLengthMask(h, w, ())
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    starts = np.concatenate(([0], change, [flat.size]))
    counts = np.diff(starts).tolist()
    if flat[0]:
        counts = [0] + counts
    return RunLengthMask(h, w, tuple(int(c) for c in counts))


def rle_decode(rle: RunLengthMask) -> np.ndarray:
    n = rle.height * rle.width
    flat = np.zeros(n, dtype=bool)
    pos = 0
    value = False
    for count in rle.counts:
        if value:
            flat[pos : pos + count] = True
        pos += count
        value = not value
    return flat.reshape((rle.width, rle.height)).T


def labelmap_to_instances(labels) -> InstanceSet:
    """Split a label map into one mask per positive label, ids ascending."""
    labels = np.asarray(labels)
    ids = np.unique(labels)
    ids = ids[ids > 0]
    masks = [labels == k for k in ids]
    out = InstanceSet(masks=masks, ids=[int(k) for k in ids])
    if out.dims is None:
        out.dims = labels.shape
    return out


def instances_to_labelmap(instances: InstanceSet, overlap_policy: str = "error") -> np.ndarray:
    """Render an instance set to a label map.

    overlap_policy is "error" (raise on any overlapping pixel) or
    "last-wins" (later masks in the list overwrite earlier ones).
    """
    if overlap_policy not in ("error", "last-wins"):
        raise ValueError(f"unknown overlap policy {overlap_policy!r}")
    if instances.dims is None:
        raise ValueError("empty instance set with unknown dims")
    labels = np.zeros(instances.dims, dtype=np.int64)
    for inst_id, mask in instances:
        if overlap_policy == "error" and np.any(labels[mask] != 0):
            raise OverlapError(f"instance {inst_id} overlaps an earlier mask")
        labels[mask] = inst_id
    return labels


def boundary_pixels(mask) -> np.ndarray:
    """Mask of pixels in `mask` with an in-image 8-neighbor outside `mask`.

    The image border alone does not make a pixel a boundary pixel; only
    in-image exterior neighbors count.
    """
    mask = _as_bool_mask(mask)
    h, w = mask.shape
    exterior = np.zeros_like(mask)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == 0 and dx == 0:
                continue
            shifted = _shift(~mask, dy, dx, fill=False)
            exterior |= shifted
    return mask & exterior


def _shift(arr: np.ndarray, dy: int, dx: int, fill=False) -> np.ndarray:
    """Return arr translated by (dy, dx): out[i, j] = arr[i + dy, j + dx]."""
    h, w = arr.shape
    out = np.full_like(arr, fill)
    ys = slice(max(0, -dy), min(h, h - dy))
    xs = slice(max(0, -dx), min(w, w - dx))
    ys_src = slice(max(0, dy), min(h, h + dy))
    xs_src = slice(max(0, dx), min(w, w + dx))
    out[ys, xs] = arr[ys_src, xs_src]
    return out


def bbox(mask) -> tuple[int, int, int, int] | None:
    """Tight inclusive (row_min, col_min, row_max, col_max); None if empty."""
    mask = _as_bool_mask(mask)
    rows = np.any(mask, axis=1)
    cols = np.any(mask, axis=0)
    if not rows.any():
        return None
    r = np.flatnonzero(rows)
    c = np.flatnonzero(cols)
    return int(r[0]), int(c[0]), int(r[-1]), int(c[-1])

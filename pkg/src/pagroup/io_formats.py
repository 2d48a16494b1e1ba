"""Bit-exact file formats: AFM affinity container, dataset JSON, label-map
PNGs and overlay rendering.

The AFM container is a little-endian binary layout: magic "AFM1", uint32
H, W, C, one dtype byte (0 = float32), then C row-major planes. C is 1
(edge maps) or 8 (affinity maps). All writers are deterministic byte for
byte given identical inputs.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct
import tempfile

import numpy as np
from PIL import Image

from .masks import RunLengthMask, rle_decode, rle_encode, boundary_pixels

AFM_MAGIC = b"AFM1"

__all__ = [
    "FormatError",
    "afm_write",
    "afm_read",
    "dataset_write",
    "dataset_read",
    "labelmap_write",
    "labelmap_read",
    "render_overlay",
    "annotation_to_mask",
    "mask_to_annotation",
]


class FormatError(ValueError):
    """A file does not conform to one of the container formats."""


def _atomic_write(path: str, data: bytes) -> None:
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def afm_write(arr: np.ndarray, path: str) -> None:
    """Write an affinity map (8, H, W) or edge map (H, W) to an AFM file."""
    a = np.asarray(arr, dtype=np.float32)
    if a.ndim == 2:
        a = a[None]
    if a.ndim != 3 or a.shape[0] not in (1, 8):
        raise FormatError(f"AFM arrays must have 1 or 8 channels, got shape {arr.shape}")
    if not np.all(np.isfinite(a)) or a.min() < 0.0 or a.max() > 1.0:
        raise FormatError("AFM values must be finite and within [0, 1]")
    c, h, w = a.shape
    header = AFM_MAGIC + struct.pack("<IIIB", h, w, c, 0)
    body = a.astype("<f4").tobytes(order="C")
    _atomic_write(path, header + body)


def afm_read(path: str) -> np.ndarray:
    """Read an AFM file; returns (H, W) for C=1 and (8, H, W) for C=8."""
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 17:
        raise FormatError(f"{path}: truncated header")
    if data[:4] != AFM_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}")
    h, w, c, dtype_code = struct.unpack("<IIIB", data[4:17])
    if dtype_code != 0:
        raise FormatError(f"{path}: unsupported dtype code {dtype_code}")
    if c not in (1, 8):
        raise FormatError(f"{path}: channel count {c} not in {{1, 8}}")
    expected = 17 + 4 * c * h * w
    if len(data) != expected:
        raise FormatError(f"{path}: size {len(data)} != expected {expected}")
    arr = np.frombuffer(data[17:], dtype="<f4").reshape(c, h, w).copy()
    if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
        raise FormatError(f"{path}: values outside [0, 1]")
    return arr[0] if c == 1 else arr


def dataset_write(ds: dict, path: str) -> None:
    """Write a dataset JSON with stable ordering so outputs are diffable."""
    _validate_dataset(ds)
    out = {
        "images": [
            {k: img[k] for k in ("id", "file", "height", "width") if k in img}
            for img in sorted(ds.get("images", []), key=lambda x: x["id"])
        ],
        "annotations": [
            _ordered_annotation(a)
            for a in sorted(ds.get("annotations", []), key=lambda x: x["id"])
        ],
    }
    data = json.dumps(out, indent=1, sort_keys=False).encode()
    _atomic_write(path, data + b"\n")


def _ordered_annotation(a: dict) -> dict:
    out = {
        "id": a["id"],
        "image_id": a["image_id"],
        "rle": {"size": list(a["rle"]["size"]), "counts": list(a["rle"]["counts"])},
        "role": a["role"],
    }
    if a.get("score") is not None:
        out["score"] = a["score"]
    if a.get("provenance") is not None:
        out["provenance"] = a["provenance"]
    return out


def dataset_read(path: str) -> dict:
    with open(path) as f:
        ds = json.load(f)
    _validate_dataset(ds, source=path)
    return ds


def _validate_dataset(ds: dict, source: str = "<dataset>") -> None:
    if not isinstance(ds, dict) or "images" not in ds or "annotations" not in ds:
        raise FormatError(f"{source}: dataset must contain images and annotations")
    dims_by_id = {}
    for img in ds["images"]:
        for key in ("id", "file", "height", "width"):
            if key not in img:
                raise FormatError(f"{source}: image entry missing {key!r}")
        dims_by_id[img["id"]] = (img["height"], img["width"])
    for a in ds["annotations"]:
        for key in ("id", "image_id", "rle", "role"):
            if key not in a:
                raise FormatError(f"{source}: annotation missing {key!r}")
        if a["image_id"] not in dims_by_id:
            raise FormatError(
                f"{source}: annotation {a['id']} references unknown image {a['image_id']}"
            )
        size = tuple(a["rle"]["size"])
        if size != dims_by_id[a["image_id"]]:
            raise FormatError(
                f"{source}: annotation {a['id']} rle size {size} does not match image"
            )
        if a["role"] not in ("gt", "pseudo", "proposal"):
            raise FormatError(f"{source}: annotation {a['id']} has bad role {a['role']!r}")


def annotation_to_mask(a: dict) -> np.ndarray:
    h, w = a["rle"]["size"]
    return rle_decode(RunLengthMask(h, w, tuple(a["rle"]["counts"])))


def mask_to_annotation(mask, ann_id: int, image_id, role: str,
                       score: float | None = None, provenance: str | None = None) -> dict:
    rle = rle_encode(mask)
    out = {
        "id": ann_id,
        "image_id": image_id,
        "rle": {"size": [rle.height, rle.width], "counts": list(rle.counts)},
        "role": role,
    }
    if score is not None:
        out["score"] = float(score)
    if provenance is not None:
        out["provenance"] = provenance
    return out


def labelmap_write(labels: np.ndarray, path: str) -> None:
    """Write a label map as a 16-bit single-channel PNG."""
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() > 65535:
        raise FormatError("label ids must fit in uint16")
    img = Image.fromarray(labels.astype(np.uint16))
    bio = io.BytesIO()
    img.save(bio, format="PNG")
    _atomic_write(path, bio.getvalue())


def labelmap_read(path: str) -> np.ndarray:
    img = Image.open(path)
    arr = np.asarray(img)
    if arr.ndim != 2:
        raise FormatError(f"{path}: expected single-channel label map")
    return arr.astype(np.int64)


def _region_color(region_id) -> tuple[int, int, int]:
    digest = hashlib.sha256(str(region_id).encode()).digest()
    return digest[0], digest[1], digest[2]


def render_overlay(canvas, regions, path: str, alpha: float = 0.5) -> None:
    """Render regions over a canvas as translucent fills with outlines.

    canvas is an (H, W) or (H, W, 3) array, or None for a black canvas of
    the first region's dims. Colors are a deterministic hash of region ids,
    so output bytes are stable across runs.
    """
    items = list(_iter_regions(regions))
    if canvas is None:
        if not items:
            raise ValueError("cannot infer canvas dims from zero regions")
        dims = items[0][1].shape
        base = np.zeros((*dims, 3), dtype=np.uint8)
    else:
        base = np.asarray(canvas)
        if base.ndim == 2:
            base = np.stack([base] * 3, axis=-1)
        base = base.astype(np.uint8)
    for rid, mask in items:
        if mask.shape != base.shape[:2]:
            raise ValueError(f"region {rid} dims {mask.shape} != canvas {base.shape[:2]}")
        color = np.array(_region_color(rid), dtype=np.float64)
        sel = mask.astype(bool)
        base[sel] = ((1 - alpha) * base[sel] + alpha * color).astype(np.uint8)
        outline = boundary_pixels(mask)
        base[outline] = color.astype(np.uint8)
    img = Image.fromarray(base, mode="RGB")
    bio = io.BytesIO()
    img.save(bio, format="PNG")
    _atomic_write(path, bio.getvalue())


def _iter_regions(regions):
    from .grouping import RegionSet
    from .masks import InstanceSet

    if isinstance(regions, RegionSet):
        for i in range(len(regions)):
            yield i, regions.mask(i)
    elif isinstance(regions, InstanceSet):
        for rid, mask in regions:
            yield rid, mask
    else:
        for i, item in enumerate(regions):
            if isinstance(item, tuple) and len(item) == 2:
                rid, mask = item
            else:
                rid, mask = i, item
            yield rid, np.asarray(mask, dtype=bool)

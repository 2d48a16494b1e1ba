"""Grouping affinity/edge maps into candidate regions.

Four mechanisms: thresholded connected components, graph-based hierarchical
merging (Felzenszwalb-Huttenlocher criterion over a scale schedule),
watershed flooding with arc extraction (plus oriented re-scoring and
spectral globalization of the edge map), and ultrametric agglomeration of
watershed superpixels into a region hierarchy.

Directed affinities are reduced to undirected pair values by averaging the
two directed entries; this is used uniformly by every grouping mechanism.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph
from scipy.sparse.linalg import ArpackNoConvergence, eigsh

from .affinity import OFFSETS, neighbor_validity
from .masks import _shift

# Channels whose offsets enumerate each unordered 8-neighbor pair once:
# (0,1), (1,-1), (1,0), (1,1).
FORWARD_CHANNELS = (4, 5, 6, 7)

__all__ = [
    "FORWARD_CHANNELS",
    "Arc",
    "RegionHierarchy",
    "RegionSet",
    "symmetric_pair_affinity",
    "symmetric_channels",
    "cc_group",
    "gbh_group",
    "watershed",
    "owt_rescore",
    "spectral_globalize",
    "contour_laplacian",
    "combine_edges",
    "ucm_build",
    "extract_regions",
]


class SpectralConvergenceError(RuntimeError):
    """Eigensolver failed to converge within the iteration cap."""


@dataclass
class Arc:
    """All adjacent pixel pairs straddling two neighboring regions.

    q and r are flat pixel indices with r = q + offset(FORWARD_CHANNELS[d])
    for the per-pair direction index d (0..3). region_a < region_b.
    """

    region_a: int
    region_b: int
    q: np.ndarray
    r: np.ndarray
    dirs: np.ndarray
    strength: float

    @property
    def n_pairs(self) -> int:
        return len(self.q)


@dataclass
class RegionHierarchy:
    """Merge tree over a superpixel partition.

    Leaf node ids equal superpixel labels (1..n); each merge creates a fresh
    node id. Merge levels are non-decreasing along the sequence and the
    final node covers all pixels.
    """

    leaf_labels: np.ndarray  # (H, W) int, every pixel labeled 1..n
    merges: list[tuple[int, int, float, int]] = field(default_factory=list)
    disconnected: bool = False

    @property
    def n_leaves(self) -> int:
        return int(self.leaf_labels.max()) if self.leaf_labels.size else 0

    @property
    def dims(self) -> tuple[int, int]:
        return self.leaf_labels.shape

    def node_pixels(self):
        """Yield (node_id, flat pixel indices) for every leaf and internal node.

        Uses a DFS leaf ordering so each node's pixels form one contiguous
        slice of a shared index array; the yielded arrays are views.
        """
        n = self.n_leaves
        flat = self.leaf_labels.ravel()
        order = np.argsort(flat, kind="stable")
        starts = np.searchsorted(flat[order], np.arange(1, n + 2))
        leaf_px = {k: order[starts[k - 1] : starts[k]] for k in range(1, n + 1)}

        children = {m[3]: (m[0], m[1]) for m in self.merges}
        used_as_child = {m[0] for m in self.merges} | {m[1] for m in self.merges}
        roots = [nid for nid in list(range(1, n + 1)) + [m[3] for m in self.merges]
                 if nid not in used_as_child]

        euler_chunks: list[np.ndarray] = []
        intervals: dict[int, tuple[int, int]] = {}
        pos = 0
        for root in roots:
            stack = [(root, False)]
            while stack:
                nid, expanded = stack.pop()
                if nid not in children:
                    size = len(leaf_px[nid])
                    intervals[nid] = (pos, pos + size)
                    euler_chunks.append(leaf_px[nid])
                    pos += size
                elif not expanded:
                    stack.append((nid, True))
                    a, b = children[nid]
                    stack.append((b, False))
                    stack.append((a, False))
                else:
                    a, b = children[nid]
                    intervals[nid] = (intervals[a][0], intervals[b][1])
        euler = np.concatenate(euler_chunks) if euler_chunks else np.empty(0, dtype=np.int64)
        for nid, (s, e) in intervals.items():
            yield nid, euler[s:e]


@dataclass
class RegionSet:
    """Candidate region masks stored as sorted flat pixel-index arrays."""

    dims: tuple[int, int]
    pixels: list[np.ndarray] = field(default_factory=list)
    provenance: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.pixels)

    def areas(self) -> np.ndarray:
        return np.array([len(p) for p in self.pixels], dtype=np.int64)

    def mask(self, i: int) -> np.ndarray:
        m = np.zeros(self.dims[0] * self.dims[1], dtype=bool)
        m[self.pixels[i]] = True
        return m.reshape(self.dims)

    def masks(self):
        for i in range(len(self.pixels)):
            yield self.mask(i)

    def to_csr(self) -> sparse.csr_matrix:
        """Region-by-pixel indicator matrix (len(self) x H*W)."""
        n = self.dims[0] * self.dims[1]
        indptr = np.zeros(len(self.pixels) + 1, dtype=np.int64)
        if self.pixels:
            indptr[1:] = np.cumsum([len(p) for p in self.pixels])
            indices = np.concatenate(self.pixels)
        else:
            indices = np.empty(0, dtype=np.int64)
        data = np.ones(len(indices), dtype=np.float32)
        return sparse.csr_matrix((data, indices, indptr), shape=(len(self.pixels), n))


def symmetric_pair_affinity(aff: np.ndarray, q: tuple[int, int], r: tuple[int, int]) -> float:
    """Mean of the two directed affinities between 8-adjacent pixels q and r."""
    dy, dx = r[0] - q[0], r[1] - q[1]
    try:
        p = OFFSETS.index((dy, dx))
    except ValueError:
        raise ValueError(f"pixels {q} and {r} are not 8-adjacent") from None
    _, h, w = np.asarray(aff).shape
    for i, j in (q, r):
        if not (0 <= i < h and 0 <= j < w):
            raise ValueError(f"pixel ({i}, {j}) outside {h}x{w} image")
    return float(0.5 * (aff[p, q[0], q[1]] + aff[7 - p, r[0], r[1]]))


def symmetric_channels(aff: np.ndarray):
    """Undirected pair affinities for the four forward directions.

    Returns (sym, inimg): sym[d, i, j] is the averaged affinity of the pair
    ((i, j), (i, j) + offset_d); inimg marks pairs whose second pixel is
    inside the image.
    """
    aff = np.asarray(aff, dtype=np.float64)
    _, h, w = aff.shape
    geom = neighbor_validity(h, w)
    sym = np.zeros((4, h, w))
    inimg = np.zeros((4, h, w), dtype=bool)
    for d, p in enumerate(FORWARD_CHANNELS):
        dy, dx = OFFSETS[p]
        partner = _shift(aff[7 - p], dy, dx, fill=0.0)
        sym[d] = 0.5 * (aff[p] + partner)
        inimg[d] = geom[p]
    return sym, inimg


def _pair_edges(sym: np.ndarray, inimg: np.ndarray):
    """Flat index pairs (q, r, dir) for every in-image 8-neighbor pair."""
    _, h, w = sym.shape
    idx = np.arange(h * w).reshape(h, w)
    qs, rs, ds, vals = [], [], [], []
    for d, p in enumerate(FORWARD_CHANNELS):
        dy, dx = OFFSETS[p]
        m = inimg[d]
        q = idx[m]
        r = (idx + dy * w + dx)[m]
        qs.append(q)
        rs.append(r)
        ds.append(np.full(len(q), d, dtype=np.int8))
        vals.append(sym[d][m])
    return (np.concatenate(qs), np.concatenate(rs),
            np.concatenate(ds), np.concatenate(vals))


def _partition_pixel_lists(labels_flat: np.ndarray):
    """Sorted flat-index array per distinct label of a full partition."""
    order = np.argsort(labels_flat, kind="stable")
    uniq, starts = np.unique(labels_flat[order], return_index=True)
    bounds = list(starts) + [len(labels_flat)]
    return {int(uniq[i]): order[bounds[i] : bounds[i + 1]] for i in range(len(uniq))}


def cc_group(aff: np.ndarray, thresholds) -> RegionSet:
    """Connected components of pixels linked by pair affinity >= t.

    Runs union-find style labeling (via a sparse connectivity solve) for
    each threshold; every component, including singletons, becomes a
    region. Results across thresholds are pooled and exact duplicates
    removed.
    """
    thresholds = list(thresholds)
    if not thresholds:
        raise ValueError("thresholds must be nonempty")
    for t in thresholds:
        if not (0.0 < t < 1.0):
            raise ValueError(f"threshold {t} outside (0, 1)")
    sym, inimg = symmetric_channels(aff)
    _, h, w = sym.shape
    n = h * w
    q, r, _, vals = _pair_edges(sym, inimg)
    out = RegionSet(dims=(h, w))
    seen: set[bytes] = set()
    for t in thresholds:
        keep = vals >= t
        g = sparse.coo_matrix((np.ones(keep.sum()), (q[keep], r[keep])), shape=(n, n))
        _, labels = csgraph.connected_components(g, directed=False)
        for _, px in sorted(_partition_pixel_lists(labels).items()):
            key = px.tobytes()
            if key in seen:
                continue
            seen.add(key)
            out.pixels.append(px)
            out.provenance.append(f"cc:t={t}")
    return out


class _UnionFind:
    __slots__ = ("parent", "size")

    def __init__(self, n: int):
        self.parent = list(range(n))
        self.size = [1] * n

    def find(self, x: int) -> int:
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a: int, b: int) -> int:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return ra
        if self.size[ra] < self.size[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        self.size[ra] += self.size[rb]
        return ra


def gbh_group(aff: np.ndarray, k_schedule, min_size: int = 1) -> RegionHierarchy:
    """Hierarchical graph-based merging over a schedule of scale values.

    Edge weight is 1 - pair affinity. At each scale k, components merge when
    the joining edge weight does not exceed either side's internal
    difference plus k/|component| (processed in ascending weight order, so
    the internal difference of a component is the largest weight merged into
    it). Components smaller than min_size are absorbed across their cheapest
    edge after each scale. Any components still separate at the end join at
    a sentinel level above the last scale.
    """
    k_schedule = list(k_schedule)
    if not k_schedule:
        raise ValueError("k_schedule must be nonempty")
    if any(b <= a for a, b in zip(k_schedule, k_schedule[1:])):
        raise ValueError("k_schedule must be strictly increasing")

    sym, inimg = symmetric_channels(aff)
    _, h, w = sym.shape
    n = h * w
    q, r, _, vals = _pair_edges(sym, inimg)
    weights = 1.0 - vals
    order = np.argsort(weights, kind="stable")
    q, r, weights = q[order], r[order], weights[order]

    uf = _UnionFind(n)
    internal = [0.0] * n
    node_of = list(range(1, n + 1))  # union-find root -> hierarchy node id
    next_node = n + 1
    merges: list[tuple[int, int, float, int]] = []

    def record(ra: int, rb: int, level: float) -> None:
        nonlocal next_node
        na, nb = node_of[ra], node_of[rb]
        root = uf.union(ra, rb)
        merges.append((na, nb, level, next_node))
        node_of[root] = next_node
        next_node += 1

    last_level = 0.0
    for k in k_schedule:
        for i in range(len(weights)):
            ra, rb = uf.find(int(q[i])), uf.find(int(r[i]))
            if ra == rb:
                continue
            wgt = float(weights[i])
            if wgt <= min(internal[ra] + k / uf.size[ra],
                          internal[rb] + k / uf.size[rb]):
                new_int = max(internal[ra], internal[rb], wgt)
                record(ra, rb, float(k))
                internal[uf.find(ra)] = new_int
        if min_size > 1:
            for i in range(len(weights)):
                ra, rb = uf.find(int(q[i])), uf.find(int(r[i]))
                if ra == rb:
                    continue
                if uf.size[ra] < min_size or uf.size[rb] < min_size:
                    new_int = max(internal[ra], internal[rb], float(weights[i]))
                    record(ra, rb, float(k))
                    internal[uf.find(ra)] = new_int
        last_level = float(k)

    roots = sorted({uf.find(i) for i in range(n)})
    sentinel = last_level + 1.0
    while len(roots) > 1:
        record(roots[0], roots[1], sentinel)
        roots = sorted({uf.find(rt) for rt in roots})

    labels = np.arange(1, n + 1, dtype=np.int64).reshape(h, w)
    return RegionHierarchy(leaf_labels=labels, merges=merges)


def _regional_minima(flat: np.ndarray, h: int, w: int):
    """Plateau labels plus the set of plateau ids that are regional minima."""
    n = h * w
    grid = flat.reshape(h, w)
    eq_h = grid[:, :-1] == grid[:, 1:]
    eq_v = grid[:-1, :] == grid[1:, :]
    idx = np.arange(n).reshape(h, w)
    g = sparse.coo_matrix(
        (
            np.ones(int(eq_h.sum() + eq_v.sum())),
            (
                np.concatenate([idx[:, :-1][eq_h], idx[:-1, :][eq_v]]),
                np.concatenate([idx[:, 1:][eq_h], idx[1:, :][eq_v]]),
            ),
        ),
        shape=(n, n),
    )
    _, plat = csgraph.connected_components(g, directed=False)

    has_lower = np.zeros((h, w), dtype=bool)
    for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        nb = _shift(grid, dy, dx, fill=np.inf)
        has_lower |= nb < grid
    n_plat = plat.max() + 1
    plat_has_lower = np.zeros(n_plat, dtype=bool)
    np.logical_or.at(plat_has_lower, plat, has_lower.ravel())
    minima = set(np.flatnonzero(~plat_has_lower).tolist())
    return plat, minima


def watershed(edge: np.ndarray):
    """Regional-minima-seeded flooding of a boundary-strength map.

    Flooding is 4-connected; plateau ties resolve to the first-reached seed
    with deterministic raster-scan ordering. Returns the superpixel label
    map (1..n, every pixel assigned) and the list of arcs between adjacent
    superpixels; arcs collect all 8-adjacent inter-region pixel pairs and
    carry the mean edge strength over their pairs.
    """
    e = np.asarray(edge, dtype=np.float64)
    h, w = e.shape
    n = h * w
    flat = e.ravel()
    plat, minima = _regional_minima(flat, h, w)

    labels = np.zeros(n, dtype=np.int64)
    seed_of_plat: dict[int, int] = {}
    heap: list[tuple[float, int, int, int]] = []
    counter = 0
    for i in range(n):
        pid = plat[i]
        if pid in minima:
            if pid not in seed_of_plat:
                seed_of_plat[pid] = len(seed_of_plat) + 1
            heap.append((flat[i], counter, i, seed_of_plat[pid]))
            counter += 1
    heapq.heapify(heap)

    while heap:
        value, _, i, lab = heapq.heappop(heap)
        if labels[i]:
            continue
        labels[i] = lab
        y, x = divmod(i, w)
        for dy, dx in ((-1, 0), (0, -1), (0, 1), (1, 0)):
            ny, nx = y + dy, x + dx
            if 0 <= ny < h and 0 <= nx < w:
                j = ny * w + nx
                if not labels[j]:
                    heapq.heappush(heap, (max(value, flat[j]), counter, j, lab))
                    counter += 1

    label_grid = labels.reshape(h, w)
    arcs = _collect_arcs(label_grid, e)
    return label_grid, arcs


def _collect_arcs(label_grid: np.ndarray, e: np.ndarray) -> list[Arc]:
    h, w = label_grid.shape
    idx = np.arange(h * w).reshape(h, w)
    flat_lab = label_grid.ravel()
    flat_e = e.ravel()
    qs, rs, ds = [], [], []
    for d, p in enumerate(FORWARD_CHANNELS):
        dy, dx = OFFSETS[p]
        nb = _shift(label_grid, dy, dx, fill=0)
        m = (nb != 0) & (nb != label_grid)
        q = idx[m]
        r = (idx + dy * w + dx)[m]
        qs.append(q)
        rs.append(r)
        ds.append(np.full(len(q), d, dtype=np.int8))
    if not qs or sum(len(x) for x in qs) == 0:
        return []
    q = np.concatenate(qs)
    r = np.concatenate(rs)
    d = np.concatenate(ds)
    la = np.minimum(flat_lab[q], flat_lab[r])
    lb = np.maximum(flat_lab[q], flat_lab[r])
    key = la * (label_grid.max() + 1) + lb
    order = np.argsort(key, kind="stable")
    q, r, d, la, lb, key = q[order], r[order], d[order], la[order], lb[order], key[order]
    bounds = np.flatnonzero(np.diff(key)) + 1
    arcs = []
    for s, t in zip(np.concatenate(([0], bounds)), np.concatenate((bounds, [len(key)]))):
        strength = float(0.5 * (flat_e[q[s:t]] + flat_e[r[s:t]]).mean())
        arcs.append(Arc(int(la[s]), int(lb[s]), q[s:t], r[s:t], d[s:t], strength))
    return arcs


# Unit direction of each forward channel, for orientation matching.
_DIR_UNITS = np.array(
    [[0.0, 1.0], [np.sqrt(0.5), -np.sqrt(0.5)], [1.0, 0.0], [np.sqrt(0.5), np.sqrt(0.5)]]
)


def owt_rescore(arcs: list[Arc], aff: np.ndarray) -> list[Arc]:
    """Replace arc strengths with orientation-matched boundary responses.

    The arc's pixel-pair midpoints are fit by their principal direction; the
    neighbor-channel pair most nearly perpendicular to it is selected and
    the strength becomes the mean of (1 - pair affinity) in that channel
    over the arc's pixels. Arcs shorter than 3 pairs keep their strength.
    """
    sym, inimg = symmetric_channels(aff)
    _, h, w = sym.shape
    sym_flat = sym.reshape(4, -1)
    inimg_flat = inimg.reshape(4, -1)
    out = []
    for arc in arcs:
        if arc.n_pairs < 3:
            out.append(arc)
            continue
        my = 0.5 * (arc.q // w + arc.r // w)
        mx = 0.5 * (arc.q % w + arc.r % w)
        pts = np.stack([my - my.mean(), mx - mx.mean()])
        cov = pts @ pts.T
        eigvals, eigvecs = np.linalg.eigh(cov)
        principal = eigvecs[:, np.argmax(eigvals)]
        d_sel = int(np.argmin(np.abs(_DIR_UNITS @ principal)))
        pixels = np.concatenate([arc.q, arc.r])
        ok = inimg_flat[d_sel][pixels]
        if not ok.any():
            out.append(arc)
            continue
        strength = float((1.0 - sym_flat[d_sel][pixels[ok]]).mean())
        out.append(Arc(arc.region_a, arc.region_b, arc.q, arc.r, arc.dirs, strength))
    return out


def _block_mean(e: np.ndarray, f: int) -> np.ndarray:
    h, w = e.shape
    ph = (-h) % f
    pw = (-w) % f
    if ph or pw:
        e = np.pad(e, ((0, ph), (0, pw)), mode="edge")
    hh, ww = e.shape
    return e.reshape(hh // f, f, ww // f, f).mean(axis=(1, 3))


def contour_laplacian(edge: np.ndarray, sigma: float):
    """Graph Laplacian and degree matrix of the intervening-contour graph.

    8-neighbor weights are exp(-max edge on the 1-pixel segment / sigma).
    Returns (laplacian, degree) as sparse matrices over row-major pixels.
    """
    small = np.asarray(edge, dtype=np.float64)
    sh, sw = small.shape
    n = sh * sw
    idx = np.arange(n).reshape(sh, sw)
    rows, cols, vals = [], [], []
    for p in FORWARD_CHANNELS:
        dy, dx = OFFSETS[p]
        ys = slice(max(0, -dy), sh - max(0, dy))
        xs = slice(max(0, -dx), sw - max(0, dx))
        yt = slice(max(0, dy), sh + min(0, dy))
        xt = slice(max(0, dx), sw + min(0, dx))
        seg_max = np.maximum(small[ys, xs], small[yt, xt])
        rows.append(idx[ys, xs].ravel())
        cols.append(idx[yt, xt].ravel())
        vals.append(np.exp(-seg_max.ravel() / sigma))
    wmat = sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, n),
    )
    wmat = (wmat + wmat.T).tocsr()
    deg = np.asarray(wmat.sum(axis=1)).ravel()
    dmat = sparse.diags(deg)
    return dmat - wmat, dmat


def spectral_globalize(
    edge: np.ndarray,
    n_eigvecs: int = 4,
    downsample: int = 1,
    sigma: float = 0.1,
    maxiter: int = 5000,
) -> np.ndarray:
    """Globalize a boundary map via eigenvectors of a pixel-affinity graph.

    Builds intervening-contour weights exp(-max edge on the 1-pixel
    segment / sigma) between 8-neighbors on the (optionally downsampled)
    grid, extracts the smallest nontrivial generalized eigenvectors of the
    graph Laplacian by Lanczos iteration, and sums their spatial gradient
    magnitudes (each scaled by 1/sqrt(eigenvalue)). The result is upsampled
    to full resolution and rescaled to [0, 1]. A constant input carries no
    contour signal and maps to all zeros.
    """
    if n_eigvecs < 1:
        raise ValueError("n_eigvecs must be >= 1")
    e = np.asarray(edge, dtype=np.float64)
    h, w = e.shape
    if float(e.max() - e.min()) < 1e-12:
        return np.zeros_like(e)
    small = _block_mean(e, downsample) if downsample > 1 else e
    sh, sw = small.shape
    if sh < 2 or sw < 2:
        raise ValueError("downsampled grid smaller than 2x2")

    lap, dmat = contour_laplacian(small, sigma)
    n = sh * sw
    k = min(n_eigvecs + 1, n - 1)
    try:
        eigvals, eigvecs = eigsh(
            lap.tocsc(), k=k, M=dmat.tocsc(), sigma=-1e-3, which="LM", maxiter=maxiter
        )
    except ArpackNoConvergence as exc:
        raise SpectralConvergenceError(
            f"eigensolver did not converge within {maxiter} iterations"
        ) from exc
    order = np.argsort(eigvals)
    eigvals, eigvecs = eigvals[order], eigvecs[:, order]

    total = np.zeros((sh, sw))
    for i in range(1, k):  # skip the trivial constant eigenvector
        lam = max(float(eigvals[i]), 1e-12)
        vec = eigvecs[:, i].reshape(sh, sw)
        gy, gx = np.gradient(vec)
        total += np.hypot(gy, gx) / np.sqrt(lam)

    if downsample > 1:
        total = np.repeat(np.repeat(total, downsample, axis=0), downsample, axis=1)
        total = total[:h, :w]
    peak = total.max()
    if peak > 0:
        total = total / peak
    return total


def combine_edges(local: np.ndarray, globalized: np.ndarray, mix_weight: float = 0.5) -> np.ndarray:
    """Blend a local and a globalized edge map; the default is their mean."""
    local = np.asarray(local, dtype=np.float64)
    globalized = np.asarray(globalized, dtype=np.float64)
    if local.shape != globalized.shape:
        raise ValueError(f"shape mismatch {local.shape} vs {globalized.shape}")
    return (1.0 - mix_weight) * local + mix_weight * globalized


def ucm_build(leaf_labels: np.ndarray, arcs: list[Arc]) -> RegionHierarchy:
    """Greedy agglomeration of superpixels into an ultrametric hierarchy.

    Repeatedly merges the adjacent pair with minimal dissimilarity, where
    dissimilarity is the length-weighted mean strength over all pixel pairs
    between the two current regions (re-pooled exactly after every merge).
    Merge levels are made non-decreasing with a running max. Disconnected
    components are joined at sentinel level 1.0 and flagged.
    """
    leaf_labels = np.asarray(leaf_labels)
    n = int(leaf_labels.max()) if leaf_labels.size else 0
    hierarchy = RegionHierarchy(leaf_labels=leaf_labels.astype(np.int64))
    if n <= 1:
        return hierarchy

    adj: dict[int, dict[int, list[float]]] = {i: {} for i in range(1, n + 1)}
    for arc in arcs:
        a, b = arc.region_a, arc.region_b
        stat = [arc.strength * arc.n_pairs, float(arc.n_pairs)]
        adj[a][b] = stat
        adj[b][a] = [stat[0], stat[1]]

    heap: list[tuple[float, int, int]] = []
    for a in adj:
        for b, (s, c) in adj[a].items():
            if a < b:
                heapq.heappush(heap, (s / c, a, b))

    active = set(range(1, n + 1))
    next_node = n + 1
    level = 0.0

    def merge(a: int, b: int, diss: float):
        nonlocal next_node, level
        level = max(level, diss)
        hierarchy.merges.append((a, b, level, next_node))
        merged: dict[int, list[float]] = {}
        for src in (a, b):
            for nb, (s, c) in adj.pop(src).items():
                if nb in (a, b):
                    continue
                if nb in merged:
                    merged[nb][0] += s
                    merged[nb][1] += c
                else:
                    merged[nb] = [s, c]
        adj[next_node] = merged
        for nb, (s, c) in merged.items():
            adj[nb].pop(a, None)
            adj[nb].pop(b, None)
            adj[nb][next_node] = [s, c]
            lo, hi = min(nb, next_node), max(nb, next_node)
            heapq.heappush(heap, (s / c, lo, hi))
        active.discard(a)
        active.discard(b)
        active.add(next_node)
        next_node += 1

    while len(active) > 1 and heap:
        diss, a, b = heapq.heappop(heap)
        if a not in active or b not in active:
            continue
        cur = adj[a].get(b)
        if cur is None or abs(cur[0] / cur[1] - diss) > 1e-12:
            continue
        merge(a, b, diss)

    if len(active) > 1:
        hierarchy.disconnected = True
        rest = sorted(active)
        while len(rest) > 1:
            merge(rest[0], rest[1], max(level, 1.0))
            rest = sorted(active)
    return hierarchy


def extract_regions(
    hierarchy: RegionHierarchy,
    min_area: int = 0,
    max_regions: int | None = None,
) -> RegionSet:
    """Every leaf and internal node as a region, filtered and capped.

    Nodes below min_area are dropped; if more than max_regions remain, the
    largest are kept. Nodes of a merge tree are pairwise-distinct pixel
    sets by construction, so no byte-level dedup is needed here.
    """
    items = [(nid, px) for nid, px in hierarchy.node_pixels() if len(px) >= max(min_area, 1)]
    if max_regions is not None and len(items) > max_regions:
        items.sort(key=lambda t: (-len(t[1]), t[0]))
        items = items[:max_regions]
    n_leaves = hierarchy.n_leaves
    out = RegionSet(dims=hierarchy.dims)
    for nid, px in items:
        out.pixels.append(np.sort(px))
        out.provenance.append(f"leaf:{nid}" if nid <= n_leaves else f"node:{nid}")
    return out

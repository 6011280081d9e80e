"""Semantic k-NN grouping restricted to other frames.

Every feature row of a video tensor is treated as a point in
C-dimensional feature space. For each point we select the k most
similar points from *other* frames, under similarity = negative squared
L2 distance, with deterministic tie-breaking (descending similarity,
then ascending row index).

Two backends share one contract: ``brute`` composes the dense
similarity-matrix pipeline (with an exact shortcut that groups
bitwise-identical feature rows), and ``tree`` traverses per-frame
spatial-partition indexes (:mod:`cpnet.kdtree`).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .tensor import DTYPE, Tensor

# Mask sentinel: the most-negative finite float32, so masked entries lose
# every comparison but arithmetic on the matrix stays NaN-free.
NEG_SENTINEL = np.float32(np.finfo(np.float32).min)

# Above this many distinct feature rows the class-distance matrix switches
# from the exact elementwise-difference formula to a symmetrized Gram
# formula (identical ordering wherever gaps exceed float32 rounding).
_EXACT_DIFF_MAX_CLASSES = 256


@dataclass
class FeaturePointCloud:
    """A [THW, C] feature matrix with its (t, h, w) grid geometry.

    Row ``i`` corresponds to ``t = i // (H*W)``, ``h = (i % (H*W)) // W``,
    ``w = i % W``; normalized coordinates divide each axis by its extent.
    """

    features: Tensor
    dims: tuple[int, int, int]

    def __post_init__(self):
        if self.features.data.ndim != 2:
            raise ValueError(f"features must be [THW, C], got shape {tuple(self.features.shape)}")
        t, h, w = self.dims
        if t < 1 or h < 1 or w < 1:
            raise ValueError(f"dims must be positive, got {self.dims}")
        if t * h * w != self.features.shape[0]:
            raise ValueError(
                f"dims {self.dims} imply {t * h * w} rows but features have {self.features.shape[0]}"
            )
        if not np.isfinite(self.features.data).all():
            raise ValueError("features must be finite")

    @property
    def num_points(self) -> int:
        return self.features.shape[0]

    @property
    def num_channels(self) -> int:
        return self.features.shape[1]

    def frame_of(self, row: int) -> int:
        _, h, w = self.dims
        return int(row) // (h * w)

    def frames(self) -> np.ndarray:
        """Frame index of every row."""
        t, h, w = self.dims
        return np.arange(t * h * w, dtype=np.int64) // (h * w)

    def coords(self) -> np.ndarray:
        """Normalized (t/T, h/H, w/W) coordinates per row, float32 in [0,1)."""
        return grid_coords(self.dims)


def grid_coords(dims: tuple[int, int, int]) -> np.ndarray:
    """Row-ordered normalized coordinates of a (T, H, W) grid."""
    t, h, w = dims
    idx = np.arange(t * h * w, dtype=np.int64)
    hw = h * w
    out = np.empty((t * h * w, 3), dtype=DTYPE)
    out[:, 0] = (idx // hw) / t
    out[:, 1] = ((idx % hw) // w) / h
    out[:, 2] = (idx % w) / w
    return out


@dataclass
class SimilarityMatrix:
    """Pairwise similarity scores; ``masked`` marks same-frame exclusion."""

    values: Tensor
    masked: bool = False
    dims: Optional[tuple[int, int, int]] = None


@dataclass
class TopKIndex:
    """Per-row proposed-correspondence indices, highest similarity first."""

    indices: np.ndarray
    k: int

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int32)
        if self.indices.ndim != 2 or self.indices.shape[1] != self.k:
            raise ValueError(f"indices must be [rows, k={self.k}], got {self.indices.shape}")


def _class_sq_distances(uniq: np.ndarray) -> np.ndarray:
    """Squared L2 distances between distinct feature rows.

    Exactly symmetric with an exactly-zero diagonal on both paths; the
    small-count path is also exact per entry, which keeps coincident
    points at similarity zero.
    """
    u = uniq.shape[0]
    if u <= _EXACT_DIFF_MAX_CLASSES:
        diff = uniq[:, None, :] - uniq[None, :, :]
        return np.square(diff, out=diff).sum(axis=-1, dtype=DTYPE)
    sq = np.square(uniq).sum(axis=1, dtype=DTYPE)
    d = sq[:, None] + sq[None, :]
    d -= 2.0 * (uniq @ uniq.T)
    np.maximum(d, 0.0, out=d)
    upper = np.triu(d, 1)
    return upper + upper.T


def _group_rows(features: np.ndarray):
    """Group bitwise-identical feature rows.

    Returns (unique rows, class id per row, class squared-distance matrix).
    """
    uniq, inverse = np.unique(features, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1).astype(np.int64)
    return uniq, inverse, _class_sq_distances(uniq.astype(DTYPE, copy=False))


def pairwise_similarity(cloud: FeaturePointCloud) -> SimilarityMatrix:
    """Similarity matrix values[i][j] = -||f_i - f_j||^2 (unmasked)."""
    if cloud.num_points < 2:
        raise ValueError("need at least two points for pairwise similarity")
    if cloud.num_channels < 1:
        raise ValueError("need at least one feature channel")
    _, inverse, class_d = _group_rows(cloud.features.data)
    values = -class_d[inverse][:, inverse]
    return SimilarityMatrix(values=Tensor(values), masked=False, dims=None)


def mask_same_frame(sim: SimilarityMatrix, dims: tuple[int, int, int]) -> SimilarityMatrix:
    """Exclude intra-frame pairs by writing the sentinel into the T diagonal blocks."""
    if sim.masked:
        raise ValueError("similarity matrix is already masked")
    t, h, w = dims
    n = sim.values.shape[0]
    if t * h * w != n:
        raise ValueError(f"dims {dims} imply {t * h * w} rows, matrix has {n}")
    hw = h * w
    values = sim.values.data.copy()
    for ti in range(t):
        lo = ti * hw
        values[lo : lo + hw, lo : lo + hw] = NEG_SENTINEL
    return SimilarityMatrix(values=Tensor(values), masked=True, dims=(t, h, w))


def _topk_rows(values: np.ndarray, k: int) -> np.ndarray:
    """Exact row-wise top-k under the (descending value, ascending index) rule."""
    n_rows, n = values.shape
    if k > n:
        raise ValueError(f"k={k} exceeds row length {n}")
    if k == n:
        sel = np.broadcast_to(np.arange(n, dtype=np.int64), (n_rows, n)).copy()
    else:
        sel = np.argpartition(values, n - k, axis=1)[:, n - k :]
    sel_vals = np.take_along_axis(values, sel, axis=1)
    order = np.lexsort((sel, -sel_vals), axis=-1)
    sel = np.take_along_axis(sel, order, axis=1)
    sel_vals = np.take_along_axis(sel_vals, order, axis=1)

    # argpartition breaks value ties arbitrarily; repair rows where entries
    # equal to the k-th value straddle the selection boundary.
    boundary = sel_vals[:, -1]
    in_count = (sel_vals == boundary[:, None]).sum(axis=1)
    total_count = (values == boundary[:, None]).sum(axis=1)
    for r in np.flatnonzero(total_count > in_count):
        row = values[r]
        b = boundary[r]
        strict = np.flatnonzero(row > b)
        strict = strict[np.lexsort((strict, -row[strict]))]
        tied = np.flatnonzero(row == b)
        sel[r] = np.concatenate([strict, tied[: k - strict.size]])
    return sel.astype(np.int32)


def arg_top_k(sim: SimilarityMatrix, k: int) -> TopKIndex:
    """Per-row k best indices of a masked similarity matrix."""
    if not sim.masked:
        raise ValueError("arg_top_k requires a masked similarity matrix")
    if sim.dims is None:
        raise ValueError("masked similarity matrix is missing its dims")
    t, h, w = sim.dims
    _check_k(k, t, h * w)
    return TopKIndex(indices=_topk_rows(sim.values.data, k), k=k)


def _check_k(k: int, t: int, hw: int) -> None:
    limit = (t - 1) * hw
    if k < 1:
        raise ValueError(f"k must be positive, got {k}")
    if k > limit:
        raise ValueError(
            f"k={k} exceeds the {limit} other-frame candidates available "
            f"(T={t}, HW={hw}); reduce k or add frames"
        )


def _propose_grouped(
    inverse: np.ndarray,
    class_d: np.ndarray,
    frames: np.ndarray,
    t: int,
    k: int,
) -> np.ndarray:
    """Exact top-k per row computed once per (feature class, frame) pair.

    All rows sharing a feature class and a frame have identical candidate
    rankings, so the per-row work collapses onto the distinct pairs.
    """
    n = inverse.size
    u = class_d.shape[0]
    order = np.argsort(inverse, kind="stable")
    counts = np.bincount(inverse, minlength=u)
    starts = np.concatenate([[0], np.cumsum(counts)])
    rows_of_class = [order[starts[v] : starts[v + 1]] for v in range(u)]
    frames_of_class = [frames[rows] for rows in rows_of_class]
    count_cf = np.zeros((u, t), dtype=np.int64)
    for v in range(u):
        count_cf[v] = np.bincount(frames_of_class[v], minlength=t)

    out = np.empty((n, k), dtype=np.int32)
    anchor_keys = inverse * t + frames
    for key in np.unique(anchor_keys):
        cu, ct = divmod(int(key), t)
        dist_u = class_d[cu]
        by_dist = np.argsort(dist_u, kind="stable")
        avail = counts[by_dist] - count_cf[by_dist, ct]
        cum = np.cumsum(avail)
        pos = int(np.searchsorted(cum, k))
        boundary_d = dist_u[by_dist[pos]]
        hi = pos + 1
        while hi < u and dist_u[by_dist[hi]] == boundary_d:
            hi += 1
        cand_rows = []
        cand_dist = []
        for v in by_dist[:hi]:
            rows = rows_of_class[v][frames_of_class[v] != ct]
            if rows.size:
                cand_rows.append(rows)
                cand_dist.append(np.full(rows.size, dist_u[v], dtype=DTYPE))
        rows = np.concatenate(cand_rows)
        dist = np.concatenate(cand_dist)
        chosen = rows[np.lexsort((rows, dist))[:k]]
        anchors = rows_of_class[cu][frames_of_class[cu] == ct]
        out[anchors] = chosen
    return out


def propose_topk(cloud: FeaturePointCloud, k: int, backend: str = "brute") -> TopKIndex:
    """Other-frame k-NN indices for every row, via the selected backend."""
    t, h, w = cloud.dims
    _check_k(k, t, h * w)
    if backend == "tree":
        from .kdtree import knn_tree

        return knn_tree(cloud, k)
    if backend != "brute":
        raise ValueError(f"unknown backend {backend!r}, expected 'brute' or 'tree'")

    uniq, inverse, class_d = _group_rows(cloud.features.data)
    frames = cloud.frames()
    n = cloud.num_points
    if uniq.shape[0] <= n // 4:
        indices = _propose_grouped(inverse, class_d, frames, t, k)
    else:
        values = -class_d[inverse][:, inverse]
        hw = h * w
        for ti in range(t):
            lo = ti * hw
            values[lo : lo + hw, lo : lo + hw] = NEG_SENTINEL
        indices = _topk_rows(values, k)
    return TopKIndex(indices=indices, k=k)

"""Exact k-NN over feature space via per-frame kd-trees.

One tree is built per frame, so same-frame exclusion falls out of which
trees a query visits. Queries keep the usual branch-and-bound lower
bounds and prune only on strictly larger bounds, which preserves the
deterministic (distance, then row index) tie rule of the brute backend.

Intended for workloads with mostly-distinct features; heavy duplication
collapses the bounds and queries degrade toward linear scans.
"""

from __future__ import annotations

import numpy as np

from .tensor import DTYPE

_LEAF_SIZE = 16


class _FrameTree:
    def __init__(self, points: np.ndarray, ids: np.ndarray):
        self.points = np.ascontiguousarray(points, dtype=DTYPE)
        self.ids = np.asarray(ids, dtype=np.int64)
        n = self.points.shape[0]
        self.perm = np.arange(n, dtype=np.int64)
        self.axis: list[int] = []
        self.thresh: list[float] = []
        self.left: list[int] = []
        self.right: list[int] = []
        self.lo: list[int] = []
        self.hi: list[int] = []
        self.root = self._build(0, n)

    def _new_node(self) -> int:
        self.axis.append(-1)
        self.thresh.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.lo.append(0)
        self.hi.append(0)
        return len(self.axis) - 1

    def _build(self, lo: int, hi: int) -> int:
        node = self._new_node()
        if hi - lo <= _LEAF_SIZE:
            self.lo[node], self.hi[node] = lo, hi
            return node
        chunk = self.perm[lo:hi]
        pts = self.points[chunk]
        spread = pts.max(axis=0) - pts.min(axis=0)
        axis = int(np.argmax(spread))
        mid = (hi - lo) // 2
        order = np.argpartition(pts[:, axis], mid)
        self.perm[lo:hi] = chunk[order]
        self.axis[node] = axis
        self.thresh[node] = float(self.points[self.perm[lo + mid], axis])
        self.left[node] = self._build(lo, lo + mid)
        self.right[node] = self._build(lo + mid, hi)
        return node

    def query(self, q: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
        """k smallest (squared distance, id) pairs, sorted ascending."""
        best_d = np.empty(0, dtype=DTYPE)
        best_i = np.empty(0, dtype=np.int64)
        # stack entries: (node, lower bound, per-axis squared offsets)
        stack = [(self.root, 0.0, np.zeros(q.size, dtype=np.float64))]
        while stack:
            node, lb, side = stack.pop()
            if best_d.size == k and lb > best_d[-1]:
                continue
            axis = self.axis[node]
            if axis < 0:
                rows = self.perm[self.lo[node] : self.hi[node]]
                d = np.square(self.points[rows] - q).sum(axis=1, dtype=DTYPE)
                cd = np.concatenate([best_d, d])
                ci = np.concatenate([best_i, self.ids[rows]])
                order = np.lexsort((ci, cd))[:k]
                best_d, best_i = cd[order], ci[order]
                continue
            delta = float(q[axis]) - self.thresh[node]
            if delta < 0:
                near, far = self.left[node], self.right[node]
            else:
                near, far = self.right[node], self.left[node]
            far_side = side.copy()
            far_side[axis] = delta * delta
            stack.append((far, lb - side[axis] + far_side[axis], far_side))
            stack.append((near, lb, side))
        return best_d, best_i


def knn_tree(cloud, k: int):
    """Tree-backed equivalent of the brute grouping pipeline."""
    from .knn import TopKIndex, _check_k

    t, h, w = cloud.dims
    _check_k(k, t, h * w)
    features = cloud.features.data
    frames = cloud.frames()
    trees = []
    for ti in range(t):
        rows = np.flatnonzero(frames == ti)
        trees.append(_FrameTree(features[rows], rows))

    n = cloud.num_points
    out = np.empty((n, k), dtype=np.int32)
    for i in range(n):
        q = features[i]
        ti = int(frames[i])
        parts_d = []
        parts_i = []
        for tj in range(t):
            if tj == ti:
                continue
            d, ids = trees[tj].query(q, k)
            parts_d.append(d)
            parts_i.append(ids)
        cd = np.concatenate(parts_d)
        ci = np.concatenate(parts_i)
        order = np.lexsort((ci, cd))[:k]
        out[i] = ci[order]
    return TopKIndex(indices=out, k=k)

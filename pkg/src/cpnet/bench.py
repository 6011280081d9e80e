"""Timing harness for the grouping backends.

Bench clouds model conv feature maps: points concentrate in small
appearance clusters (cluster size fixed, so the cluster count scales
with the cloud), with enough jitter that all pairwise distances are
comfortably distinct for both distance formulas.
"""

from __future__ import annotations

import time

import numpy as np

from .knn import FeaturePointCloud, propose_topk
from .tensor import DTYPE, Tensor

_FRAMES = 4
_CLUSTER_SIZE = 32
_JITTER = 0.05


def make_bench_cloud(thw: int, channels: int, seed: int) -> FeaturePointCloud:
    if thw % _FRAMES != 0:
        raise ValueError(f"bench sizes must be divisible by {_FRAMES} frames, got {thw}")
    rng = np.random.default_rng(seed)
    n_centers = max(2, thw // _CLUSTER_SIZE)
    centers = rng.standard_normal((n_centers, channels))
    assign = rng.integers(0, n_centers, size=thw)
    feats = centers[assign] + rng.uniform(-_JITTER, _JITTER, size=(thw, channels))
    return FeaturePointCloud(
        features=Tensor(feats.astype(DTYPE)), dims=(_FRAMES, thw // _FRAMES, 1)
    )


def run_bench(
    sizes: list[int],
    backends: list[str],
    channels: int = 64,
    k: int = 8,
    seed: int = 0,
    repeats: int = 3,
):
    """Time each backend at each size; cross-checks backend agreement.

    Returns (rows, ratios): rows are ``(backend, thw, c, k, millis)``
    CSV tuples; ratios maps backend -> list of time ratios between
    consecutive sizes.
    """
    if not sizes:
        raise ValueError("need at least one size")
    if any(b - a <= 0 for a, b in zip(sizes, sizes[1:])):
        raise ValueError("sizes must be strictly ascending")
    if not backends:
        raise ValueError("need at least one backend")

    rows = []
    times: dict[str, list[float]] = {b: [] for b in backends}
    for thw in sizes:
        cloud = make_bench_cloud(thw, channels, seed)
        outputs = {}
        for backend in backends:
            propose_topk(cloud, k, backend)  # warm caches
            best = np.inf
            for _ in range(repeats):
                t0 = time.perf_counter()
                result = propose_topk(cloud, k, backend)
                best = min(best, time.perf_counter() - t0)
            outputs[backend] = result.indices
            millis = best * 1e3
            times[backend].append(millis)
            rows.append((backend, thw, channels, k, millis))
        first = backends[0]
        for backend in backends[1:]:
            if not np.array_equal(outputs[first], outputs[backend]):
                raise RuntimeError(
                    f"backends {first!r} and {backend!r} disagree at THW={thw}"
                )
    ratios = {
        b: [ts[i + 1] / ts[i] for i in range(len(ts) - 1)] for b, ts in times.items()
    }
    return rows, ratios


def rows_to_csv(rows) -> str:
    lines = ["backend,thw,c,k,millis"]
    for backend, thw, c, k, millis in rows:
        lines.append(f"{backend},{thw},{c},{k},{millis:.3f}")
    return "\n".join(lines) + "\n"

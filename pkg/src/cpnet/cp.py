"""Correspondence embedding over proposed neighbor pairs.

For each anchor row and each of its k proposed neighbors, the pair
[anchor feature; neighbor feature; normalized displacement] runs through
a shared three-layer MLP, and element-wise max pooling over the k slots
produces the anchor's output vector. The final normalization scale
starts at zero so a freshly initialized module is an exact no-op inside
a residual connection.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import ops
from .knn import FeaturePointCloud, TopKIndex
from .ops import BatchNormState
from .tensor import DTYPE, Tape, Tensor


@dataclass
class CpMlpLayer:
    weight: Tensor
    bias: Tensor
    gamma: Tensor
    beta: Tensor
    state: BatchNormState


@dataclass
class CpModuleParams:
    """Shared-MLP weights for one module: (2C+3) -> C/4 -> C/2 -> C.

    Each affine layer is followed by batch normalization; the first two
    are also followed by relu. ``final_gamma`` is the scale of the last
    normalization, zero at initialization.
    """

    layers: list[CpMlpLayer]
    channels: int

    @property
    def final_gamma(self) -> Tensor:
        return self.layers[-1].gamma

    def trainable(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, layer in enumerate(self.layers):
            out.append((f"mlp{i}/weight", layer.weight))
            out.append((f"mlp{i}/bias", layer.bias))
            out.append((f"mlp{i}/gamma", layer.gamma))
            out.append((f"mlp{i}/beta", layer.beta))
        return out


@dataclass
class ActivationProvenance:
    """Winning neighbor slot per (anchor, channel) from the max pooling."""

    argmax: np.ndarray
    k: int

    def __post_init__(self):
        self.argmax = np.asarray(self.argmax)
        if self.argmax.size and (self.argmax.min() < 0 or self.argmax.max() >= self.k):
            raise ValueError(f"argmax slots must lie in [0,{self.k})")


def init_params(channels: int, seed: int) -> CpModuleParams:
    """MSRA-initialized module parameters with a zero final scale.

    Affine weights draw from N(0, 2/fan_in), biases and betas are zero,
    normalization scales are one except the last, which is zero.
    """
    if channels % 4 != 0:
        raise ValueError(f"channels must be divisible by 4, got {channels}")
    widths = [2 * channels + 3, channels // 4, channels // 2, channels]
    rng = np.random.default_rng(seed)
    layers = []
    for i in range(3):
        fan_in, fan_out = widths[i], widths[i + 1]
        weight = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in))
        gamma = np.zeros(fan_out, dtype=DTYPE) if i == 2 else np.ones(fan_out, dtype=DTYPE)
        layers.append(
            CpMlpLayer(
                weight=Tensor(weight, requires_grad=True),
                bias=Tensor(np.zeros(fan_out, dtype=DTYPE), requires_grad=True),
                gamma=Tensor(gamma, requires_grad=True),
                beta=Tensor(np.zeros(fan_out, dtype=DTYPE), requires_grad=True),
                state=BatchNormState(fan_out),
            )
        )
    return CpModuleParams(layers=layers, channels=channels)


def _check_widths(params: CpModuleParams, channels: int) -> None:
    expected = 2 * channels + 3
    got = params.layers[0].weight.shape[1]
    if got != expected or params.channels != channels:
        raise ValueError(
            f"module expects pair width {got} but input channels {channels} need {expected}"
        )


def embed_pairs(
    features: Tensor,
    coords: np.ndarray,
    indices: np.ndarray,
    params: CpModuleParams,
    mode: str,
    tape: Optional[Tape] = None,
) -> tuple[Tensor, np.ndarray, Tensor]:
    """Run the shared MLP over all (anchor, neighbor) pairs and max-pool.

    ``features`` is [R, C] (possibly several samples stacked; ``indices``
    must stay within each sample's own rows). Returns the pooled [R, C]
    output, the argmax record, and the raw per-pair outputs [R, k, C].
    Normalization statistics in train mode pool over all R*k pairs.
    """
    rows, channels = features.shape
    _check_widths(params, channels)
    k = indices.shape[1]
    neighbor = ops.gather_rows(features, indices, tape)
    anchor = ops.expand_rows(features, k, tape)
    disp = (coords[indices] - coords[:, None, :]).astype(DTYPE)
    pair = ops.concat_last([anchor, neighbor, Tensor(disp)], tape)
    h = ops.reshape(pair, (rows * k, 2 * channels + 3), tape)
    for i, layer in enumerate(params.layers):
        h = ops.linear(h, layer.weight, layer.bias, tape)
        h = ops.batch_norm(h, layer.gamma, layer.beta, layer.state, mode, tape)
        if i < 2:
            h = ops.relu(h, tape)
    zeta = ops.reshape(h, (rows, k, channels), tape)
    pooled, argmax = ops.max_over_set(zeta, tape)
    return pooled, argmax, zeta


def correspondence_embed(
    cloud: FeaturePointCloud,
    topk: TopKIndex,
    params: CpModuleParams,
    mode: str = "eval",
    tape: Optional[Tape] = None,
) -> tuple[Tensor, ActivationProvenance]:
    """Embed one cloud's proposed correspondences (see :func:`embed_pairs`)."""
    if topk.indices.shape[0] != cloud.num_points:
        raise ValueError(
            f"topk has {topk.indices.shape[0]} rows but cloud has {cloud.num_points} points"
        )
    pooled, argmax, _ = embed_pairs(
        cloud.features, cloud.coords(), topk.indices, params, mode, tape
    )
    return pooled, ActivationProvenance(argmax=argmax, k=topk.k)


def residual_insert(block_output: Tensor, cp_output: Tensor, tape: Optional[Tape] = None) -> Tensor:
    """Element-wise sum; the caller applies relu after the sum."""
    if block_output.shape != cp_output.shape:
        raise ValueError(
            f"residual shapes differ: {tuple(block_output.shape)} vs {tuple(cp_output.shape)}"
        )
    return ops.add(block_output, cp_output, tape)


def activation_set(prov: ActivationProvenance, point: int) -> set[int]:
    """Neighbor slots that win at least one channel for the given anchor."""
    if prov.argmax.ndim != 2:
        raise ValueError("activation_set expects per-cloud provenance [THW, C]")
    if not 0 <= point < prov.argmax.shape[0]:
        raise ValueError(f"point {point} out of range [0,{prov.argmax.shape[0]})")
    return {int(j) for j in np.unique(prov.argmax[point])}


def feature_change_heatmap(before: Tensor, after: Tensor, dims: tuple[int, int, int]) -> Tensor:
    """Per-position L1 feature change, reshaped onto the (T, H, W) grid."""
    if before.shape != after.shape:
        raise ValueError(
            f"shapes differ: {tuple(before.shape)} vs {tuple(after.shape)}"
        )
    t, h, w = dims
    if before.shape[0] != t * h * w:
        raise ValueError(f"dims {dims} imply {t * h * w} rows, have {before.shape[0]}")
    heat = np.abs(after.data - before.data).sum(axis=1, dtype=DTYPE)
    return Tensor(heat.reshape(t, h, w))

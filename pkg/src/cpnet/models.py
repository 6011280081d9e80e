"""Toy video classifiers: a two-conv backbone, optionally with the
correspondence module inserted between the convs (residual, pre-relu).

Both variants share the same backbone layout so that a freshly
initialized correspondence module leaves the forward pass bitwise
identical to the plain backbone.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import ops
from .cp import ActivationProvenance, CpModuleParams, embed_pairs, init_params, residual_insert
from .knn import FeaturePointCloud, grid_coords, propose_topk
from .ops import BatchNormState
from .tensor import DTYPE, Tape, Tensor, load_tensors, save_tensors

NUM_CLASSES = 4
CONV_CHANNELS = 16
TOY_DIMS = (4, 32, 32)

_ARCH_CODES = {"c2d": 0.0, "cpnet": 1.0}


class ToyModel:
    def __init__(self, arch: str, k: int = 0, backend: str = "brute", seed: int = 0):
        if arch not in _ARCH_CODES:
            raise ValueError(f"unknown arch {arch!r}")
        self.arch = arch
        self.k = int(k)
        self.backend = backend
        c = CONV_CHANNELS
        rng = np.random.default_rng(seed)

        def msra(shape, fan_in):
            return Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape), requires_grad=True)

        def zeros(shape):
            return Tensor(np.zeros(shape, dtype=DTYPE), requires_grad=True)

        def ones(shape):
            return Tensor(np.ones(shape, dtype=DTYPE), requires_grad=True)

        self.params: dict[str, Tensor] = {
            "conv1/weight": msra((c, 1, 3, 3), 9),
            "conv1/bias": zeros(c),
            "bn1/gamma": ones(c),
            "bn1/beta": zeros(c),
            "conv2/weight": msra((c, c, 3, 3), 9 * c),
            "conv2/bias": zeros(c),
            "bn2/gamma": ones(c),
            "bn2/beta": zeros(c),
            "fc/weight": msra((NUM_CLASSES, c), c),
            "fc/bias": zeros(NUM_CLASSES),
        }
        self.states: dict[str, BatchNormState] = {
            "bn1": BatchNormState(c),
            "bn2": BatchNormState(c),
        }
        self.cp: Optional[CpModuleParams] = None
        if arch == "cpnet":
            t, h, w = TOY_DIMS
            if not 1 <= self.k <= (t - 1) * h * w:
                raise ValueError(
                    f"k={k} invalid for the toy geometry (1..{(t - 1) * h * w})"
                )
            self.cp = init_params(c, seed=int(rng.integers(2**31)))
            for name, tensor in self.cp.trainable():
                self.params[f"cp/{name}"] = tensor
            for i, layer in enumerate(self.cp.layers):
                self.states[f"cp/bn{i}"] = layer.state

    # -- parameter access ---------------------------------------------------

    def trainable(self) -> list[tuple[str, Tensor]]:
        return sorted(self.params.items())

    def parameter_count(self) -> int:
        return sum(t.size for _, t in self.trainable())

    def zero_grads(self) -> None:
        for _, t in self.trainable():
            t.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {name: t.data for name, t in self.trainable()}
        for name, st in self.states.items():
            out[f"{name}/running_mean"] = st.running_mean
            out[f"{name}/running_var"] = st.running_var
        return out

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: arr.copy() for name, arr in self.state_arrays().items()}

    def restore(self, arrays: dict[str, np.ndarray]) -> None:
        expected = set(self.state_arrays())
        missing = expected - set(arrays)
        if missing:
            raise ValueError(f"checkpoint is missing entries: {sorted(missing)[:4]} ...")
        for name, t in self.params.items():
            if arrays[name].shape != t.data.shape:
                raise ValueError(f"checkpoint entry {name!r} has shape {arrays[name].shape}")
            t.data = np.ascontiguousarray(arrays[name], dtype=DTYPE)
        for name, st in self.states.items():
            st.running_mean = np.ascontiguousarray(arrays[f"{name}/running_mean"], dtype=DTYPE)
            st.running_var = np.ascontiguousarray(arrays[f"{name}/running_var"], dtype=DTYPE)

    # -- forward ------------------------------------------------------------

    def forward(
        self,
        videos: np.ndarray,
        mode: str,
        tape: Optional[Tape] = None,
        fixed_topk: Optional[np.ndarray] = None,
        want_detail: bool = False,
    ):
        """Logits for a batch of [N,T,H,W] videos.

        ``fixed_topk`` ([N,THW,k], per-sample row indices) bypasses the
        grouping step; gradient checking uses it to hold the selected
        correspondences constant. With ``want_detail`` the return value
        is (logits, detail dict of numpy views of the module internals).
        """
        v = np.ascontiguousarray(videos, dtype=DTYPE)
        if v.ndim != 4:
            raise ValueError(f"expected [N,T,H,W] videos, got shape {v.shape}")
        n, t, h, w = v.shape
        p = self.params
        x = Tensor(v.reshape(n * t, 1, h, w))
        x = ops.conv2d(x, p["conv1/weight"], p["conv1/bias"], tape)
        x = ops.batch_norm(x, p["bn1/gamma"], p["bn1/beta"], self.states["bn1"], mode, tape)
        x = ops.relu(x, tape)

        detail: dict = {}
        if self.arch == "cpnet":
            x, detail = self._cp_block(x, n, (t, h, w), mode, tape, fixed_topk, want_detail)
            x = ops.relu(x, tape)

        x = ops.conv2d(x, p["conv2/weight"], p["conv2/bias"], tape)
        x = ops.batch_norm(x, p["bn2/gamma"], p["bn2/beta"], self.states["bn2"], mode, tape)
        x = ops.relu(x, tape)

        c = x.shape[1]
        grouped = ops.reshape(x, (n, t, c, h, w), tape)
        grouped = ops.permute(grouped, (0, 2, 1, 3, 4), tape)  # [N,C,T,H,W]
        pooled = ops.global_avg_pool(grouped, tape)
        logits = ops.linear(pooled, p["fc/weight"], p["fc/bias"], tape)
        if want_detail:
            return logits, detail
        return logits

    def _cp_block(self, x: Tensor, n: int, dims, mode, tape, fixed_topk, want_detail):
        t, h, w = dims
        c = x.shape[1]
        thw = t * h * w
        spatial = ops.permute(x, (0, 2, 3, 1), tape)  # [N*T,H,W,C]
        flat = ops.reshape(spatial, (n * thw, c), tape)

        if fixed_topk is not None:
            topk = np.asarray(fixed_topk, dtype=np.int32)
            if topk.ndim != 3 or topk.shape[:2] != (n, thw):
                raise ValueError(f"fixed_topk must be [N,THW,k], got {topk.shape}")
        else:
            per_sample = []
            feats = flat.data.reshape(n, thw, c)
            for i in range(n):
                cloud = FeaturePointCloud(features=Tensor(feats[i]), dims=(t, h, w))
                per_sample.append(propose_topk(cloud, self.k, self.backend).indices)
            topk = np.stack(per_sample)
        k = topk.shape[2]
        offsets = (np.arange(n, dtype=np.int64) * thw)[:, None, None]
        global_idx = (topk.astype(np.int64) + offsets).reshape(n * thw, k)

        coords = np.tile(grid_coords((t, h, w)), (n, 1))
        pooled, argmax, zeta = embed_pairs(flat, coords, global_idx, self.cp, mode, tape)

        ce = ops.reshape(pooled, (n * t, h, w, c), tape)
        ce = ops.permute(ce, (0, 3, 1, 2), tape)  # [N*T,C,H,W]
        out = residual_insert(x, ce, tape)

        detail: dict = {}
        if want_detail:
            detail = {
                "dims": (t, h, w),
                "topk": topk,
                "rows_before": flat.data.reshape(n, thw, c),
                "zeta": zeta.data.reshape(n, thw, k, c),
                "embedded": pooled.data.reshape(n, thw, c),
                "provenance": ActivationProvenance(
                    argmax=argmax.reshape(n, thw, c), k=k
                ),
            }
        return out, detail

    # -- persistence ----------------------------------------------------------

    def save(self, path) -> None:
        entries: dict[str, np.ndarray] = {
            "meta": np.array(
                [_ARCH_CODES[self.arch], float(self.k), float(CONV_CHANNELS)], dtype=DTYPE
            )
        }
        entries.update(self.state_arrays())
        save_tensors(path, entries)


def build_toy_cpnet(k: int, seed: int = 0, backend: str = "brute") -> ToyModel:
    """conv(3x3,16) -> BN -> relu -> CP(residual) -> relu -> conv(3x3,16)
    -> BN -> relu -> global average pool -> fc(4)."""
    return ToyModel("cpnet", k=k, backend=backend, seed=seed)


def build_toy_c2d(seed: int = 0) -> ToyModel:
    """The same backbone with no correspondence module."""
    return ToyModel("c2d", seed=seed)


def load_model(path, backend: str = "brute") -> ToyModel:
    entries = load_tensors(path)
    meta = entries.pop("meta", None)
    if meta is None or meta.size != 3:
        raise ValueError("checkpoint is missing its meta record")
    arch = "cpnet" if meta[0] >= 0.5 else "c2d"
    k = int(round(float(meta[1])))
    model = ToyModel(arch, k=k if arch == "cpnet" else 0, backend=backend)
    model.restore(entries)
    return model

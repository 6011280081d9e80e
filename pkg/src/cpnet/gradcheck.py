"""Central-difference verification of tape gradients.

Each scenario exposes a pure scalar loss over a dict of named arrays.
For every checked coordinate we compare the tape gradient against
(f(x+eps) - f(x-eps)) / 2 eps, skipping coordinates whose relu masks or
max winners differ between the two probe points (the derivative is not
defined across such a selection switch). A coordinate passes when the
difference is small in absolute terms or relative to the larger of the
two magnitudes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import ops
from .cp import embed_pairs, init_params
from .knn import FeaturePointCloud, propose_topk
from .models import build_toy_cpnet
from .ops import BatchNormState
from .tensor import DTYPE, Tape, Tensor, backward

DEFAULT_EPSILON = 1e-2
DEFAULT_TOL = 1e-2


@dataclass
class GroupReport:
    group: str
    checked: int
    skipped: int
    max_err: float

    @property
    def passed(self) -> bool:
        return self.max_err < DEFAULT_TOL


def _effective_err(fd: float, an: float) -> float:
    diff = abs(fd - an)
    scale = max(abs(fd), abs(an))
    if scale > 0:
        return min(diff, diff / scale)
    return diff


# A scenario builder returns (arrays, forward) where forward(arrays, tape)
# rebuilds tensors from the arrays and returns (loss, tensors-by-name).
Forward = Callable[[dict, Optional[Tape]], tuple[Tensor, dict]]


def _uniform(rng, shape):
    return rng.uniform(-1.0, 1.0, size=shape).astype(DTYPE)


def _projection_loss(out: Tensor, proj: np.ndarray, tape):
    return ops.sum_all(ops.mul(out, Tensor(proj), tape), tape)


def _scenario_conv2d(rng):
    arrays = {
        "x": _uniform(rng, (1, 2, 4, 4)),
        "kernel": _uniform(rng, (3, 2, 3, 3)),
        "bias": _uniform(rng, (3,)),
    }
    proj = _uniform(rng, (1, 3, 4, 4))

    def forward(a, tape):
        ts = {k: Tensor(v, requires_grad=True) for k, v in a.items()}
        out = ops.conv2d(ts["x"], ts["kernel"], ts["bias"], tape)
        return _projection_loss(out, proj, tape), ts

    return arrays, forward


def _scenario_batch_norm(mode):
    def make(rng):
        arrays = {
            "x": _uniform(rng, (3, 4, 5, 5) if mode == "train" else (6, 4)),
            "gamma": _uniform(rng, (4,)),
            "beta": _uniform(rng, (4,)),
        }
        proj = _uniform(rng, arrays["x"].shape)
        base = BatchNormState(4)
        base.running_mean = _uniform(rng, (4,))
        base.running_var = (rng.uniform(0.2, 1.5, size=4)).astype(DTYPE)

        def forward(a, tape):
            ts = {k: Tensor(v, requires_grad=True) for k, v in a.items()}
            out = ops.batch_norm(ts["x"], ts["gamma"], ts["beta"], base.copy(), mode, tape)
            return _projection_loss(out, proj, tape), ts

        return arrays, forward

    return make


def _scenario_linear(rng):
    arrays = {
        "x": _uniform(rng, (5, 7)),
        "weight": _uniform(rng, (3, 7)),
        "bias": _uniform(rng, (3,)),
    }
    proj = _uniform(rng, (5, 3))

    def forward(a, tape):
        ts = {k: Tensor(v, requires_grad=True) for k, v in a.items()}
        out = ops.linear(ts["x"], ts["weight"], ts["bias"], tape)
        return _projection_loss(out, proj, tape), ts

    return arrays, forward


def _scenario_relu(rng):
    arrays = {"x": _uniform(rng, (4, 9))}
    proj = _uniform(rng, (4, 9))

    def forward(a, tape):
        ts = {"x": Tensor(a["x"], requires_grad=True)}
        return _projection_loss(ops.relu(ts["x"], tape), proj, tape), ts

    return arrays, forward


def _scenario_global_avg_pool(rng):
    arrays = {"x": _uniform(rng, (2, 3, 4, 5))}
    proj = _uniform(rng, (2, 3))

    def forward(a, tape):
        ts = {"x": Tensor(a["x"], requires_grad=True)}
        return _projection_loss(ops.global_avg_pool(ts["x"], tape), proj, tape), ts

    return arrays, forward


def _scenario_softmax_xent(rng):
    arrays = {"logits": _uniform(rng, (6, 4))}
    labels = rng.integers(0, 4, size=6)

    def forward(a, tape):
        ts = {"logits": Tensor(a["logits"], requires_grad=True)}
        loss, _ = ops.softmax_cross_entropy(ts["logits"], labels, tape)
        return loss, ts

    return arrays, forward


def _scenario_gather_rows(rng):
    arrays = {"source": _uniform(rng, (7, 3))}
    idx = rng.integers(0, 7, size=(7, 2))
    proj = _uniform(rng, (7, 2, 3))

    def forward(a, tape):
        ts = {"source": Tensor(a["source"], requires_grad=True)}
        out = ops.gather_rows(ts["source"], idx, tape)
        return _projection_loss(out, proj, tape), ts

    return arrays, forward


def _scenario_max_over_set(rng):
    arrays = {"x": _uniform(rng, (3, 4, 5))}
    proj = _uniform(rng, (3, 5))

    def forward(a, tape):
        ts = {"x": Tensor(a["x"], requires_grad=True)}
        out, _ = ops.max_over_set(ts["x"], tape)
        return _projection_loss(out, proj, tape), ts

    return arrays, forward


def _scenario_plumbing(rng):
    """add/mul/concat/expand/reshape/permute composed into one loss."""
    arrays = {"a": _uniform(rng, (4, 3)), "b": _uniform(rng, (4, 3))}
    proj = _uniform(rng, (2, 4 * 6))

    def forward(a, tape):
        ts = {k: Tensor(v, requires_grad=True) for k, v in a.items()}
        both = ops.add(ts["a"], ts["b"], tape)
        prod = ops.mul(both, ts["a"], tape)
        wide = ops.concat_last([ops.expand_rows(prod, 2, tape), ops.expand_rows(ts["b"], 2, tape)], tape)
        swapped = ops.permute(wide, (1, 0, 2), tape)
        flat = ops.reshape(swapped, (2, 4 * 6), tape)
        return _projection_loss(flat, proj, tape), ts

    return arrays, forward


def _scenario_correspondence_embed(rng):
    channels, k = 4, 2
    dims = (2, 2, 1)
    thw = 4
    feats = _uniform(rng, (thw, channels))
    cloud = FeaturePointCloud(features=Tensor(feats), dims=dims)
    indices = propose_topk(cloud, k).indices
    coords = cloud.coords()
    params = init_params(channels, seed=int(rng.integers(2**31)))
    # Perturb away from the all-zero final scale so gradients reach every layer.
    arrays = {"features": feats}
    for name, tensor in params.trainable():
        arrays[name] = tensor.data + _uniform(rng, tensor.shape) * DTYPE(0.3)
    proj = _uniform(rng, (thw, channels))

    def forward(a, tape):
        ts = {k2: Tensor(v, requires_grad=True) for k2, v in a.items()}
        p = init_params(channels, seed=0)
        for i, layer in enumerate(p.layers):
            layer.weight = ts[f"mlp{i}/weight"]
            layer.bias = ts[f"mlp{i}/bias"]
            layer.gamma = ts[f"mlp{i}/gamma"]
            layer.beta = ts[f"mlp{i}/beta"]
            layer.state = BatchNormState(layer.state.running_mean.size)
        out, _, _ = embed_pairs(ts["features"], coords, indices, p, "train", tape)
        return _projection_loss(out, proj, tape), ts

    return arrays, forward


def _scenario_end_to_end(rng):
    """Full toy network loss with the proposal indices held fixed."""
    model = build_toy_cpnet(k=2, seed=int(rng.integers(2**31)))
    videos = rng.uniform(-1.0, 1.0, size=(2, 4, 6, 6)).astype(DTYPE)
    labels = rng.integers(0, 4, size=2)
    # Nudge every parameter off its symmetric init (zeros/ones) so the
    # check exercises generic points, then freeze the proposals there.
    arrays = {}
    for name, tensor in model.trainable():
        arrays[name] = tensor.data + _uniform(rng, tensor.shape) * DTYPE(0.2)

    def forward(a, tape):
        ts = {}
        for name, tensor in model.trainable():
            fresh = Tensor(a[name], requires_grad=True)
            model.params[name] = fresh
            ts[name] = fresh
        for i, layer in enumerate(model.cp.layers):
            layer.weight = model.params[f"cp/mlp{i}/weight"]
            layer.bias = model.params[f"cp/mlp{i}/bias"]
            layer.gamma = model.params[f"cp/mlp{i}/gamma"]
            layer.beta = model.params[f"cp/mlp{i}/beta"]
        logits = model.forward(
            videos, mode="train", tape=tape, fixed_topk=forward.topk
        )
        loss, _ = ops.softmax_cross_entropy(logits, labels, tape)
        return loss, ts

    forward.topk = None
    # Freeze proposals computed at the base point.
    for name, tensor in model.trainable():
        tensor.data = arrays[name]
    probe = model.forward(videos, mode="train", want_detail=True)
    forward.topk = probe[1]["topk"]
    return arrays, forward


SCENARIOS: dict[str, Callable] = {
    "conv2d": _scenario_conv2d,
    "batch_norm_train": _scenario_batch_norm("train"),
    "batch_norm_eval": _scenario_batch_norm("eval"),
    "linear": _scenario_linear,
    "relu": _scenario_relu,
    "global_avg_pool": _scenario_global_avg_pool,
    "softmax_cross_entropy": _scenario_softmax_xent,
    "gather_rows": _scenario_gather_rows,
    "max_over_set": _scenario_max_over_set,
    "plumbing": _scenario_plumbing,
    "correspondence_embed": _scenario_correspondence_embed,
    "end_to_end": _scenario_end_to_end,
}


def check_scenario(
    name: str,
    seed: int,
    epsilon: float = DEFAULT_EPSILON,
    max_coords: Optional[int] = None,
) -> list[GroupReport]:
    """Run one scenario; returns a report per parameter group."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    rng = np.random.default_rng(seed)
    arrays, forward = SCENARIOS[name](rng)

    # Analytic gradients from one taped pass.
    tape = Tape()
    loss, tensors = forward(arrays, tape)
    backward(loss, tape)
    analytic = {
        key: (t.grad if t.grad is not None else np.zeros_like(t.data)) for key, t in tensors.items()
    }

    def probe(a) -> tuple[float, bytes]:
        sink: list = []
        with ops.selection_probe(sink):
            value, _ = forward(a, None)
        return float(value.data), b"".join(sink)

    reports = []
    for key in arrays:
        flat = arrays[key].reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        checked = skipped = 0
        max_err = 0.0
        grad_flat = analytic[key].reshape(-1)
        for ci in coords:
            original = flat[ci]
            flat[ci] = original + DTYPE(epsilon)
            f_plus, sig_plus = probe(arrays)
            flat[ci] = original - DTYPE(epsilon)
            f_minus, sig_minus = probe(arrays)
            flat[ci] = original
            if sig_plus != sig_minus:
                skipped += 1
                continue
            fd = (f_plus - f_minus) / (2.0 * epsilon)
            max_err = max(max_err, _effective_err(fd, float(grad_flat[ci])))
            checked += 1
        reports.append(GroupReport(f"{name}/{key}", checked, skipped, max_err))
    return reports


def run_all(
    seed: int, epsilon: float = DEFAULT_EPSILON, max_coords: Optional[int] = 48
) -> list[GroupReport]:
    reports = []
    for name in SCENARIOS:
        reports.extend(check_scenario(name, seed, epsilon, max_coords))
    return reports

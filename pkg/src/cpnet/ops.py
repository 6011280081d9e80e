"""Differentiable operations over :class:`~cpnet.tensor.Tensor`.

Every op validates shapes up front, computes its forward value in
float32, and (when a tape is supplied and some input is tracked)
records a backward rule on the tape. There is no broadcasting beyond
per-channel bias/affine addition; mismatched shapes are rejected.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import DTYPE, Tape, Tensor

# Optional collector of selection decisions (relu masks, max winners).
# Gradient checking compares these signatures across perturbed forward
# passes to discard finite-difference probes that cross a kink.
_selection_sink: Optional[list] = None


@contextmanager
def selection_probe(sink: list):
    global _selection_sink
    prev = _selection_sink
    _selection_sink = sink
    try:
        yield sink
    finally:
        _selection_sink = prev


def _note_selection(arr: np.ndarray) -> None:
    if _selection_sink is not None:
        _selection_sink.append(arr.tobytes())


def _requires(*tensors: Tensor) -> bool:
    return any(t.requires_grad for t in tensors)


def _out(tape: Optional[Tape], data: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data, requires_grad=_requires(*inputs))
    if tape is not None and out.requires_grad:
        tape.record(out, inputs, backward)
    return out


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, tape: Optional[Tape] = None) -> Tensor:
    """3x3 cross-correlation, stride 1, zero padding 1 (same-size output)."""
    if x.data.ndim != 4:
        raise ValueError(f"conv2d expects input [N,C,H,W], got shape {tuple(x.shape)}")
    n, c_in, h, w = x.shape
    if kernel.data.ndim != 4 or kernel.shape[2:] != (3, 3):
        raise ValueError(f"conv2d expects a [C_out,C_in,3,3] kernel, got {tuple(kernel.shape)}")
    c_out, kc_in = kernel.shape[0], kernel.shape[1]
    if kc_in != c_in:
        raise ValueError(f"kernel expects {kc_in} input channels but input has {c_in}")
    if bias.shape != (c_out,):
        raise ValueError(f"bias shape {tuple(bias.shape)} does not match {c_out} output channels")

    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))  # [N,C,H,W,3,3]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * h * w, c_in * 9)
    k2 = kernel.data.reshape(c_out, c_in * 9)
    y2 = cols @ k2.T
    y = np.ascontiguousarray(y2.reshape(n, h, w, c_out).transpose(0, 3, 1, 2))
    y += bias.data[None, :, None, None]

    def back(dy: np.ndarray):
        dy2 = np.ascontiguousarray(dy.transpose(0, 2, 3, 1)).reshape(n * h * w, c_out)
        dk = (dy2.T @ cols).reshape(c_out, c_in, 3, 3)
        db = dy.sum(axis=(0, 2, 3))
        dcols = (dy2 @ k2).reshape(n, h, w, c_in, 3, 3)
        dxp = np.zeros((n, c_in, h + 2, w + 2), dtype=DTYPE)
        for kh in range(3):
            for kw in range(3):
                dxp[:, :, kh : kh + h, kw : kw + w] += dcols[:, :, :, :, kh, kw].transpose(
                    0, 3, 1, 2
                )
        return dxp[:, :, 1 : h + 1, 1 : w + 1], dk, db

    return _out(tape, y, (x, kernel, bias), back)


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------


class BatchNormState:
    """Per-channel running statistics for one normalization layer."""

    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5):
        self.running_mean = np.zeros(channels, dtype=DTYPE)
        self.running_var = np.ones(channels, dtype=DTYPE)
        self.momentum = momentum
        self.eps = eps

    def copy(self) -> "BatchNormState":
        dup = BatchNormState(self.running_mean.size, self.momentum, self.eps)
        dup.running_mean = self.running_mean.copy()
        dup.running_var = self.running_var.copy()
        return dup


def _chan_view(arr: np.ndarray, ndim: int) -> np.ndarray:
    if ndim == 2:
        return arr[None, :]
    return arr[None, :, None, None]


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    mode: str,
    tape: Optional[Tape] = None,
) -> Tensor:
    """Per-channel standardization then affine, over [N,C] or [N,C,H,W].

    Train mode normalizes with batch statistics and updates the running
    stats in ``state`` (momentum 0.9, unbiased variance); eval mode uses
    the stored running stats. Zero-variance channels are stabilized by
    ``eps``, never an error.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    ndim = x.data.ndim
    if ndim not in (2, 4):
        raise ValueError(f"batch_norm expects [N,C] or [N,C,H,W], got shape {tuple(x.shape)}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError("gamma/beta must be per-channel vectors matching the input")
    axes = (0,) if ndim == 2 else (0, 2, 3)
    m = int(np.prod([x.shape[a] for a in axes]))
    eps = DTYPE(state.eps)

    if mode == "train":
        if m < 2:
            raise ValueError(f"train-mode batch_norm needs a population >= 2, got {m}")
        mu = x.data.mean(axis=axes, dtype=DTYPE)
        xhat = x.data - _chan_view(mu, ndim)
        var = np.square(xhat).mean(axis=axes, dtype=DTYPE)
        mom = DTYPE(state.momentum)
        state.running_mean = mom * state.running_mean + (1 - mom) * mu
        state.running_var = mom * state.running_var + (1 - mom) * (var * m / max(m - 1, 1))
        inv = DTYPE(1.0) / np.sqrt(var + eps)
        xhat *= _chan_view(inv, ndim)
    else:
        mu = state.running_mean
        var = state.running_var
        inv = DTYPE(1.0) / np.sqrt(var + eps)
        xhat = (x.data - _chan_view(mu, ndim)) * _chan_view(inv, ndim)
    y = _chan_view(gamma.data, ndim) * xhat
    y += _chan_view(beta.data, ndim)

    if mode == "train":

        def back(dy: np.ndarray):
            dgamma = (dy * xhat).sum(axis=axes)
            dbeta = dy.sum(axis=axes)
            dxhat = dy * _chan_view(gamma.data, ndim)
            s1 = dxhat.sum(axis=axes)
            s2 = (dxhat * xhat).sum(axis=axes)
            dx = (
                (dxhat - _chan_view(s1 / m, ndim) - xhat * _chan_view(s2 / m, ndim))
                * _chan_view(inv, ndim)
            ).astype(DTYPE)
            return dx, dgamma, dbeta

    else:

        def back(dy: np.ndarray):
            dgamma = (dy * xhat).sum(axis=axes)
            dbeta = dy.sum(axis=axes)
            dx = dy * _chan_view(gamma.data * inv, ndim)
            return dx, dgamma, dbeta

    return _out(tape, y, (x, gamma, beta), back)


# ---------------------------------------------------------------------------
# pointwise and reduction ops
# ---------------------------------------------------------------------------


def relu(x: Tensor, tape: Optional[Tape] = None) -> Tensor:
    mask = x.data > 0
    if _selection_sink is not None:
        _note_selection(np.packbits(mask.reshape(-1)))
    y = np.where(mask, x.data, DTYPE(0.0))

    def back(dy: np.ndarray):
        return (dy * mask,)

    return _out(tape, y, (x,), back)


def add(a: Tensor, b: Tensor, tape: Optional[Tape] = None) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add expects equal shapes, got {tuple(a.shape)} and {tuple(b.shape)}")
    y = a.data + b.data

    def back(dy: np.ndarray):
        return dy, dy

    return _out(tape, y, (a, b), back)


def mul(a: Tensor, b: Tensor, tape: Optional[Tape] = None) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"mul expects equal shapes, got {tuple(a.shape)} and {tuple(b.shape)}")
    y = a.data * b.data

    def back(dy: np.ndarray):
        return dy * b.data, dy * a.data

    return _out(tape, y, (a, b), back)


def sum_all(x: Tensor, tape: Optional[Tape] = None) -> Tensor:
    y = np.asarray(x.data.sum(dtype=DTYPE))

    def back(dy: np.ndarray):
        return (np.broadcast_to(dy, x.shape).astype(DTYPE),)

    return _out(tape, y, (x,), back)


def global_avg_pool(x: Tensor, tape: Optional[Tape] = None) -> Tensor:
    """Mean over all trailing spatial axes of an [N,C,...] tensor."""
    if x.data.ndim < 3:
        raise ValueError(f"global_avg_pool expects [N,C,spatial...], got shape {tuple(x.shape)}")
    axes = tuple(range(2, x.data.ndim))
    count = int(np.prod([x.shape[a] for a in axes]))
    y = x.data.mean(axis=axes, dtype=DTYPE)

    def back(dy: np.ndarray):
        expand = dy.reshape(dy.shape + (1,) * len(axes))
        return (np.broadcast_to(expand / count, x.shape).astype(DTYPE),)

    return _out(tape, y, (x,), back)


def linear(x: Tensor, weight: Tensor, bias: Tensor, tape: Optional[Tape] = None) -> Tensor:
    """Affine map of row vectors: y = x @ weight.T + bias."""
    if x.data.ndim != 2:
        raise ValueError(f"linear expects [N,in], got shape {tuple(x.shape)}")
    out_w, in_w = weight.shape
    if x.shape[1] != in_w:
        raise ValueError(f"linear input width {x.shape[1]} does not match weight width {in_w}")
    if bias.shape != (out_w,):
        raise ValueError(f"bias shape {tuple(bias.shape)} does not match width {out_w}")
    y = x.data @ weight.data.T + bias.data[None, :]

    def back(dy: np.ndarray):
        return dy @ weight.data, dy.T @ x.data, dy.sum(axis=0)

    return _out(tape, y, (x, weight, bias), back)


def softmax_cross_entropy(
    logits: Tensor, labels: np.ndarray, tape: Optional[Tape] = None
) -> tuple[Tensor, np.ndarray]:
    """Mean cross-entropy over the batch; also returns the probabilities."""
    if logits.data.ndim != 2:
        raise ValueError(f"softmax_cross_entropy expects [N,K] logits, got {tuple(logits.shape)}")
    n, k = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match batch size {n}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label out of range [0,{k})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    expv = np.exp(shifted)
    probs = expv / expv.sum(axis=1, keepdims=True)
    logp = shifted - np.log(expv.sum(axis=1, keepdims=True))
    loss = np.asarray(-logp[np.arange(n), labels].mean(dtype=DTYPE))

    def back(dy: np.ndarray):
        dlogits = probs.copy()
        dlogits[np.arange(n), labels] -= DTYPE(1.0)
        dlogits *= dy / DTYPE(n)
        return (dlogits,)

    return _out(tape, loss, (logits,), back), probs


# ---------------------------------------------------------------------------
# set/grouping ops
# ---------------------------------------------------------------------------


def gather_rows(source: Tensor, indices: np.ndarray, tape: Optional[Tape] = None) -> Tensor:
    """out[i,j,:] = source[indices[i,j],:]; indices carry no gradient."""
    if source.data.ndim != 2:
        raise ValueError(f"gather_rows expects a [M,C] source, got shape {tuple(source.shape)}")
    indices = np.asarray(indices)
    if indices.ndim != 2 or not np.issubdtype(indices.dtype, np.integer):
        raise ValueError("indices must be an integer matrix [rows,k]")
    m = source.shape[0]
    if indices.size and (indices.min() < 0 or indices.max() >= m):
        raise ValueError(f"gather index out of range [0,{m})")
    y = source.data[indices]

    def back(dy: np.ndarray):
        c = source.shape[1]
        flat = indices.ravel()
        order = np.argsort(flat, kind="stable")
        sorted_idx = flat[order]
        sorted_dy = dy.reshape(-1, c)[order]
        starts = np.flatnonzero(np.r_[True, np.diff(sorted_idx) != 0])
        sums = np.add.reduceat(sorted_dy, starts, axis=0)
        dsrc = np.zeros((m, c), dtype=DTYPE)
        dsrc[sorted_idx[starts]] = sums
        return (dsrc,)

    return _out(tape, y, (source,), back)


def max_over_set(x: Tensor, tape: Optional[Tape] = None) -> tuple[Tensor, np.ndarray]:
    """Element-wise max over the set axis of [M,k,C]; ties go to the smallest slot.

    Returns the pooled [M,C] tensor and the winning slot per (row, channel).
    The backward pass routes each output gradient only to its winner.
    """
    if x.data.ndim != 3:
        raise ValueError(f"max_over_set expects [M,k,C], got shape {tuple(x.shape)}")
    if x.shape[1] < 1:
        raise ValueError("max_over_set needs at least one set element")
    argmax = x.data.argmax(axis=1).astype(np.int32)
    _note_selection(argmax)
    y = np.take_along_axis(x.data, argmax[:, None, :], axis=1)[:, 0, :]

    def back(dy: np.ndarray):
        dx = np.zeros_like(x.data)
        np.put_along_axis(dx, argmax[:, None, :], dy[:, None, :], axis=1)
        return (dx,)

    return _out(tape, y, (x,), back), argmax


# ---------------------------------------------------------------------------
# layout ops
# ---------------------------------------------------------------------------


def reshape(x: Tensor, shape: Sequence[int], tape: Optional[Tape] = None) -> Tensor:
    shape = tuple(shape)
    y = x.data.reshape(shape)

    def back(dy: np.ndarray):
        return (dy.reshape(x.shape),)

    return _out(tape, y, (x,), back)


def permute(x: Tensor, axes: Sequence[int], tape: Optional[Tape] = None) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(int(i) for i in np.argsort(axes))
    y = np.ascontiguousarray(np.transpose(x.data, axes))

    def back(dy: np.ndarray):
        return (np.ascontiguousarray(np.transpose(dy, inverse)),)

    return _out(tape, y, (x,), back)


def concat_last(parts: Sequence[Tensor], tape: Optional[Tape] = None) -> Tensor:
    """Concatenate along the final axis."""
    if not parts:
        raise ValueError("concat_last needs at least one part")
    lead = parts[0].shape[:-1]
    for p in parts:
        if p.shape[:-1] != lead:
            raise ValueError("concat_last parts must agree on all leading axes")
    widths = [p.shape[-1] for p in parts]
    y = np.concatenate([p.data for p in parts], axis=-1)
    offsets = np.cumsum([0] + widths)

    def back(dy: np.ndarray):
        return tuple(dy[..., offsets[i] : offsets[i + 1]] for i in range(len(parts)))

    return _out(tape, y, tuple(parts), back)


def expand_rows(x: Tensor, k: int, tape: Optional[Tape] = None) -> Tensor:
    """Repeat each row of [M,C] along a new middle axis: result [M,k,C]."""
    if x.data.ndim != 2:
        raise ValueError(f"expand_rows expects [M,C], got shape {tuple(x.shape)}")
    if k < 1:
        raise ValueError("k must be positive")
    m, c = x.shape
    y = np.broadcast_to(x.data[:, None, :], (m, k, c))

    def back(dy: np.ndarray):
        return (dy.sum(axis=1),)

    return _out(tape, y, (x,), back)

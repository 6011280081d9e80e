"""Dense float32 tensors with a gradient tape.

The engine is deliberately small: tensors are immutable-by-convention
numpy arrays plus gradient metadata, and differentiation happens by
replaying an explicit :class:`Tape` in reverse. Only the operations the
toy network needs are provided (see :mod:`cpnet.ops`).
"""

from __future__ import annotations

import struct
from typing import Callable, Optional, Sequence

import numpy as np

DTYPE = np.float32

CPT1_MAGIC = b"CPT1"


def as_f32(values) -> np.ndarray:
    """Coerce array-like input to a contiguous float32 array.

    0-d inputs stay 0-d (they are contiguous by definition).
    """
    arr = np.asarray(values, dtype=DTYPE)
    if not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    return arr


class Tensor:
    """A dense rank-N float32 array with optional gradient storage.

    Data is treated as frozen after construction; training code mutates
    parameter values only through the optimizer's update step.
    """

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, values, requires_grad: bool = False, name: str = ""):
        self.data = as_f32(values)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, delta: np.ndarray) -> None:
        """Add ``delta`` into this tensor's gradient buffer."""
        if delta.shape != self.data.shape:
            raise ValueError(
                f"gradient shape {delta.shape} does not match tensor shape {self.data.shape}"
            )
        if self.grad is None:
            self.grad = delta.astype(DTYPE, copy=True)
        else:
            self.grad += delta

    def detach(self) -> "Tensor":
        """A view of the same values with no gradient tracking."""
        return Tensor(self.data, requires_grad=False, name=self.name)

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={tuple(self.shape)}, requires_grad={self.requires_grad})"


class TapeRecord:
    """One recorded operation: output handle, input handles, backward rule.

    ``backward`` maps the gradient w.r.t. the output to a sequence of
    gradients w.r.t. the inputs (``None`` for inputs that take none).
    """

    __slots__ = ("output", "inputs", "backward")

    def __init__(
        self,
        output: Tensor,
        inputs: Sequence[Tensor],
        backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
    ):
        self.output = output
        self.inputs = tuple(inputs)
        self.backward = backward


class Tape:
    """Ordered record of operations for one reverse-mode pass.

    Records are appended in execution order, which is a topological
    order by construction. A tape is single-owner: record and replay it
    from one logical thread, and reset it before reuse.
    """

    def __init__(self):
        self.records: list[TapeRecord] = []
        self._consumed = False

    def record(self, output: Tensor, inputs: Sequence[Tensor], backward) -> None:
        if self._consumed:
            raise RuntimeError("tape already consumed by backward(); call reset() first")
        self.records.append(TapeRecord(output, inputs, backward))

    def reset(self) -> None:
        self.records.clear()
        self._consumed = False

    def __len__(self) -> int:
        return len(self.records)


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(tensor) into ``.grad`` of every tracked tensor.

    The tape is walked once in reverse; gradients accumulate additively,
    so callers zero parameter gradients between steps. The tape is
    marked consumed afterwards.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward expects a scalar loss, got shape {tuple(loss.shape)}")
    if not tape.records:
        raise ValueError("backward expects a nonempty tape")
    if tape._consumed:
        raise RuntimeError("tape already consumed by backward(); call reset() first")

    # Gradients keyed by tensor identity; seeded with d(loss)/d(loss) = 1.
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for rec in reversed(tape.records):
        for tensor in rec.inputs:
            leaves.setdefault(id(tensor), tensor)
        out_grad = grads.pop(id(rec.output), None)
        if out_grad is None:
            continue
        leaves.pop(id(rec.output), None)
        if rec.output.requires_grad:
            rec.output.accumulate_grad(out_grad)
        in_grads = rec.backward(out_grad)
        for tensor, g in zip(rec.inputs, in_grads):
            if g is None:
                continue
            g = np.asarray(g, dtype=DTYPE)
            prev = grads.get(id(tensor))
            if prev is None:
                grads[id(tensor)] = g
            else:
                prev += g
    # Entries still queued belong to leaf tensors (never any record's output).
    for tensor_id, g in grads.items():
        t = leaves.get(tensor_id)
        if t is not None and t.requires_grad:
            t.accumulate_grad(g)
    tape._consumed = True


# ---------------------------------------------------------------------------
# CPT1 container: named float32 tensors in a flat little-endian binary file.
# Layout per entry: u32 name length, UTF-8 name, magic "CPT1", u32 rank,
# rank x u32 extents, row-major f32 payload.
# ---------------------------------------------------------------------------


def _write_tensor_record(fh, arr: np.ndarray) -> None:
    arr = as_f32(arr)
    fh.write(CPT1_MAGIC)
    fh.write(struct.pack("<I", arr.ndim))
    for extent in arr.shape:
        fh.write(struct.pack("<I", extent))
    fh.write(arr.astype("<f4", copy=False).tobytes(order="C"))


def _read_tensor_record(fh) -> np.ndarray:
    magic = fh.read(4)
    if magic != CPT1_MAGIC:
        raise ValueError(f"bad tensor record magic {magic!r}, expected {CPT1_MAGIC!r}")
    (rank,) = struct.unpack("<I", fh.read(4))
    shape = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(rank))
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    payload = fh.read(4 * count)
    if len(payload) != 4 * count:
        raise ValueError("truncated tensor payload")
    arr = np.frombuffer(payload, dtype="<f4").astype(DTYPE).reshape(shape)
    return arr


def save_tensors(path, tensors: dict) -> None:
    """Write named tensors to a CPT1 container file."""
    with open(path, "wb") as fh:
        for name, value in tensors.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            data = value.data if isinstance(value, Tensor) else value
            _write_tensor_record(fh, np.asarray(data))


def load_tensors(path) -> dict[str, np.ndarray]:
    """Read a CPT1 container back into a name -> float32 array dict."""
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        while True:
            head = fh.read(4)
            if not head:
                break
            if len(head) != 4:
                raise ValueError("truncated entry header")
            (name_len,) = struct.unpack("<I", head)
            name = fh.read(name_len).decode("utf-8")
            out[name] = _read_tensor_record(fh)
    return out

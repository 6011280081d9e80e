"""Moving-square toy videos and their binary file format.

Each sample is a 4-frame 32x32 binary video of a single 2x2 white
square translating 7-9 pixels per step in one of four directions, with
the whole trajectory kept inside the canvas. Splits are exactly
label-balanced and fully determined by the seed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

LABELS = ("left", "right", "up", "down")
NUM_FRAMES = 4
CANVAS = 32
SQUARE = 2
STEP_MIN, STEP_MAX = 7, 9
TRAIN_COUNT, VAL_COUNT = 1000, 200

CPDS_MAGIC = b"CPDS"


@dataclass
class ToySample:
    frames: np.ndarray  # [4,32,32] uint8 in {0,1}
    label: int


@dataclass
class ToyDataset:
    train_frames: np.ndarray
    train_labels: np.ndarray
    val_frames: np.ndarray
    val_labels: np.ndarray
    seed: int

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        if name == "train":
            return self.train_frames, self.train_labels
        if name == "val":
            return self.val_frames, self.val_labels
        raise ValueError(f"unknown split {name!r}")

    def samples(self, name: str):
        frames, labels = self.split(name)
        for f, lbl in zip(frames, labels):
            yield ToySample(frames=f, label=int(lbl))


def _render_split(rng: np.random.Generator, count: int) -> tuple[np.ndarray, np.ndarray]:
    if count % len(LABELS) != 0:
        raise ValueError(f"split size {count} cannot balance {len(LABELS)} labels")
    labels = np.repeat(np.arange(len(LABELS), dtype=np.uint8), count // len(LABELS))
    rng.shuffle(labels)
    frames = np.zeros((count, NUM_FRAMES, CANVAS, CANVAS), dtype=np.uint8)
    hi = CANVAS - SQUARE  # largest valid top-left coordinate, inclusive
    for i, label in enumerate(labels):
        steps = rng.integers(STEP_MIN, STEP_MAX + 1, size=NUM_FRAMES - 1)
        travel = int(steps.sum())
        cross = int(rng.integers(0, hi + 1))
        # Moving coordinate starts so the whole trajectory stays in-canvas.
        if label in (1, 3):  # right, down: coordinate increases
            start = int(rng.integers(0, hi - travel + 1))
            signed = steps
        else:  # left, up: coordinate decreases
            start = int(rng.integers(travel, hi + 1))
            signed = -steps
        along = start + np.concatenate([[0], np.cumsum(signed)])
        for t in range(NUM_FRAMES):
            if label in (0, 1):  # horizontal motion, fixed row
                r, c = cross, int(along[t])
            else:  # vertical motion, fixed column
                r, c = int(along[t]), cross
            frames[i, t, r : r + SQUARE, c : c + SQUARE] = 1
    return frames, labels


def generate_toy_dataset(seed: int) -> ToyDataset:
    """Deterministically generate the 1000/200 label-balanced dataset."""
    rng = np.random.default_rng(seed)
    train_frames, train_labels = _render_split(rng, TRAIN_COUNT)
    val_frames, val_labels = _render_split(rng, VAL_COUNT)
    return ToyDataset(
        train_frames=train_frames,
        train_labels=train_labels,
        val_frames=val_frames,
        val_labels=val_labels,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# CPDS file format: magic, u32 train count, u32 val count, then per sample
# a u8 label followed by 4*32*32 bytes of 0/1 pixels, train split first.
# ---------------------------------------------------------------------------


def save_cpds(path, dataset: ToyDataset) -> None:
    with open(path, "wb") as fh:
        fh.write(CPDS_MAGIC)
        fh.write(struct.pack("<II", len(dataset.train_labels), len(dataset.val_labels)))
        for frames, labels in (
            (dataset.train_frames, dataset.train_labels),
            (dataset.val_frames, dataset.val_labels),
        ):
            for f, lbl in zip(frames, labels):
                fh.write(struct.pack("<B", int(lbl)))
                fh.write(f.astype(np.uint8).tobytes(order="C"))


def load_cpds(path) -> ToyDataset:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CPDS_MAGIC:
            raise ValueError(f"bad dataset magic {magic!r}, expected {CPDS_MAGIC!r}")
        n_train, n_val = struct.unpack("<II", fh.read(8))
        splits = []
        for count in (n_train, n_val):
            frames = np.zeros((count, NUM_FRAMES, CANVAS, CANVAS), dtype=np.uint8)
            labels = np.zeros(count, dtype=np.uint8)
            sample_bytes = NUM_FRAMES * CANVAS * CANVAS
            for i in range(count):
                head = fh.read(1)
                if len(head) != 1:
                    raise ValueError("truncated sample header")
                labels[i] = head[0]
                if labels[i] >= len(LABELS):
                    raise ValueError(f"label {labels[i]} out of range")
                payload = fh.read(sample_bytes)
                if len(payload) != sample_bytes:
                    raise ValueError("truncated sample payload")
                pix = np.frombuffer(payload, dtype=np.uint8)
                if pix.max(initial=0) > 1:
                    raise ValueError("pixel values must be 0 or 1")
                frames[i] = pix.reshape(NUM_FRAMES, CANVAS, CANVAS)
            splits.append((frames, labels))
        if fh.read(1):
            raise ValueError("trailing bytes after last sample")
    return ToyDataset(
        train_frames=splits[0][0],
        train_labels=splits[0][1],
        val_frames=splits[1][0],
        val_labels=splits[1][1],
        seed=-1,
    )

"""Allocator tuning for allocation-heavy numeric loops.

glibc serves large buffers through mmap and returns them on free, so a
training step that allocates tens of fresh multi-megabyte arrays pays
page-fault costs on every operation. Raising the mmap threshold and
disabling trim keeps those buffers on the heap for reuse. Called from
the training loop, the bench harness, and the CLI; harmless elsewhere.
"""

from __future__ import annotations

import ctypes

_done = False

_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3


def tune_allocator() -> None:
    global _done
    if _done:
        return
    _done = True
    try:
        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(_M_MMAP_THRESHOLD, 1 << 30)
        libc.mallopt(_M_TRIM_THRESHOLD, -1)
    except (OSError, AttributeError):
        pass  # non-glibc platform; purely a performance knob

"""Sink + local-window causal attention masking (StreamingLLM-style baseline).

Position j may attend to the first `sink_size` positions plus the most recent
`local_size` positions (itself included). Keys and values stay cached for the
whole sequence; masking only restricts which columns enter the softmax, so
the replay gate can still recover its aligned-column score from the cache
when the mask hides it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class AttentionMask:
    sink_size: int
    local_size: int

    def __post_init__(self):
        if self.sink_size < 0:
            raise ValueError("sink_size must be >= 0")
        if self.local_size < 1:
            raise ValueError("local_size must be >= 1")

    def contains(self, j: int, p: int) -> bool:
        """Whether position j may attend to position p."""
        return 0 <= p <= j and (p < self.sink_size or p > j - self.local_size)

    def covers_all(self, j: int) -> bool:
        """True when the allowed set at j is the full causal prefix [0, j]."""
        return self.sink_size >= j + 1 or self.local_size >= j + 1 or (
            self.sink_size >= j - self.local_size + 1
        )


def allowed_positions(j: int, mask: AttentionMask) -> np.ndarray:
    """Sorted indices position j attends to: sink prefix + local window."""
    if j < 0:
        raise ValueError("position must be >= 0")
    sink_end = min(mask.sink_size, j + 1)
    window_start = max(j - mask.local_size + 1, 0)
    if window_start <= sink_end:
        return np.arange(0, j + 1, dtype=np.int64)
    return np.concatenate(
        [np.arange(0, sink_end, dtype=np.int64), np.arange(window_start, j + 1, dtype=np.int64)]
    )


def allowed_count(j: int, mask: AttentionMask) -> int:
    """len(allowed_positions(j, mask)) without materializing the array."""
    sink_end = min(mask.sink_size, j + 1)
    window_start = max(j - mask.local_size + 1, 0)
    if window_start <= sink_end:
        return j + 1
    return sink_end + (j + 1 - window_start)

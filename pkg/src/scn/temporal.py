"""Temporal intervals, the multi-scale candidate grid, and NMS."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np


class Proposal(NamedTuple):
    """Half-open frame interval ``[start, end)``."""

    start: int
    end: int

    @property
    def length(self) -> int:
        return self.end - self.start

    def is_valid(self, n_frames: int | None = None) -> bool:
        if self.start < 0 or self.end <= self.start:
            return False
        return n_frames is None or self.end <= n_frames


def iou(a: Sequence[int], b: Sequence[int]) -> float:
    inter = min(a[1], b[1]) - max(a[0], b[0])
    if inter <= 0:
        return 0.0
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    return inter / union


@dataclass(frozen=True, eq=False)
class CandidateGrid:
    """Candidates ending at every step ``t`` for every ratio ``r_k``.

    ``starts[t, k]`` and ``ends[t, k]`` hold the raw interval; cells where
    ``valid[t, k]`` is False are never selected or scored in losses.
    """

    n_frames: int
    ratios: tuple[float, ...]
    starts: np.ndarray
    ends: np.ndarray
    valid: np.ndarray

    @property
    def n_scales(self) -> int:
        return len(self.ratios)

    def proposal(self, t: int, k: int) -> Proposal:
        return Proposal(int(self.starts[t, k]), int(self.ends[t, k]))

    def valid_cells(self) -> list[tuple[int, int]]:
        return [(int(t), int(k)) for t, k in zip(*np.nonzero(self.valid))]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, CandidateGrid):
            return NotImplemented
        return (
            self.n_frames == other.n_frames
            and self.ratios == other.ratios
            and np.array_equal(self.starts, other.starts)
            and np.array_equal(self.ends, other.ends)
            and np.array_equal(self.valid, other.valid)
        )


def enumerate_candidates(n_frames: int, ratios: Sequence[float]) -> CandidateGrid:
    """Build the ``n_frames x len(ratios)`` grid of candidates.

    Step ``t`` (0-based) ends every candidate at ``t + 1``; the start is
    ``round(t + 1 - r * n_frames)``. Negative starts are discarded, not
    clamped, so each ratio keeps its exact scale.
    """
    if not ratios:
        raise ValueError("ratios must be a non-empty list")
    if n_frames < 1:
        raise ValueError(f"n_frames must be >= 1, got {n_frames}")
    for r in ratios:
        if not 0.0 < r <= 1.0:
            raise ValueError(f"ratio {r} outside (0, 1]")
    ends = np.broadcast_to(np.arange(1, n_frames + 1)[:, None], (n_frames, len(ratios)))
    widths = np.asarray(ratios, dtype=np.float64) * n_frames
    # np.round is half-to-even; use half-away-from-zero for predictable boundaries
    raw = ends - widths[None, :]
    starts = (np.sign(raw) * np.floor(np.abs(raw) + 0.5)).astype(np.int64)
    ends = ends.astype(np.int64).copy()
    valid = (starts >= 0) & (ends - starts >= 1)
    for arr in (starts, ends, valid):
        arr.setflags(write=False)
    return CandidateGrid(n_frames, tuple(float(r) for r in ratios), starts, ends, valid)


def nms_filter(chosen: Sequence[int], pool: list, threshold: float) -> list:
    """Drop ``chosen`` and everything overlapping it by more than ``threshold``.

    Pool items are bare intervals or tuples whose first element is the
    interval, e.g. ``(proposal, score)``; order is preserved.
    """
    return [item for item in pool if iou(_interval(item), chosen) <= threshold]


def _interval(item) -> Sequence[int]:
    return item[0] if isinstance(item[0], (tuple, list, np.ndarray)) else item

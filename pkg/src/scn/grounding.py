"""Single-pass proposal scoring and exploit/explore top-K selection."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .backbone import SCNModel
from .temporal import CandidateGrid, Proposal, iou, nms_filter


@dataclass
class SelectionResult:
    cells: list[tuple[int, int]]
    proposals: list[Proposal]
    confidences: list[float]
    provenance: list[str]  # "greedy" or "random" per pick
    refilled: list[bool] = field(default_factory=list)

    @property
    def random_picks(self) -> int:
        return self.provenance.count("random")


def _batched(x: torch.Tensor, ndim: int) -> tuple[torch.Tensor, bool]:
    return (x.unsqueeze(0), True) if x.dim() == ndim else (x, False)


def fuse_video_query(
    model: SCNModel,
    video: torch.Tensor,
    query_ids: torch.Tensor,
    video_padding: torch.Tensor | None = None,
) -> torch.Tensor:
    """Cross-modal frame representations, ``(batch, n_v, d_model)``.

    Accepts unbatched ``(n_v, d)`` / ``(n_q,)`` inputs too.
    """
    video, squeeze = _batched(video, 2)
    query_ids, _ = _batched(query_ids, 1)
    q, q_pad = model.embed_tokens(query_ids)
    memory = model.query_encoder.encode(q, q_pad)
    c = model.video_decoder.decode(model.project_video(video), memory, video_padding, q_pad)
    return c[0] if squeeze else c


def score_candidates(model: SCNModel, c: torch.Tensor) -> torch.Tensor:
    """Sigmoid confidence for every (time step, scale) cell in one pass."""
    if c.shape[-1] != model.dims.d_model:
        raise ValueError(f"representation width {c.shape[-1]} != d_model {model.dims.d_model}")
    return torch.sigmoid(model.score_head(c))


def exploration_probability(n_update: int, lambda1: float, lambda2: float) -> float:
    if lambda2 <= 0:
        raise ValueError(f"lambda2 must be positive, got {lambda2}")
    if n_update < 0:
        raise ValueError("n_update must be >= 0")
    return lambda1 * math.exp(-n_update / lambda2)


def ranked_cells(grid: CandidateGrid, scores: np.ndarray) -> list[tuple[int, int]]:
    """Valid cells by descending score; ties go to earlier start, then shorter."""
    cells = grid.valid_cells()
    return sorted(
        cells,
        key=lambda c: (-float(scores[c]), int(grid.starts[c]), int(grid.ends[c] - grid.starts[c])),
    )


def select_top_k(
    grid: CandidateGrid,
    scores: np.ndarray,
    k: int,
    p: float,
    nms_threshold: float,
    rng: np.random.Generator | None = None,
) -> SelectionResult:
    """Pick ``k`` cells, each at random with probability ``p`` else greedily.

    After every pick, candidates overlapping it by more than
    ``nms_threshold`` leave the pool. If the pool empties early it is
    refilled with the suppressed cells in score order and those picks are
    flagged. ``rng`` is never touched when ``p == 0``.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must be in [0, 1], got {p}")
    if p > 0 and rng is None:
        raise ValueError("an rng is required when p > 0")
    order = ranked_cells(grid, scores)
    if len(order) < k:
        raise ValueError(f"only {len(order)} valid candidates for k={k}")

    pool = [(grid.proposal(*c), c) for c in order]
    picked: set[tuple[int, int]] = set()
    result = SelectionResult([], [], [], [], [])
    refilling = False
    for _ in range(k):
        if not pool:
            refilling = True
            pool = [(grid.proposal(*c), c) for c in order if c not in picked]
        if p > 0 and (p >= 1.0 or rng.random() < p):
            idx, how = int(rng.integers(len(pool))), "random"
        else:
            idx, how = 0, "greedy"
        prop, cell = pool.pop(idx)
        picked.add(cell)
        result.cells.append(cell)
        result.proposals.append(prop)
        result.confidences.append(float(scores[cell]))
        result.provenance.append(how)
        result.refilled.append(refilling)
        pool = nms_filter(prop, pool, nms_threshold)
    return result


def greedy_nms(
    grid: CandidateGrid, scores: np.ndarray, n: int, nms_threshold: float
) -> list[tuple[Proposal, float]]:
    """Up to ``n`` NMS survivors in descending confidence; no refill."""
    pool = [(grid.proposal(*c), float(scores[c])) for c in ranked_cells(grid, scores)]
    out = []
    while pool and len(out) < n:
        best = pool.pop(0)
        out.append(best)
        pool = nms_filter(best[0], pool, nms_threshold)
    return out


__all__ = [
    "SelectionResult", "exploration_probability", "fuse_video_query", "greedy_nms",
    "iou", "ranked_cells", "score_candidates", "select_top_k",
]

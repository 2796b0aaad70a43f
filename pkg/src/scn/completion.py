"""Masked-query semantic completion over proposal features."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import SCNModel
from .corpus import BOS, MASK


@dataclass(frozen=True)
class MaskedQuery:
    tokens: tuple[int, ...]  # MASK at every masked position
    positions: tuple[int, ...]
    originals: tuple[int, ...]

    @property
    def targets(self) -> tuple[int, ...]:
        """Per-position target ids for the loss (original ids)."""
        out = list(self.tokens)
        for pos, tok in zip(self.positions, self.originals):
            out[pos] = tok
        return tuple(out)


def mask_count(n_tokens: int, fraction: float) -> int:
    return min(n_tokens, max(1, math.floor(fraction * n_tokens + 0.5)))


def mask_query(
    tokens: Sequence[int],
    importance: Sequence[int],
    fraction: float,
    rng: np.random.Generator,
    important_weight: float = 4.0,
) -> MaskedQuery:
    """Mask ``max(1, round(fraction * n))`` positions drawn without replacement.

    Important tokens are drawn with weight ``important_weight``, fillers with 1.
    """
    n = len(tokens)
    if n < 1:
        raise ValueError("cannot mask an empty query")
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"mask fraction must be in (0, 1], got {fraction}")
    weights = np.where(np.asarray(importance, dtype=bool), important_weight, 1.0)
    m = mask_count(n, fraction)
    chosen = rng.choice(n, size=m, replace=False, p=weights / weights.sum())
    positions = tuple(sorted(int(i) for i in chosen))
    masked = list(int(t) for t in tokens)
    originals = tuple(masked[i] for i in positions)
    for i in positions:
        masked[i] = MASK
    return MaskedQuery(tuple(masked), positions, originals)


def captioning_query(tokens: Sequence[int]) -> MaskedQuery:
    """Unmasked teacher-forcing view: input is BOS plus the shifted query,
    every position predicts the next word."""
    tokens = [int(t) for t in tokens]
    inputs = (BOS, *tokens[:-1])
    # positions/originals describe the targets; ``tokens`` is the decoder input
    return MaskedQuery(inputs, tuple(range(len(tokens))), tuple(tokens))


def reconstruct_energies(
    model: SCNModel,
    query_ids: torch.Tensor,
    proposal_features: torch.Tensor,
    proposal_padding: torch.Tensor | None = None,
    causal: bool = False,
) -> torch.Tensor:
    """Vocabulary energies for every query position given a proposal.

    ``query_ids`` are the (masked) decoder inputs. Shapes ``(B, n_q)`` and
    ``(B, L, d)``, or unbatched ``(n_q,)`` and ``(L, d)``.
    """
    squeeze = query_ids.dim() == 1
    if squeeze:
        query_ids, proposal_features = query_ids[None], proposal_features[None]
    if proposal_features.shape[1] == 0:
        raise ValueError("empty proposal slice")
    memory = model.proposal_encoder.encode(model.project_video(proposal_features), proposal_padding)
    q, q_pad = model.embed_tokens(query_ids)
    f = model.query_decoder.decode(q, memory, q_pad, proposal_padding, causal)
    energies = model.vocab_head(f)
    return energies[0] if squeeze else energies


def masked_nll(energies: torch.Tensor, targets: torch.Tensor, target_mask: torch.Tensor) -> torch.Tensor:
    """Sum over ``target_mask`` positions of ``-log softmax(energies)[target]``.

    Reduces the last two axes ``(n_q, n_w)``; leading axes are kept.
    """
    logp = F.log_softmax(energies, dim=-1)
    picked = logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    return -(picked * target_mask.to(picked.dtype)).sum(-1)


def reconstruction_loss(energies: torch.Tensor, masked: MaskedQuery) -> torch.Tensor:
    if not masked.positions:
        raise ValueError("no masked positions")
    if energies.shape[0] != len(masked.tokens):
        raise ValueError(f"{energies.shape[0]} energy rows for {len(masked.tokens)} tokens")
    targets = torch.zeros(energies.shape[0], dtype=torch.long)
    weight = torch.zeros(energies.shape[0], dtype=torch.bool)
    for pos, tok in zip(masked.positions, masked.originals):
        targets[pos] = tok
        weight[pos] = True
    return masked_nll(energies, targets, weight)

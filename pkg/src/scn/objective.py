"""Rewards, rank and multi-task losses, and the weakly supervised training loop."""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .backbone import SCNModel, init_parameters, save_checkpoint
from .completion import MaskedQuery, captioning_query, mask_query, masked_nll, reconstruct_energies
from .config import RECALL_M, RECALL_N, RunConfig
from .corpus import GT_GUARD, PAD, QueryRecord, VideoRecord, Vocabulary, build_vocabulary
from .grounding import exploration_probability, fuse_video_query, score_candidates, select_top_k
from .temporal import CandidateGrid, enumerate_candidates

log = logging.getLogger(__name__)

Pair = tuple[VideoRecord, QueryRecord]
METRIC_FIELDS = ["step", "epoch", "loss", "rec_loss", "rank_loss", "p", "random_picks", "lr"]


def recall_column(n: int, m: float) -> str:
    return f"R@{n},IoU={m}"


def assign_rewards(rec_losses: Sequence[float], mode: str = "ladder") -> np.ndarray:
    """Reward per proposal, aligned with the input order.

    ``ladder``: the j-th lowest loss earns ``1 - j / (K - 1)``.
    ``onehot``: 1 for the lowest loss, 0 elsewhere. Ties keep selection order.
    """
    losses = np.asarray(rec_losses, dtype=np.float64)
    k = losses.size
    if k < 2:
        raise ValueError("reward assignment needs at least two proposals")
    if np.isnan(losses).any():
        raise ValueError(f"NaN reconstruction loss in {losses.tolist()}")
    order = np.argsort(losses, kind="stable")
    rewards = np.zeros(k)
    if mode == "ladder":
        rewards[order] = np.arange(k - 1, -1, -1) / (k - 1)
    elif mode == "onehot":
        rewards[order[0]] = 1.0
    else:
        raise ValueError(f"unknown reward mode {mode!r}")
    return rewards


def rank_loss(confidences, rewards) -> torch.Tensor:
    """``mean_k(-R_k * log softmax(S)_k)`` over the last axis."""
    s = torch.as_tensor(confidences)
    r = torch.as_tensor(rewards, dtype=s.dtype)
    if s.shape != r.shape:
        raise ValueError(f"confidences {tuple(s.shape)} vs rewards {tuple(r.shape)}")
    logp = torch.log_softmax(s, dim=-1)
    total = torch.softmax(s.detach().double(), dim=-1).sum(-1)
    assert torch.allclose(total, torch.ones_like(total), atol=1e-8, rtol=0), "softmax does not normalise"
    return -(r * logp).mean(-1)


def multi_task_loss(rec_losses, confidences, rewards, beta: float) -> torch.Tensor:
    rec = torch.as_tensor(rec_losses)
    return rec.mean(-1) + beta * rank_loss(confidences, rewards)


def learning_rate(step: int, warmup: int, lr_max: float) -> float:
    """Linear warm-up to ``lr_max`` at ``warmup``, then inverse-sqrt decay."""
    if warmup < 1:
        raise ValueError(f"warmup must be >= 1, got {warmup}")
    if step < 1:
        raise ValueError(f"step must be >= 1, got {step}")
    return lr_max * min(step / warmup, math.sqrt(warmup / step))


# -- batching -----------------------------------------------------------------


def pad_features(arrays: Sequence[np.ndarray], dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack ``(n_i, d)`` arrays into ``(B, max n, d)`` plus a padding mask."""
    n_max = max(a.shape[0] for a in arrays)
    out = torch.zeros(len(arrays), n_max, arrays[0].shape[1], dtype=dtype)
    pad = torch.ones(len(arrays), n_max, dtype=torch.bool)
    for i, a in enumerate(arrays):
        out[i, : a.shape[0]] = torch.as_tensor(np.asarray(a), dtype=dtype)
        pad[i, : a.shape[0]] = False
    return out, pad


def pad_tokens(seqs: Sequence[Sequence[int]]) -> torch.Tensor:
    n_max = max(len(s) for s in seqs)
    out = torch.full((len(seqs), n_max), PAD, dtype=torch.long)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = torch.as_tensor(list(s), dtype=torch.long)
    return out


_GRID_CACHE: dict[tuple[int, tuple[float, ...]], CandidateGrid] = {}


def candidate_grid(n_frames: int, ratios: Sequence[float]) -> CandidateGrid:
    key = (n_frames, tuple(ratios))
    if key not in _GRID_CACHE:
        _GRID_CACHE[key] = enumerate_candidates(n_frames, ratios)
    return _GRID_CACHE[key]


def build_query(tokens: Sequence[int], importance: Sequence[int], config: RunConfig,
                rng: np.random.Generator) -> MaskedQuery:
    if config.rec_mode == "captioning":
        return captioning_query(tokens)
    return mask_query(tokens, importance, config.mask_fraction, rng, config.important_weight)


class NonFiniteLoss(FloatingPointError):
    def __init__(self, rows: list[int], detail: str):
        super().__init__(detail)
        self.rows = rows


@dataclass
class PairLosses:
    """Per-pair intermediate values of one forward pass."""

    loss: torch.Tensor  # (B,)
    rec: torch.Tensor  # (B, K)
    rank: torch.Tensor  # (B,)
    confidences: torch.Tensor  # (B, K)
    rewards: torch.Tensor  # (B, K)
    selections: list
    masks: list[MaskedQuery]


def forward_losses(
    model: SCNModel,
    videos: Sequence[np.ndarray],
    token_ids: Sequence[Sequence[int]],
    importance: Sequence[Sequence[int]],
    config: RunConfig,
    p: float,
    rng: np.random.Generator | None,
    selections: list | None = None,
    masks: list[MaskedQuery] | None = None,
) -> PairLosses:
    """Full forward for a batch: fuse, score, select, complete, reward.

    Passing ``selections`` and ``masks`` freezes the discrete choices, which
    makes the loss a smooth function of the parameters (used by gradient
    checks).
    """
    dtype = model.input_proj.weight.dtype
    feats, vpad = pad_features(videos, dtype)
    ids = pad_tokens(token_ids)
    c = fuse_video_query(model, feats, ids, vpad)
    scores = score_candidates(model, c)

    if selections is None:
        selections = []
        for b, v in enumerate(videos):
            grid = candidate_grid(v.shape[0], config.ratios)
            sc = scores[b, : v.shape[0]].detach().cpu().numpy()
            selections.append(select_top_k(grid, sc, config.top_k, p, config.nms_threshold, rng))
    if masks is None:
        masks = [build_query(t, imp, config, rng) for t, imp in zip(token_ids, importance)]

    k = config.top_k
    b_idx = torch.arange(len(videos)).repeat_interleave(k)
    t_idx = torch.tensor([cell[0] for sel in selections for cell in sel.cells])
    s_idx = torch.tensor([cell[1] for sel in selections for cell in sel.cells])
    confidences = scores[b_idx, t_idx, s_idx].view(len(videos), k)

    slices, dec_in, targets, tmask = [], [], [], []
    for v, sel, mq in zip(videos, selections, masks):
        flags = [False] * len(mq.tokens)
        for pos in mq.positions:
            flags[pos] = True
        for prop in sel.proposals:
            slices.append(v[prop.start : prop.end])
            dec_in.append(mq.tokens)
            targets.append(mq.targets if config.rec_mode == "masked" else mq.originals)
            tmask.append(flags)
    pfeats, ppad = pad_features(slices, dtype)
    energies = reconstruct_energies(model, pad_tokens(dec_in), pfeats, ppad,
                                    causal=config.rec_mode == "captioning")
    tgt = pad_tokens(targets)
    tm = torch.zeros_like(tgt, dtype=torch.bool)
    for i, flags in enumerate(tmask):
        tm[i, : len(flags)] = torch.tensor(flags)
    rec = masked_nll(energies, tgt, tm).view(len(videos), k)
    finite = torch.isfinite(rec.detach()).all(-1)
    if not finite.all():
        rows = (~finite).nonzero().flatten().tolist()
        raise NonFiniteLoss(rows, f"non-finite reconstruction loss {rec.detach()[rows].tolist()}")

    rewards = torch.as_tensor(
        np.stack([assign_rewards(r, config.reward_mode) for r in rec.detach().cpu().numpy()]),
        dtype=dtype,
    )
    rank = rank_loss(confidences, rewards)
    loss = rec.mean(-1) + config.beta * rank
    return PairLosses(loss, rec, rank, confidences, rewards, selections, masks)


# -- training ---------------------------------------------------------------


@dataclass
class TrainState:
    model: SCNModel
    optimizer: torch.optim.Optimizer
    vocab: Vocabulary
    config: RunConfig
    rng: np.random.Generator
    torch_rng: torch.Tensor
    n_update: int = 0
    history: list[dict] = field(default_factory=list)


def init_state(config: RunConfig, vocab: Vocabulary) -> TrainState:
    model = init_parameters(config.seed, config.model_dims(len(vocab)))
    optimizer = torch.optim.Adam(model.parameters(), lr=learning_rate(1, config.warmup, config.lr_max))
    gen = torch.Generator().manual_seed(config.seed)
    return TrainState(
        model=model, optimizer=optimizer, vocab=vocab, config=config,
        rng=np.random.default_rng([config.seed, 3]), torch_rng=gen.get_state(),
    )


def clone_state(state: TrainState) -> TrainState:
    model = copy.deepcopy(state.model)
    optimizer = type(state.optimizer)(model.parameters(), **state.optimizer.defaults)
    optimizer.load_state_dict(copy.deepcopy(state.optimizer.state_dict()))
    return TrainState(
        model=model, optimizer=optimizer, vocab=state.vocab, config=state.config,
        rng=copy.deepcopy(state.rng), torch_rng=state.torch_rng.clone(),
        n_update=state.n_update, history=list(state.history),
    )


def train_step(batch: Sequence[Pair], state: TrainState) -> dict:
    """One optimizer update on ``batch``; ground truth is never read."""
    cfg = state.config
    with GT_GUARD.watching(strict=True):
        videos = [v.features for v, _ in batch]
        token_ids = [state.vocab.encode(q.tokens) for _, q in batch]
        importance = [q.importance for _, q in batch]
        p = exploration_probability(state.n_update, cfg.lambda1, cfg.lambda2)

        model = state.model
        model.train()
        saved = torch.get_rng_state()
        torch.set_rng_state(state.torch_rng)
        try:
            try:
                out = forward_losses(model, videos, token_ids, importance, cfg, p, state.rng)
            except NonFiniteLoss as exc:
                bad = [batch[i][1].video_id for i in exc.rows]
                raise FloatingPointError(
                    f"non-finite loss at update {state.n_update}; offending pairs: {bad}; {exc}"
                ) from None
            loss = out.loss.mean()
            if not torch.isfinite(loss):
                bad = [q.video_id for (_, q), l in zip(batch, out.loss) if not torch.isfinite(l)]
                raise FloatingPointError(
                    f"non-finite loss at update {state.n_update}; offending pairs: {bad}; "
                    f"rec={out.rec.tolist()} confidences={out.confidences.tolist()}"
                )
            lr = learning_rate(state.n_update + 1, cfg.warmup, cfg.lr_max)
            for group in state.optimizer.param_groups:
                group["lr"] = lr
            state.optimizer.zero_grad()
            loss.backward()
            if cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            state.optimizer.step()
            state.torch_rng = torch.get_rng_state()
        finally:
            torch.set_rng_state(saved)
        state.n_update += 1

    metrics = {
        "step": state.n_update,
        "loss": float(loss.detach()),
        "rec_loss": float(out.rec.detach().mean()),
        "rank_loss": float(out.rank.detach().mean()),
        "p": p,
        "random_picks": sum(sel.random_picks for sel in out.selections),
        "lr": lr,
    }
    state.history.append(metrics)
    return metrics


@dataclass
class TrainResult:
    model: SCNModel
    vocab: Vocabulary
    history: list[dict]
    validation: list[dict]
    best_epoch: int
    gt_reads: int
    state: TrainState


def train(
    train_pairs: Sequence[Pair],
    config: RunConfig,
    val_pairs: Sequence[Pair] = (),
    run_dir: str | Path | None = None,
    vocab: Vocabulary | None = None,
) -> TrainResult:
    """Seeded epoch loop with per-epoch validation and best-model selection.

    Selection uses validation R@1,IoU=0.5 (later epochs win ties); without
    validation pairs the final model is kept.
    """
    from .evaluation import evaluate_pairs

    if vocab is None:
        vocab = build_vocabulary((q.tokens for _, q in train_pairs), config.vocab_size)
    state = init_state(config, vocab)
    reads_before = GT_GUARD.reads
    best = (-1.0, 0, copy.deepcopy(state.model.state_dict()))
    validation: list[dict] = []
    order_rng = np.random.default_rng([config.seed, 4])
    rows: list[dict] = []
    key = recall_column(1, 0.5)

    for epoch in range(1, config.epochs + 1):
        order = order_rng.permutation(len(train_pairs))
        for start in range(0, len(order), config.batch_size):
            batch = [train_pairs[i] for i in order[start : start + config.batch_size]]
            metrics = train_step(batch, state)
            rows.append({"epoch": epoch, **metrics})
        if val_pairs:
            summary = evaluate_pairs(state.model, val_pairs, vocab, config)
            row = {"step": state.n_update, "epoch": epoch}
            row.update({recall_column(n, m): summary[(n, m)] for n in RECALL_N for m in RECALL_M})
            validation.append(row)
            rows.append(row)
            if row[key] >= best[0]:
                best = (row[key], epoch, copy.deepcopy(state.model.state_dict()))
            log.info("epoch %d  loss %.4f  %s %.3f", epoch, rows[-2]["loss"], key, row[key])
        else:
            best = (-1.0, epoch, copy.deepcopy(state.model.state_dict()))

    model = copy.deepcopy(state.model)
    model.load_state_dict(best[2])
    model.eval()
    result = TrainResult(model, vocab, state.history, validation, best[1],
                         GT_GUARD.reads - reads_before, state)
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(run_dir / "checkpoint.scnc", model,
                        {"config": config.to_text(), "vocab": vocab.itos})
        write_metrics(run_dir / "metrics.csv", rows)
    return result


def write_metrics(path: str | Path, rows: Sequence[dict]) -> None:
    columns = METRIC_FIELDS + [recall_column(n, m) for n in RECALL_N for m in RECALL_M]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, restval="")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(v) for k, v in row.items()})


def _fmt(v):
    return repr(v) if isinstance(v, float) else v

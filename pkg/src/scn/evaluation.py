"""Inference, R@n,IoU=m, the random baseline, ablations, qualitative reports."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .backbone import SCNModel
from .completion import reconstruct_energies, masked_nll
from .config import RECALL_M, RECALL_N, RunConfig
from .corpus import QueryRecord, VideoRecord, Vocabulary
from .grounding import fuse_video_query, greedy_nms, score_candidates
from .objective import build_query, recall_column, candidate_grid, pad_features, pad_tokens
from .temporal import Proposal, iou

ABLATIONS = ("full", "no_rand", "no_reward", "no_mask", "no_share")


@dataclass
class EvalRecord:
    query_id: str
    predictions: list[tuple[Proposal, float]]  # descending confidence
    gt: Proposal


def localize_top_n(
    model: SCNModel,
    video: np.ndarray,
    token_ids: Sequence[int],
    n: int,
    nms_threshold: float,
    ratios: Sequence[float],
) -> list[tuple[Proposal, float]]:
    """Greedy NMS over the single-pass score grid; no exploration, no masking."""
    return predict(model, [video], [token_ids], n, nms_threshold, ratios)[0]


@torch.no_grad()
def predict(
    model: SCNModel,
    videos: Sequence[np.ndarray],
    token_ids: Sequence[Sequence[int]],
    n: int,
    nms_threshold: float,
    ratios: Sequence[float],
    batch_size: int = 32,
) -> list[list[tuple[Proposal, float]]]:
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    was_training = model.training
    model.eval()
    dtype = model.input_proj.weight.dtype
    out = []
    for start in range(0, len(videos), batch_size):
        vids = videos[start : start + batch_size]
        feats, vpad = pad_features(vids, dtype)
        scores = score_candidates(model, fuse_video_query(model, feats, pad_tokens(token_ids[start : start + batch_size]), vpad))
        for b, v in enumerate(vids):
            grid = candidate_grid(v.shape[0], ratios)
            out.append(greedy_nms(grid, scores[b, : v.shape[0]].numpy(), n, nms_threshold))
    model.train(was_training)
    return out


def recall_at_n_iou(records: Sequence[EvalRecord], n: int, m: float) -> float:
    """Share of queries with some top-``n`` prediction at IoU strictly above ``m``."""
    if not records:
        raise ValueError("no records to evaluate")
    hits = 0
    for rec in records:
        if not rec.predictions:
            raise ValueError(f"record {rec.query_id!r} has no predictions")
        if max(iou(p, rec.gt) for p, _ in rec.predictions[:n]) > m:
            hits += 1
    return hits / len(records)


def recall_table(records: Sequence[EvalRecord], ns=RECALL_N, ms=RECALL_M) -> dict[tuple[int, float], float]:
    return {(n, m): recall_at_n_iou(records, n, m) for n in ns for m in ms}


def eval_records(
    model: SCNModel,
    pairs: Sequence[tuple[VideoRecord, QueryRecord]],
    vocab: Vocabulary,
    config: RunConfig,
    n: int = max(RECALL_N),
) -> list[EvalRecord]:
    preds = predict(model, [v.features for v, _ in pairs], [vocab.encode(q.tokens) for _, q in pairs],
                    n, config.nms_threshold, config.ratios)
    return [EvalRecord(q.video_id, p, q.gt_interval) for (_, q), p in zip(pairs, preds)]


def evaluate_pairs(model, pairs, vocab, config) -> dict[tuple[int, float], float]:
    return recall_table(eval_records(model, pairs, vocab, config))


def random_baseline(
    pairs: Sequence[tuple[VideoRecord, QueryRecord]],
    ratios: Sequence[float],
    n: int,
    m: float,
    seed: int,
    trials: int,
) -> float:
    """Mean R(n, m) when each query's predictions are uniform grid draws."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    grids = [candidate_grid(v.n_frames, ratios) for v, _ in pairs]
    cells = [g.valid_cells() for g in grids]
    gts = [q.gt_interval for _, q in pairs]
    total = 0.0
    for _ in range(trials):
        records = []
        for i, (grid, pool, gt) in enumerate(zip(grids, cells, gts)):
            picks = rng.choice(len(pool), size=min(n, len(pool)), replace=False)
            records.append(EvalRecord(str(i), [(grid.proposal(*pool[j]), 0.0) for j in picks], gt))
        total += recall_at_n_iou(records, n, m)
    return total / trials


def ablation_config(base: RunConfig, variant: str) -> RunConfig:
    if variant == "full":
        return base
    if variant == "no_rand":
        return base.replace(lambda1=0.0)
    if variant == "no_reward":
        return base.replace(reward_mode="onehot")
    if variant == "no_mask":
        return base.replace(rec_mode="captioning")
    if variant == "no_share":
        return base.replace(share=False)
    raise ValueError(f"unknown ablation variant {variant!r}; expected one of {ABLATIONS}")


@torch.no_grad()
def proposal_losses(
    model: SCNModel,
    video: np.ndarray,
    token_ids: Sequence[int],
    importance: Sequence[int],
    proposals: Sequence[Proposal],
    config: RunConfig,
    rng: np.random.Generator,
):
    """Reconstruction loss of each proposal under one shared query mask."""
    mq = build_query(token_ids, importance, config, rng)
    dtype = model.input_proj.weight.dtype
    feats, ppad = pad_features([video[p.start : p.end] for p in proposals], dtype)
    dec_in = pad_tokens([mq.tokens] * len(proposals))
    energies = reconstruct_energies(model, dec_in, feats, ppad, causal=config.rec_mode == "captioning")
    targets = mq.targets if config.rec_mode == "masked" else mq.originals
    tm = torch.zeros(len(proposals), len(targets), dtype=torch.bool)
    tm[:, list(mq.positions)] = True
    tgt = pad_tokens([targets] * len(proposals))
    return masked_nll(energies, tgt, tm).tolist(), mq


def build_report(
    model: SCNModel,
    pairs: Sequence[tuple[VideoRecord, QueryRecord]],
    vocab: Vocabulary,
    config: RunConfig,
    top: int = 2,
) -> list[dict]:
    """Top-``top`` proposals per query with confidence and reconstruction loss.

    The mask for query ``i`` is drawn from an rng seeded by ``(seed, i)`` so
    reports are reproducible.
    """
    was_training = model.training
    model.eval()
    rows = []
    records = eval_records(model, pairs, vocab, config, n=top)
    for i, ((video, query), rec) in enumerate(zip(pairs, records)):
        ids = vocab.encode(query.tokens)
        props = [p for p, _ in rec.predictions]
        losses, mq = proposal_losses(model, video.features, ids, query.importance, props, config,
                                     np.random.default_rng([config.seed, 5, i]))
        rows.append({
            "query_id": i,
            "video_id": query.video_id,
            "tokens": list(query.tokens),
            "masked_words": [query.tokens[j] for j in mq.positions] if config.rec_mode == "masked" else [],
            "gt": None if rec.gt is None else list(rec.gt),
            "proposals": [
                {"start": p.start, "end": p.end, "confidence": conf, "rec_loss": loss,
                 "iou": None if rec.gt is None else iou(p, rec.gt)}
                for (p, conf), loss in zip(rec.predictions, losses)
            ],
        })
    model.train(was_training)
    return rows


def report_examples(rows: Sequence[dict], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")


def lower_loss_agreement(rows: Sequence[dict]) -> float | None:
    """Share of two-proposal rows where the higher-IoU proposal has lower loss.

    Rows whose proposals tie on IoU or loss are skipped.
    """
    agree = total = 0
    for row in rows:
        props = row["proposals"]
        if len(props) < 2 or props[0]["iou"] is None:
            continue
        a, b = props[0], props[1]
        if a["iou"] == b["iou"] or a["rec_loss"] == b["rec_loss"]:
            continue
        total += 1
        agree += (a["iou"] > b["iou"]) == (a["rec_loss"] < b["rec_loss"])
    return agree / total if total else None


def write_predictions(path: str | Path, records: Sequence[EvalRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            preds = [[p.start, p.end, conf] for p, conf in rec.predictions]
            fh.write(json.dumps({"query_id": rec.query_id, "predictions": preds}) + "\n")


def write_summary(path: str | Path, table: dict[tuple[int, float], float]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "n", "m", "value"])
        for (n, m), value in sorted(table.items()):
            writer.writerow([recall_column(n, m), n, m, repr(value)])

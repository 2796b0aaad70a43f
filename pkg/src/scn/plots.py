"""Figures rendered from the CSV artifacts. The CSVs stay the contract;
these are convenience views written next to them."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _read_rows(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _floats(rows, key):
    xs, ys = [], []
    for row in rows:
        if row.get(key) not in (None, ""):
            xs.append(float(row["step"]))
            ys.append(float(row[key]))
    return xs, ys


def plot_training(metrics_csv: str | Path, out_path: str | Path) -> Path:
    """Loss components and exploration probability per step; validation
    R@1,IoU=0.5 per epoch when present."""
    rows = _read_rows(metrics_csv)
    fig, (ax_loss, ax_val) = plt.subplots(1, 2, figsize=(10, 3.6))
    for key in ("loss", "rec_loss", "rank_loss"):
        xs, ys = _floats(rows, key)
        ax_loss.plot(xs, ys, lw=1, label=key)
    xs, ys = _floats(rows, "p")
    if xs:
        ax_p = ax_loss.twinx()
        ax_p.plot(xs, ys, lw=1, ls="--", color="grey", label="p")
        ax_p.set_ylabel("exploration p")
    ax_loss.set_xlabel("update")
    ax_loss.set_ylabel("loss")
    ax_loss.legend(loc="upper right", fontsize=8)

    for key in ("R@1,IoU=0.5", "R@5,IoU=0.5", "R@1,IoU=0.3"):
        xs, ys = _floats(rows, key)
        if xs:
            ax_val.plot(xs, ys, marker="o", ms=3, lw=1, label=key)
    ax_val.set_xlabel("update")
    ax_val.set_ylabel("validation recall")
    ax_val.set_ylim(0, 1)
    if ax_val.lines:
        ax_val.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, out_path)


def plot_recall_table(table: Mapping[tuple[int, float], float], out_path: str | Path,
                      baseline: Mapping[tuple[int, float], float] | None = None) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.6))
    for n in sorted({n for n, _ in table}):
        ms = sorted(m for n_, m in table if n_ == n)
        ax.plot(ms, [table[(n, m)] for m in ms], marker="o", label=f"R@{n}")
        if baseline:
            ax.plot(ms, [baseline[(n, m)] for m in ms], ls=":", color=ax.lines[-1].get_color(),
                    label=f"R@{n} random")
    ax.set_xlabel("IoU threshold m")
    ax.set_ylabel("recall")
    ax.set_ylim(0, 1)
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, out_path)


def plot_ablation(rows: Sequence[Mapping[str, object]], out_path: str | Path,
                  column: str = "R@1,IoU=0.5") -> Path:
    names = [str(r["variant"]) for r in rows]
    values = [float(r[column]) for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.6))
    ax.bar(names, values, color="tab:blue")
    ax.set_ylabel(column)
    ax.set_ylim(0, max(1e-3, max(values, default=0)) * 1.2)
    for i, v in enumerate(values):
        ax.text(i, v, f"{v:.2f}", ha="center", va="bottom", fontsize=8)
    fig.tight_layout()
    return _save(fig, out_path)


def _save(fig, out_path) -> Path:
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path

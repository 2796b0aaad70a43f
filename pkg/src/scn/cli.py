"""``scn gen-data|train|eval|ablate|report --config PATH [--key=value ...]``

Exit status: 0 on success, 1 on usage or configuration errors, 2 when a
command fails at run time.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from pathlib import Path
from typing import Sequence

import torch

from .backbone import load_checkpoint
from .config import RECALL_M, RECALL_N, ConfigError, RunConfig, parse_config, read_config_text
from .corpus import (
    DatasetError,
    Vocabulary,
    generate_synthetic_corpus,
    pair_records,
    read_dataset,
    split_indices,
    write_dataset,
)
from .evaluation import (
    ABLATIONS,
    ablation_config,
    build_report,
    eval_records,
    lower_loss_agreement,
    random_baseline,
    recall_table,
    report_examples,
    write_predictions,
    write_summary,
)
from .objective import recall_column, train

log = logging.getLogger("scn")

COMMANDS = ("gen-data", "train", "eval", "ablate", "report")
FEATURES_FILE = "features.scnf"
ANNOTATIONS_FILE = "annotations.jsonl"
CHECKPOINT_FILE = "checkpoint.scnc"
BASELINE_TRIALS = 1000


class UsageError(Exception):
    pass


# -- run directories and data --------------------------------------------------


def make_run_dir(config: RunConfig, command: str) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = Path(config.out_dir) / f"{stamp}-seed{config.seed}-{command}"
    run_dir, i = base, 1
    while run_dir.exists():
        run_dir = base.with_name(f"{base.name}-{i}")
        i += 1
    run_dir.mkdir(parents=True)
    (run_dir / "config.txt").write_text(config.to_text())
    return run_dir


def load_pairs(config: RunConfig):
    """Pairs from ``data_dir`` when set, else the synthetic generator."""
    if config.data_dir:
        data = Path(config.data_dir)
        videos, queries = read_dataset(data / FEATURES_FILE, data / ANNOTATIONS_FILE,
                                       max_words=config.max_words)
    else:
        videos, queries = generate_synthetic_corpus(config.corpus_config())
    return pair_records(videos, queries)


def split_pairs(pairs, config: RunConfig):
    train_idx, val_idx, test_idx = split_indices(len(pairs), config.seed)
    pick = lambda idx: [pairs[i] for i in idx]  # noqa: E731
    return {"train": pick(train_idx), "val": pick(val_idx), "test": pick(test_idx), "all": list(pairs)}


def load_model(config: RunConfig):
    if not config.checkpoint:
        raise UsageError("this command needs --checkpoint=PATH")
    path = Path(config.checkpoint)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    model, meta = load_checkpoint(path)
    vocab = Vocabulary(meta["vocab"])
    # the candidate grid and completion mode belong to the trained model
    trained = read_config_text(meta.get("config", ""), str(path))
    keep = {k: trained[k] for k in ("ratios", "rec_mode") if k in trained}
    for key, value in keep.items():
        if getattr(config, key) != value:
            log.warning("using %s = %s from the checkpoint", key, value)
    model.eval()
    return model, vocab, config.replace(**keep)


# -- commands --------------------------------------------------------------------


def cmd_gen_data(config: RunConfig, run_dir: Path) -> None:
    out = Path(config.data_dir) if config.data_dir else run_dir
    out.mkdir(parents=True, exist_ok=True)
    videos, queries = generate_synthetic_corpus(config.corpus_config())
    write_dataset(out / FEATURES_FILE, out / ANNOTATIONS_FILE, videos, queries)
    print(f"wrote {len(videos)} videos and {len(queries)} queries to {out}")


def cmd_train(config: RunConfig, run_dir: Path) -> None:
    splits = split_pairs(load_pairs(config), config)
    if not splits["train"]:
        raise DatasetError("training split is empty")
    res = train(splits["train"], config, splits["val"], run_dir=run_dir)
    print(f"checkpoint {run_dir / CHECKPOINT_FILE} (epoch {res.best_epoch})")
    print(f"metrics {run_dir / 'metrics.csv'}")
    if config.plots:
        from .plots import plot_training

        print(f"figure {plot_training(run_dir / 'metrics.csv', run_dir / 'training.png')}")


def cmd_eval(config: RunConfig, run_dir: Path) -> None:
    model, vocab, config = load_model(config)
    pairs = split_pairs(load_pairs(config), config)[config.eval_split]
    if not pairs:
        raise DatasetError(f"{config.eval_split} split is empty")
    records = eval_records(model, pairs, vocab, config)
    table = recall_table(records)
    write_summary(run_dir / "summary.csv", table)
    write_predictions(run_dir / "predictions.jsonl", records)
    for (n, m), value in sorted(table.items()):
        print(f"{recall_column(n, m)} = {value:.4f}")
    if config.plots:
        from .plots import plot_recall_table

        baseline = {(n, m): random_baseline(pairs, config.ratios, n, m, config.seed, BASELINE_TRIALS)
                    for n in RECALL_N for m in RECALL_M}
        print(f"figure {plot_recall_table(table, run_dir / 'recall.png', baseline)}")


def cmd_ablate(config: RunConfig, run_dir: Path) -> None:
    splits = split_pairs(load_pairs(config), config)
    held_out = splits[config.eval_split] or splits["val"]
    columns = [recall_column(n, m) for n in RECALL_N for m in RECALL_M]
    rows = []
    for variant in ABLATIONS:
        cfg = ablation_config(config, variant)
        res = train(splits["train"], cfg, splits["val"], run_dir=run_dir / variant)
        table = recall_table(eval_records(res.model, held_out, res.vocab, cfg))
        rows.append({"variant": variant, **{recall_column(n, m): table[(n, m)] for n, m in table}})
        print(f"{variant:10s} R@1,IoU=0.5 = {table[(1, 0.5)]:.4f}")
    with open(run_dir / "ablation.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["variant", *columns])
        writer.writeheader()
        writer.writerows(rows)
    print(f"comparison {run_dir / 'ablation.csv'}")
    if config.plots:
        from .plots import plot_ablation

        print(f"figure {plot_ablation(rows, run_dir / 'ablation.png')}")


def cmd_report(config: RunConfig, run_dir: Path) -> None:
    model, vocab, config = load_model(config)
    pairs = split_pairs(load_pairs(config), config)[config.eval_split]
    if config.report_limit:
        pairs = pairs[: config.report_limit]
    rows = build_report(model, pairs, vocab, config)
    report_examples(rows, run_dir / "report.jsonl")
    agree = lower_loss_agreement(rows)
    print(f"report {run_dir / 'report.jsonl'} ({len(rows)} queries)")
    if agree is not None:
        print(f"higher-IoU proposal has lower reconstruction loss in {agree:.1%} of pairs")


HANDLERS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "ablate": cmd_ablate, "report": cmd_report}


# -- entry point -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scn",
        description="Weakly supervised moment localization with semantic completion.",
        epilog="Any config key can be overridden with --key=value. SCN_SEED sets the seed.",
    )
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", metavar="PATH", help="flat 'key = value' config file")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.config and not Path(args.config).is_file():
            raise UsageError(f"config file not found: {args.config}")
        config = parse_config(args.config, extra)
    except (ConfigError, UsageError) as exc:
        print(f"scn: error: {exc}", file=sys.stderr)
        return 1

    torch.set_num_threads(1)
    try:
        if args.command in ("eval", "report"):
            if not config.checkpoint:
                raise UsageError("this command needs --checkpoint=PATH")
            if not Path(config.checkpoint).is_file():
                raise FileNotFoundError(f"checkpoint not found: {config.checkpoint}")
        run_dir = make_run_dir(config, args.command)
        HANDLERS[args.command](config, run_dir)
    except (ConfigError, UsageError) as exc:
        print(f"scn {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except (DatasetError, OSError, ValueError, RuntimeError, FloatingPointError, KeyError) as exc:
        print(f"scn {args.command}: error: {exc}", file=sys.stderr)
        return 2
    print(f"run directory {run_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())

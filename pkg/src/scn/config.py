"""Run configuration: flat ``key = value`` files plus ``--key=value`` flags."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Mapping, Sequence

from .backbone import ModelDims
from .corpus import CorpusConfig

ACTIVITY_RATIOS = (0.167, 0.333, 0.5, 0.667, 0.834, 1.0)
CHARADES_RATIOS = (0.167, 0.25, 0.333, 0.5)
RECALL_N = (1, 5)
RECALL_M = (0.1, 0.3, 0.5, 0.7)


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class RunConfig:
    # synthetic corpus
    n_videos: int = 32
    feature_dim: int = 16
    min_frames: int = 40
    max_frames: int = 64
    event_ratio: float = 0.3
    vocab_size: int = 1000
    n_patterns: int = 4
    signal: float = 5.0
    noise: float = 0.5
    distractor_rate: float = 0.0
    max_words: int = 20
    # backbone
    d_model: int = 64
    layers: int = 2
    heads: int = 4
    ffn_dim: int = 0
    dropout: float = 0.1
    share: bool = True
    # proposal generation and selection
    ratios: tuple[float, ...] = ACTIVITY_RATIOS
    lambda1: float = 0.5
    lambda2: float = 2000.0
    top_k: int = 4
    nms_threshold: float = 0.55
    # semantic completion
    mask_fraction: float = 1 / 3
    important_weight: float = 4.0
    rec_mode: str = "masked"  # masked | captioning
    # objective and optimisation
    beta: float = 0.1
    reward_mode: str = "ladder"  # ladder | onehot
    lr_max: float = 2e-4
    warmup: int = 400
    batch_size: int = 16
    epochs: int = 30
    grad_clip: float = 0.0
    # evaluation
    eval_split: str = "test"  # train | val | test | all
    report_limit: int = 0
    # run bookkeeping
    seed: int = 7
    data_dir: str = ""
    out_dir: str = "runs"
    checkpoint: str = ""
    plots: bool = True

    def corpus_config(self) -> CorpusConfig:
        return CorpusConfig(
            n_videos=self.n_videos, feature_dim=self.feature_dim, min_frames=self.min_frames,
            max_frames=self.max_frames, event_ratio=self.event_ratio, vocab_size=self.vocab_size,
            seed=self.seed, n_patterns=self.n_patterns, signal=self.signal, noise=self.noise,
            distractor_rate=self.distractor_rate,
        )

    def model_dims(self, n_words: int) -> ModelDims:
        return ModelDims(
            n_words=n_words, n_scales=len(self.ratios), feature_dim=self.feature_dim,
            d_model=self.d_model, layers=self.layers, heads=self.heads, ffn_dim=self.ffn_dim,
            dropout=self.dropout, share=self.share,
        )

    def replace(self, **changes) -> "RunConfig":
        cfg = dataclasses.replace(self, **changes)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        def need(cond: bool, key: str, msg: str) -> None:
            if not cond:
                raise ConfigError(key, msg)

        need(self.n_videos >= 0, "n_videos", "must be >= 0")
        need(self.feature_dim >= 1, "feature_dim", "must be >= 1")
        need(1 <= self.min_frames, "min_frames", "must be >= 1")
        need(self.min_frames <= self.max_frames, "max_frames", "must be >= min_frames")
        need(0 < self.event_ratio <= 1, "event_ratio", "must be in (0, 1]")
        need(self.vocab_size >= 5, "vocab_size", "must be >= 5")
        need(0 <= self.distractor_rate <= 1, "distractor_rate", "must be in [0, 1]")
        need(self.max_words >= 1, "max_words", "must be >= 1")
        need(self.d_model >= 1 and self.d_model % max(self.heads, 1) == 0, "d_model",
             "must be positive and divisible by heads")
        need(self.heads >= 1, "heads", "must be >= 1")
        need(self.layers >= 1, "layers", "must be >= 1")
        need(self.ffn_dim >= 0, "ffn_dim", "must be >= 0 (0 means 4 * d_model)")
        need(0 <= self.dropout < 1, "dropout", "must be in [0, 1)")
        need(len(self.ratios) > 0, "ratios", "must be a non-empty list")
        need(all(0 < r <= 1 for r in self.ratios), "ratios", "every ratio must be in (0, 1]")
        need(0 <= self.lambda1 <= 1, "lambda1", "must be in [0, 1]")
        need(self.lambda2 > 0, "lambda2", "must be > 0")
        need(self.top_k >= 2, "top_k", "must be >= 2")
        need(0 <= self.nms_threshold < 1, "nms_threshold", "must be in [0, 1)")
        need(0 < self.mask_fraction <= 1, "mask_fraction", "must be in (0, 1]")
        need(self.important_weight > 0, "important_weight", "must be > 0")
        need(self.rec_mode in ("masked", "captioning"), "rec_mode", "must be masked or captioning")
        need(self.beta >= 0, "beta", "must be >= 0")
        need(self.reward_mode in ("ladder", "onehot"), "reward_mode", "must be ladder or onehot")
        need(self.lr_max > 0, "lr_max", "must be > 0")
        need(self.warmup >= 1, "warmup", "must be >= 1")
        need(self.batch_size >= 1, "batch_size", "must be >= 1")
        need(self.epochs >= 0, "epochs", "must be >= 0")
        need(self.grad_clip >= 0, "grad_clip", "must be >= 0")
        need(self.eval_split in ("train", "val", "test", "all"), "eval_split",
             "must be train, val, test or all")
        need(self.report_limit >= 0, "report_limit", "must be >= 0")

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ", ".join(repr(v) for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"


_FIELDS = {f.name: f for f in fields(RunConfig)}
_TRUE, _FALSE = {"1", "true", "yes", "on"}, {"0", "false", "no", "off"}


def _coerce(key: str, raw: str):
    default = _FIELDS[key].default
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            parts = [p for p in raw.strip("[]()").replace(" ", "").split(",") if p]
            return tuple(float(p) for p in parts)
    except ValueError:
        kind = type(default).__name__ if not isinstance(default, tuple) else "list of floats"
        raise ConfigError(key, f"expected {kind}, got {raw!r}") from None
    return raw


def read_config_text(text: str, source: str = "<config>") -> dict[str, object]:
    values: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}", f"expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(key, "unknown key")
        values[key] = _coerce(key, raw)
    return values


def parse_overrides(flags: Sequence[str] | Mapping[str, str]) -> dict[str, object]:
    if isinstance(flags, Mapping):
        items = list(flags.items())
    else:
        items = []
        for flag in flags:
            body = flag[2:] if flag.startswith("--") else flag
            if "=" not in body:
                raise ConfigError(body, "override must look like --key=value")
            items.append(tuple(body.split("=", 1)))
    out = {}
    for key, raw in items:
        key = key.strip().replace("-", "_")
        if key not in _FIELDS:
            raise ConfigError(key, "unknown key")
        out[key] = raw if not isinstance(raw, str) else _coerce(key, raw)
    return out


def parse_config(
    path: str | Path | None = None,
    overrides: Sequence[str] | Mapping[str, str] = (),
    environ: Mapping[str, str] | None = None,
) -> RunConfig:
    """Defaults, then file values, then ``SCN_SEED``, then flag overrides."""
    environ = os.environ if environ is None else environ
    values: dict[str, object] = {}
    if path:
        values.update(read_config_text(Path(path).read_text(), str(path)))
    if environ.get("SCN_SEED"):
        values["seed"] = _coerce("seed", environ["SCN_SEED"])
    values.update(parse_overrides(overrides))
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg

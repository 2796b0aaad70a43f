"""Bidirectional transformer stack shared by every encoder/decoder role.

One :class:`TransformerStack` serves as query encoder, video decoder,
proposal encoder and query decoder. An encoder is the same layer run
without its cross-attention sublayer. With ``share=False`` the proposal
generation roles and the semantic completion roles get separate stacks.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .corpus import PAD

CHECKPOINT_MAGIC = b"SCNC"
CHECKPOINT_VERSION = 1


@dataclass
class ModelDims:
    n_words: int
    n_scales: int
    feature_dim: int
    d_model: int = 64
    layers: int = 2
    heads: int = 4
    ffn_dim: int = 0  # 0 means 4 * d_model
    dropout: float = 0.1
    share: bool = True

    def __post_init__(self) -> None:
        if self.ffn_dim == 0:
            self.ffn_dim = 4 * self.d_model
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        for name in ("n_words", "n_scales", "feature_dim", "d_model", "layers", "heads"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")


def sinusoidal_positions(n: int, d_model: int) -> torch.Tensor:
    pos = torch.arange(n, dtype=torch.float64)[:, None]
    div = torch.exp(torch.arange(0, d_model, 2, dtype=torch.float64) * (-math.log(10000.0) / d_model))
    pe = torch.zeros(n, d_model, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * div)
    pe[:, 1::2] = torch.cos(pos * div)[:, : d_model // 2]
    return pe


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.out_proj = nn.Linear(d_model, d_model)
        self.last_weights: torch.Tensor | None = None

    def forward(self, x, memory, key_padding=None, causal=False):
        b, lq, d = x.shape
        lk = memory.shape[1]
        dh = d // self.heads
        q = self.q_proj(x).view(b, lq, self.heads, dh).transpose(1, 2)
        k = self.k_proj(memory).view(b, lk, self.heads, dh).transpose(1, 2)
        v = self.v_proj(memory).view(b, lk, self.heads, dh).transpose(1, 2)
        logits = q @ k.transpose(-1, -2) / math.sqrt(dh)
        neg = torch.finfo(logits.dtype).min
        if key_padding is not None:
            logits = logits.masked_fill(key_padding[:, None, None, :], neg)
        if causal:
            future = torch.ones(lq, lk, dtype=torch.bool, device=x.device).triu(1)
            logits = logits.masked_fill(future, neg)
        weights = torch.softmax(logits, dim=-1)
        self.last_weights = weights.detach()
        out = (weights @ v).transpose(1, 2).reshape(b, lq, d)
        return self.out_proj(out)


class TransformerLayer(nn.Module):
    """Pre-norm layer: self-attention, optional cross-attention, feed-forward."""

    def __init__(self, d_model: int, heads: int, ffn_dim: int, dropout: float):
        super().__init__()
        self.self_norm = nn.LayerNorm(d_model)
        self.self_attn = MultiHeadAttention(d_model, heads)
        self.cross_norm = nn.LayerNorm(d_model)
        self.cross_attn = MultiHeadAttention(d_model, heads)
        self.ffn_norm = nn.LayerNorm(d_model)
        self.ffn_in = nn.Linear(d_model, ffn_dim)
        self.ffn_out = nn.Linear(ffn_dim, d_model)
        self.dropout = dropout

    def _drop(self, x):
        return F.dropout(x, self.dropout, self.training)

    def forward(self, x, padding=None, memory=None, memory_padding=None, causal=False):
        h = self.self_norm(x)
        x = x + self._drop(self.self_attn(h, h, padding, causal))
        if memory is not None:
            h = self.cross_norm(x)
            x = x + self._drop(self.cross_attn(h, memory, memory_padding))
        h = self.ffn_norm(x)
        x = x + self._drop(self.ffn_out(self._drop(F.relu(self.ffn_in(h)))))
        if padding is not None:
            x = x.masked_fill(padding[..., None], 0.0)
        return x


class TransformerStack(nn.Module):
    def __init__(self, d_model: int, layers: int, heads: int, ffn_dim: int, dropout: float):
        super().__init__()
        self.layers = nn.ModuleList(
            TransformerLayer(d_model, heads, ffn_dim, dropout) for _ in range(layers)
        )
        self.final_norm = nn.LayerNorm(d_model)

    def encode(self, x, padding=None):
        """Self-attention only; cross-attention weights are skipped."""
        if x.shape[1] == 0:
            raise ValueError("cannot encode an empty sequence")
        for layer in self.layers:
            x = layer(x, padding)
        return self._finish(x, padding)

    def decode(self, x, memory, padding=None, memory_padding=None, causal=False):
        """Attend over ``x`` bidirectionally (unless ``causal``) and over ``memory``."""
        if x.shape[1] == 0 or memory.shape[1] == 0:
            raise ValueError("cannot decode with an empty sequence or memory")
        if x.shape[-1] != memory.shape[-1]:
            raise ValueError(f"width mismatch: {x.shape[-1]} vs memory {memory.shape[-1]}")
        for layer in self.layers:
            x = layer(x, padding, memory, memory_padding, causal)
        return self._finish(x, padding)

    def _finish(self, x, padding):
        x = self.final_norm(x)
        if padding is not None:
            x = x.masked_fill(padding[..., None], 0.0)
        return x


class SCNModel(nn.Module):
    def __init__(self, dims: ModelDims):
        super().__init__()
        self.dims = dims
        d = dims.d_model
        self.embedding = nn.Embedding(dims.n_words, d)
        self.input_proj = nn.Linear(dims.feature_dim, d)
        self.stack = TransformerStack(d, dims.layers, dims.heads, dims.ffn_dim, dims.dropout)
        self.completion_stack = (
            None if dims.share
            else TransformerStack(d, dims.layers, dims.heads, dims.ffn_dim, dims.dropout)
        )
        self.score_head = nn.Linear(d, dims.n_scales)
        self.vocab_head = nn.Linear(d, dims.n_words)
        self._pe_cache: dict[tuple, torch.Tensor] = {}

    # role views; with sharing all four are the same module
    @property
    def query_encoder(self) -> TransformerStack:
        return self.stack

    @property
    def video_decoder(self) -> TransformerStack:
        return self.stack

    @property
    def proposal_encoder(self) -> TransformerStack:
        return self.stack if self.completion_stack is None else self.completion_stack

    @property
    def query_decoder(self) -> TransformerStack:
        return self.proposal_encoder

    def positions(self, n: int) -> torch.Tensor:
        ref = self.input_proj.weight
        key = (n, ref.dtype, ref.device)
        if key not in self._pe_cache:
            self._pe_cache[key] = sinusoidal_positions(n, self.dims.d_model).to(ref.dtype).to(ref.device)
        return self._pe_cache[key]

    def embed_tokens(self, ids: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Token embeddings plus positions; returns ``(x, padding_mask)``."""
        if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= self.dims.n_words):
            raise IndexError(f"token id outside 0..{self.dims.n_words - 1}")
        x = self.embedding(ids) + self.positions(ids.shape[-1])
        return x, ids == PAD

    def project_video(self, feats: torch.Tensor) -> torch.Tensor:
        if feats.shape[-1] != self.dims.feature_dim:
            raise ValueError(f"feature width {feats.shape[-1]} != {self.dims.feature_dim}")
        return self.input_proj(feats) + self.positions(feats.shape[-2])


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def init_parameters(seed: int, dims: ModelDims) -> SCNModel:
    """Deterministic init: weights ~ N(0, 1/fan_in), biases zero, norms unit."""
    model = SCNModel(dims)
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, param in model.named_parameters():
            if name.endswith("bias"):
                param.zero_()
            elif "norm" in name:
                param.fill_(1.0)
            elif name == "embedding.weight":
                param.copy_(torch.randn(param.shape, generator=gen))
            else:
                fan_in = param.shape[1]
                param.copy_(torch.randn(param.shape, generator=gen) / math.sqrt(fan_in))
    return model


# -- checkpoints -----------------------------------------------------------


def save_checkpoint(path: str | Path, model: SCNModel, config: dict | None = None) -> None:
    """Write named float32 tensors plus the producing config.

    Layout: ``SCNC | version u32 | json length u32 | json | tensor count u32``
    then per tensor ``name length u16 | name | ndim u32 | dims u32... | data``.
    """
    meta = json.dumps({"dims": asdict(model.dims), "config": config or {}}, sort_keys=True).encode()
    state = model.state_dict()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(meta)))
    buf.write(meta)
    buf.write(struct.pack("<I", len(state)))
    for name, tensor in state.items():
        arr = tensor.detach().cpu().numpy().astype("<f4")
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> tuple[SCNModel, dict]:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (magic {data[:4]!r})")
    version, meta_len = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    meta = json.loads(data[pos : pos + meta_len])
    pos += meta_len
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    state = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos : pos + n].decode()
        pos += n
        (ndim,) = struct.unpack_from("<I", data, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(shape)
        pos += 4 * size
        state[name] = torch.from_numpy(arr.copy())
    model = SCNModel(ModelDims(**meta["dims"]))
    model.load_state_dict(state)
    return model, meta["config"]

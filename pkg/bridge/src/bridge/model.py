"""Small causal transformer language model with a token-level scoring head."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import torch
import torch.nn as nn

from .tokens import TokenMap, VocabSpec


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 128
    n_head: int = 4
    n_layer: int = 3
    d_ff: int = 256
    max_len: int = 256
    dropout: float = 0.0


class CausalSelfAttention(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.n_head = cfg.n_head
        self.qkv = nn.Linear(cfg.d_model, 3 * cfg.d_model)
        self.proj = nn.Linear(cfg.d_model, cfg.d_model)

    def forward(self, x):
        b, t, d = x.shape
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        hs = d // self.n_head
        q = q.view(b, t, self.n_head, hs).transpose(1, 2)
        k = k.view(b, t, self.n_head, hs).transpose(1, 2)
        v = v.view(b, t, self.n_head, hs).transpose(1, 2)
        out = torch.nn.functional.scaled_dot_product_attention(q, k, v, is_causal=True)
        out = out.transpose(1, 2).contiguous().view(b, t, d)
        return self.proj(out)


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.attn = CausalSelfAttention(cfg)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.mlp = nn.Sequential(
            nn.Linear(cfg.d_model, cfg.d_ff), nn.GELU(), nn.Linear(cfg.d_ff, cfg.d_model)
        )

    def forward(self, x):
        x = x + self.attn(self.ln1(x))
        x = x + self.mlp(self.ln2(x))
        return x


class BridgeModel(nn.Module):
    """Decoder-only LM over bridge symbols, plus a per-position scoring head.

    Coordinate and count symbols additionally carry their numeric value along
    a learned direction, so proximity between values is representable without
    having to be memorized per symbol pair.
    """

    def __init__(self, vocab_size: int, cfg: ModelConfig, numeric_values=None):
        super().__init__()
        self.cfg = cfg
        self.tok_emb = nn.Embedding(vocab_size, cfg.d_model)
        self.pos_emb = nn.Embedding(cfg.max_len, cfg.d_model)
        if numeric_values is None:
            numeric_values = [0.0] * vocab_size
        self.register_buffer("numeric_values", torch.tensor(numeric_values, dtype=torch.float32))
        self.num_dir = nn.Parameter(torch.zeros(cfg.d_model))
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layer))
        self.ln_f = nn.LayerNorm(cfg.d_model)
        self.lm_head = nn.Linear(cfg.d_model, vocab_size, bias=False)
        self.score_head = nn.Sequential(
            nn.Linear(cfg.d_model, 64), nn.GELU(), nn.Linear(64, 1)
        )

    def hidden(self, idx: torch.Tensor) -> torch.Tensor:
        b, t = idx.shape
        if t > self.cfg.max_len:
            raise ValueError(f"sequence length {t} exceeds max_len {self.cfg.max_len}")
        pos = torch.arange(t, device=idx.device)
        x = self.tok_emb(idx) + self.pos_emb(pos)[None, :, :]
        x = x + self.numeric_values[idx][..., None] * self.num_dir
        for block in self.blocks:
            x = block(x)
        return self.ln_f(x)

    def forward(self, idx: torch.Tensor) -> torch.Tensor:
        return self.lm_head(self.hidden(idx))

    def token_scores(self, idx: torch.Tensor) -> torch.Tensor:
        """Sigmoid score per position (judging the symbol at that position)."""
        return torch.sigmoid(self.score_head(self.hidden(idx))).squeeze(-1)


def save_checkpoint(path, model: BridgeModel, token_map: TokenMap, meta: dict) -> None:
    payload = {
        "state_dict": model.state_dict(),
        "model_config": model.cfg.__dict__,
        "vocab_spec": token_map.spec.to_json(),
        "meta": meta,
    }
    tmp = str(path) + ".tmp"
    torch.save(payload, tmp)
    os.replace(tmp, path)


def numeric_values_for(token_map: TokenMap) -> list[float]:
    spec = token_map.spec
    denom_c = float(max(spec.width, spec.height))
    out = []
    for sym in token_map.symbols:
        if sym.startswith("coord/"):
            out.append(int(sym.split("/", 1)[1]) / denom_c)
        elif sym.startswith("num/"):
            out.append(int(sym.split("/", 1)[1]) / float(max(spec.count_max, 1)))
        else:
            out.append(0.0)
    return out


def load_checkpoint(path) -> tuple[BridgeModel, TokenMap, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    spec = VocabSpec.from_json(payload["vocab_spec"])
    token_map = TokenMap(spec)
    cfg = ModelConfig(**payload["model_config"])
    model = BridgeModel(len(token_map), cfg, numeric_values_for(token_map))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, token_map, payload.get("meta", {})

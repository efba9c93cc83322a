from __future__ import annotations

import math

import numpy as np
import torch

from ..core_math import SeededRng, init_uniform
from .config import ModelConfig, Variant


class ModelParams(dict):
    """Name -> float64 leaf tensor.  Shared weights are stored once and looked
    up under one name by every forward path that uses them."""

    def count(self) -> int:
        return sum(t.numel() for t in self.values())

    def clone(self) -> ModelParams:
        return ModelParams({k: v.detach().clone().requires_grad_(True) for k, v in self.items()})

    def zero_(self, prefix: str) -> None:
        with torch.no_grad():
            for name, t in self.items():
                if name.startswith(prefix):
                    t.zero_()


def parameter_count(params: ModelParams) -> int:
    return params.count()


def _tensor(arr: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float64)).requires_grad_(True)


class _Builder:
    def __init__(self, rng: SeededRng):
        self.rng = rng
        self.params = ModelParams()

    def matrix(self, name, rows, cols, bound=None):
        self.params[name] = _tensor(init_uniform(rows, cols, bound, self.rng))

    def embedding(self, name, rows, d):
        # U[-b, b] with b = sqrt(3/d) has standard deviation d**-0.5
        self.matrix(name, rows, d, math.sqrt(3.0 / d))

    def zeros(self, name, n):
        self.params[name] = _tensor(np.zeros(n))

    def ones(self, name, n):
        self.params[name] = _tensor(np.ones(n))

    def norm(self, prefix, d):
        self.ones(prefix + ".g", d)
        self.zeros(prefix + ".b", d)

    def attention(self, prefix, d):
        for w in ("w_q", "w_k", "w_v"):
            self.matrix(f"{prefix}.{w}", d, d)

    def ffn(self, prefix, d, width):
        self.matrix(prefix + ".w1", d, width)
        self.zeros(prefix + ".b1", width)
        self.matrix(prefix + ".w2", width, d)
        self.zeros(prefix + ".b2", d)

    def block(self, prefix, cfg: ModelConfig, cross=False, partial=False):
        d = cfg.d
        self.norm(prefix + ".ln_att", d)
        self.attention(prefix + ".att", d)
        if cross:
            self.norm(prefix + ".ln_cross", d)
            self.attention(prefix + ".cross", d)
        if partial:
            self.norm(prefix + ".ln_pa", d)
            self.matrix(prefix + ".pa.w_p1", d, d)
            self.zeros(prefix + ".pa.b_p1", d)
            self.matrix(prefix + ".pa.w_p2", d, d)
            self.zeros(prefix + ".pa.b_p2", d)
            self.attention(prefix + ".pa.att", d)
        self.norm(prefix + ".ln_ffn", d)
        self.ffn(prefix + ".ffn", d, cfg.ffn_width)


def decoder_prefix(cfg: ModelConfig) -> str:
    """ED decoder tensors live under 'enc.' when encoder and decoder share."""
    return "enc." if cfg.share_encoder_decoder_params else "dec."


def init_params(cfg: ModelConfig, seed: int | SeededRng = 0) -> ModelParams:
    rng = seed if isinstance(seed, SeededRng) else SeededRng(seed)
    b = _Builder(rng)
    d, vocab = cfg.d, cfg.vocab.size
    if cfg.variant is Variant.ED:
        b.embedding("enc.emb.word", vocab, d)
        b.embedding("enc.emb.pos", cfg.max_positions, d)
        for layer in range(cfg.layers):
            b.block(f"enc.layers.{layer}", cfg)
        b.norm("enc.ln_final", d)
        shared = cfg.share_encoder_decoder_params
        if not shared:
            b.embedding("dec.emb.word", vocab, d)
            b.embedding("dec.emb.pos", cfg.max_positions, d)
        for layer in range(cfg.layers):
            if shared:
                b.norm(f"dec.layers.{layer}.ln_cross", d)
                b.attention(f"dec.layers.{layer}.cross", d)
            else:
                b.block(f"dec.layers.{layer}", cfg, cross=True)
        if not shared:
            b.norm("dec.ln_final", d)
    else:
        b.embedding("emb.word", vocab, d)
        b.embedding("emb.pos", cfg.max_positions, d)
        for layer in range(cfg.layers):
            b.block(f"layers.{layer}", cfg, partial=cfg.partial_attention)
        b.norm("ln_final", d)
    if cfg.language_embedding:
        b.embedding("emb.lang", 2, d)
    if not cfg.tie_output:
        b.matrix("out.w", d, vocab)
    return b.params

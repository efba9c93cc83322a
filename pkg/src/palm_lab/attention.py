"""Masked single-head scaled dot-product attention (numpy reference path).

``Z = softmax(Q W_Q W_K^T K^T / sqrt(d)) V W_V``, with disallowed logits set
to ``-inf`` before the row softmax.  The torch forward passes in
:mod:`palm_lab.models` are checked against this module.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core_math import DimensionError, SeededRng, as_matrix, softmax_rows


@dataclass(frozen=True)
class AttentionWeights:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray

    def __post_init__(self):
        for name in ("w_q", "w_k", "w_v"):
            m = as_matrix(getattr(self, name))
            if m.shape[0] != m.shape[1]:
                raise DimensionError(f"{name} must be square, got {m.shape}")
            object.__setattr__(self, name, m)
        if not (self.w_q.shape == self.w_k.shape == self.w_v.shape):
            raise DimensionError("w_q, w_k, w_v must share one width")

    @property
    def d(self) -> int:
        return self.w_q.shape[0]

    @property
    def a(self) -> np.ndarray:
        """Bilinear form A with A^T = W_Q W_K^T."""
        return (self.w_q @ self.w_k.T).T


@dataclass(frozen=True)
class AttentionMask:
    allowed: np.ndarray

    def __post_init__(self):
        allowed = np.asarray(self.allowed, dtype=bool)
        if allowed.ndim != 2:
            raise DimensionError("mask must be 2-D")
        if allowed.shape[0] and not allowed.any(axis=1).all():
            raise ValueError("fully masked row")
        object.__setattr__(self, "allowed", allowed)

    @property
    def rows(self) -> int:
        return self.allowed.shape[0]

    @property
    def cols(self) -> int:
        return self.allowed.shape[1]

    def tail(self, start: int) -> AttentionMask:
        """The query rows from ``start`` on (0-indexed)."""
        return AttentionMask(self.allowed[start:])


def full_mask(rows: int, cols: int) -> AttentionMask:
    return AttentionMask(np.ones((rows, cols), dtype=bool))


def make_causal_mask(n: int) -> AttentionMask:
    if n < 1:
        raise ValueError("n must be >= 1")
    return AttentionMask(np.tri(n, dtype=bool))


def make_cross_unidirectional_mask(s_len: int, t_len: int) -> AttentionMask:
    """Causal mask over the concatenation [source; target]."""
    if s_len < 1:
        raise ValueError("s_len must be >= 1")
    return make_causal_mask(s_len + t_len)


def make_prefix_mask(s_len: int, t_len: int) -> AttentionMask:
    """Source block fully visible to every position; target part causal.

    Source rows never see target keys, so this is also the bidirectional
    source mask used by PALM.
    """
    if s_len < 1:
        raise ValueError("s_len must be >= 1")
    n = s_len + t_len
    allowed = np.tri(n, dtype=bool)
    allowed[:, :s_len] = True
    return AttentionMask(allowed)


def _check_operands(q, k, v, w: AttentionWeights, mask: AttentionMask):
    q, k, v = as_matrix(q), as_matrix(k), as_matrix(v)
    d = w.d
    if q.shape[1] != d or k.shape[1] != d or v.shape[1] != d:
        raise DimensionError(f"q, k, v must have {d} columns")
    if k.shape[0] != v.shape[0]:
        raise DimensionError("k and v must have the same number of rows")
    if (mask.rows, mask.cols) != (q.shape[0], k.shape[0]):
        raise DimensionError(f"mask is {mask.rows}x{mask.cols}, expected {q.shape[0]}x{k.shape[0]}")
    return q, k, v


def attention_probs(q, k, w: AttentionWeights, mask: AttentionMask) -> np.ndarray:
    """The post-softmax matrix P (query rows x key rows)."""
    q, k, _ = _check_operands(q, k, k, w, mask)
    logits = (q @ w.w_q @ w.w_k.T @ k.T) / np.sqrt(w.d)
    logits[~mask.allowed] = -np.inf
    return softmax_rows(logits)


def attend(q, k, v, w: AttentionWeights, mask: AttentionMask, return_probs: bool = False):
    q, k, v = _check_operands(q, k, v, w, mask)
    p = attention_probs(q, k, w, mask)
    z = p @ v @ w.w_v
    return (z, p) if return_probs else z


@dataclass(frozen=True)
class PartialAttentionParams:
    """Feedforward F_P (two d x d layers with biases) plus the inner attention."""

    w_p1: np.ndarray
    w_p2: np.ndarray
    b_p1: np.ndarray
    b_p2: np.ndarray
    inner: AttentionWeights
    dropout_rate: float = 0.0

    def __post_init__(self):
        d = self.inner.d
        for name in ("w_p1", "w_p2"):
            m = as_matrix(getattr(self, name))
            if m.shape != (d, d):
                raise DimensionError(f"{name} must be {d}x{d}")
            object.__setattr__(self, name, m)
        for name in ("b_p1", "b_p2"):
            b = np.asarray(getattr(self, name), dtype=np.float64).ravel()
            if b.shape != (d,):
                raise DimensionError(f"{name} must have length {d}")
            object.__setattr__(self, name, b)
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")


def dropout(x: np.ndarray, rate: float, rng: SeededRng | None, train_mode: bool) -> np.ndarray:
    """Inverted dropout; identity outside training."""
    if not train_mode or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("train_mode dropout needs an rng")
    keep = rng.random(x.shape) >= rate
    return np.where(keep, x / (1.0 - rate), 0.0)


def partial_feedforward(source_rows: np.ndarray, p: PartialAttentionParams,
                        rng: SeededRng | None = None, train_mode: bool = False) -> np.ndarray:
    """F_P: P1 = drop(tanh(X W1 + b1)), P2 = drop(P1 W2 + b2), return P1 + P2."""
    p1 = dropout(np.tanh(source_rows @ p.w_p1 + p.b_p1), p.dropout_rate, rng, train_mode)
    p2 = dropout(p1 @ p.w_p2 + p.b_p2, p.dropout_rate, rng, train_mode)
    return p2 + p1


def partial_attention_block(q_l, s_len: int, p: PartialAttentionParams,
                            rng: SeededRng | None = None, train_mode: bool = False) -> np.ndarray:
    """Every row of ``q_l`` attends to F_P of its first ``s_len`` rows only.

    The inner attention therefore always has exactly ``s_len`` keys, however
    many target rows follow the source.
    """
    q_l = as_matrix(q_l)
    if s_len < 1:
        raise ValueError("s_len must be >= 1")
    if s_len > q_l.shape[0]:
        raise ValueError(f"s_len={s_len} exceeds the {q_l.shape[0]} available rows")
    keys = partial_feedforward(q_l[:s_len], p, rng, train_mode)
    return attend(q_l, keys, keys, p.inner, full_mask(q_l.shape[0], s_len))

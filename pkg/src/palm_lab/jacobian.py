"""Sensitivity of an attention output row to one source row.

Two settings are compared.  In *encoder attention* the target rows ``Y``
query the source ``X`` only: ``Z = ATT(Y, X, X)``.  In *cross unidirectional*
attention they query the concatenation ``[X; Y]`` under a causal mask, as a
decoder-only LM does.  A third, *partial*, setting routes the source through
the partial-attention feedforward first and queries only that, as PALM does.

Conventions: ``i`` (query step) and ``j`` (source row) are 1-indexed here,
storage is 0-indexed.  ``a`` is the bilinear form of the logits,
``logit(y, x) = x^T a y / sqrt(d)``; the closed forms fold the ``1/sqrt(d)``
into ``a`` so they agree with :func:`palm_lab.attention.attend`.  ``w`` is the
value projection W_V.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Sequence

import numpy as np
from scipy.stats import spearmanr

from .attention import (
    AttentionMask,
    AttentionWeights,
    PartialAttentionParams,
    attend,
    full_mask,
    make_cross_unidirectional_mask,
    partial_attention_block,
)
from .core_math import (
    DimensionError,
    SeededRng,
    as_matrix,
    finite_difference_jacobian,
    frobenius_norm,
    softmax_rows,
    spectral_norm,
)


class Mode(str, Enum):
    ENCODER = "encoder_attention"
    CROSS = "cross_unidirectional"
    PARTIAL = "partial_attention"

    @classmethod
    def parse(cls, value: str | Mode) -> Mode:
        if isinstance(value, Mode):
            return value
        aliases = {"encoder": cls.ENCODER, "cross": cls.CROSS, "palm": cls.PARTIAL,
                   "partial": cls.PARTIAL}
        return aliases.get(value) or cls(value)


@dataclass(frozen=True)
class SensitivityQuery:
    x: np.ndarray
    y: np.ndarray
    a: np.ndarray
    w: np.ndarray
    i: int
    j: int
    mode: Mode = Mode.ENCODER
    # only used in partial mode; its inner weights are rebuilt from a and w
    partial: PartialAttentionParams | None = None

    def __post_init__(self):
        x, y, a, w = (as_matrix(m) for m in (self.x, self.y, self.a, self.w))
        d = x.shape[1]
        if y.shape[1] != d or a.shape != (d, d) or w.shape != (d, d):
            raise DimensionError("x, y, a, w must share the width d")
        if not 1 <= self.j <= x.shape[0]:
            raise IndexError(f"source index j={self.j} outside 1..{x.shape[0]}")
        if not 1 <= self.i <= y.shape[0]:
            raise IndexError(f"step i={self.i} outside 1..{y.shape[0]}")
        mode = Mode.parse(self.mode)
        if mode is Mode.PARTIAL and self.partial is None:
            raise ValueError("partial mode needs PartialAttentionParams")
        for name, val in zip("xyaw", (x, y, a, w)):
            object.__setattr__(self, name, val)
        object.__setattr__(self, "mode", mode)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    def weights(self) -> AttentionWeights:
        """Weights whose derived A equals ``a`` and whose W_V is ``w``."""
        return AttentionWeights(w_q=self.a.T, w_k=np.eye(self.d), w_v=self.w)

    def with_source_row(self, row: np.ndarray) -> SensitivityQuery:
        x = self.x.copy()
        x[self.j - 1] = row
        return replace(self, x=x)


def attention_row(q: SensitivityQuery) -> np.ndarray:
    """Executable forward path: the output vector z_i."""
    w = q.weights()
    y_i = q.y[q.i - 1:q.i]
    if q.mode is Mode.ENCODER:
        return attend(y_i, q.x, q.x, w, full_mask(1, q.n))[0]
    if q.mode is Mode.CROSS:
        keys = np.vstack([q.x, q.y])
        mask = make_cross_unidirectional_mask(q.n, q.y.shape[0]).tail(q.n + q.i - 1)
        return attend(y_i, keys, keys, w, AttentionMask(mask.allowed[:1]))[0]
    params = replace(q.partial, inner=w)
    return partial_attention_block(np.vstack([q.x, y_i]), q.n, params)[-1]


def _softmax_derivative(p: np.ndarray) -> np.ndarray:
    return np.diag(p) - np.outer(p, p)


def encoder_attention_jacobian(q: SensitivityQuery) -> np.ndarray:
    """dz_i/dx_j = W^T (X^T (Diag(p_i) - p_i p_i^T) e_ji Y A^T + p_ij I)."""
    if q.mode is not Mode.ENCODER:
        raise ValueError("query is not in encoder_attention mode")
    a = q.a / math.sqrt(q.d)
    i, j = q.i - 1, q.j - 1
    p = softmax_rows(q.y @ a.T @ q.x.T)[i]
    e = np.zeros((q.n, q.y.shape[0]))
    e[j, i] = 1.0
    inner = q.x.T @ _softmax_derivative(p) @ (e @ q.y @ a.T) + p[j] * np.eye(q.d)
    return q.w.T @ inner


def self_attention_jacobian(qm, a, w, i: int, j: int, mask: AttentionMask | None = None) -> np.ndarray:
    """dz_i/dq_j for Z = softmax(Q A^T Q^T / sqrt(d)) Q W, including the
    extra query-side term when i == j.  Indices are 1-indexed.

    ``mask`` (default: none) zeroes disallowed entries of P; the formula is
    unchanged because masked probabilities and their derivatives vanish.
    """
    qm, a, w = as_matrix(qm), as_matrix(a), as_matrix(w)
    n, d = qm.shape
    if not (1 <= i <= n and 1 <= j <= n):
        raise IndexError(f"indices ({i}, {j}) outside 1..{n}")
    a = a / math.sqrt(d)
    logits = qm @ a.T @ qm.T
    if mask is not None:
        logits[~mask.allowed] = -np.inf
    p = softmax_rows(logits)[i - 1]
    e = np.zeros((n, n))
    e[j - 1, i - 1] = 1.0
    delta = 1.0 if i == j else 0.0
    inner = qm.T @ _softmax_derivative(p) @ (e @ qm @ a.T + delta * (qm @ a)) + p[j - 1] * np.eye(d)
    return w.T @ inner


def cross_attention_jacobian(q: SensitivityQuery) -> np.ndarray:
    """Jacobian of row N+i of causal self-attention over [X; Y] w.r.t. x_j."""
    if q.mode is not Mode.CROSS:
        raise ValueError("query is not in cross_unidirectional mode")
    if q.j > q.n:
        raise ValueError("target-row sensitivity out of scope")
    stacked = np.vstack([q.x, q.y])
    mask = make_cross_unidirectional_mask(q.n, q.y.shape[0])
    return self_attention_jacobian(stacked, q.a, q.w, q.n + q.i, q.j, mask)


def partial_attention_jacobian(q: SensitivityQuery) -> np.ndarray:
    """dz_i/dx_j through the partial-attention path (dropout off).

    F_P acts row-wise, so x_j only moves key row j of P = F_P(X).  The chain
    rule gives the encoder-attention Jacobian with P as the keys, times
    dP_j/dx_j = (I + W2^T) diag(1 - tanh^2) W1^T.
    """
    if q.mode is not Mode.PARTIAL:
        raise ValueError("query is not in partial_attention mode")
    p = q.partial
    hidden = np.tanh(q.x @ p.w_p1 + p.b_p1)
    keys = hidden @ p.w_p2 + p.b_p2 + hidden
    outer = encoder_attention_jacobian(replace(q, x=keys, mode=Mode.ENCODER, partial=None))
    local = (np.eye(q.d) + p.w_p2.T) @ np.diag(1.0 - hidden[q.j - 1] ** 2) @ p.w_p1.T
    return outer @ local


def jacobian(q: SensitivityQuery) -> np.ndarray:
    if q.mode is Mode.ENCODER:
        return encoder_attention_jacobian(q)
    if q.mode is Mode.CROSS:
        return cross_attention_jacobian(q)
    return partial_attention_jacobian(q)


def numerical_jacobian(q: SensitivityQuery, h: float = 1e-6) -> np.ndarray:
    """Central differences of :func:`attention_row` in x_j."""
    return finite_difference_jacobian(lambda row: attention_row(q.with_source_row(row)),
                                      q.x[q.j - 1], h)


def sensitivity(jac, norm: str = "spectral") -> float:
    if norm == "spectral":
        return spectral_norm(jac)
    if norm == "frobenius":
        return frobenius_norm(jac)
    raise ValueError(f"unknown norm {norm!r}")


def theorem_bound(n: int, i: int, delta: float, c3: float = 1.0) -> float:
    """c3 * (1/(N+i) + sqrt(ln(1/delta))); i = 0 is the encoder-attention case."""
    if n < 1 or i < 0:
        raise ValueError("need N >= 1 and i >= 0")
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    if c3 <= 0:
        raise ValueError("c3 must be positive")
    return c3 * (1.0 / (n + i) + math.sqrt(math.log(1.0 / delta)))


def expected_attention_check(rng: SeededRng, d: int, d_x: int, trials: int,
                             queries: int = 4) -> float:
    """Largest relative deviation of a column's mean attention from 1/d_x.

    Each trial draws Gaussian queries (``queries`` rows) and ``d_x`` Gaussian
    keys; the mean of P[:, j] is taken over query rows and trials.
    """
    if trials < 1000:
        raise ValueError("trials must be >= 1000")
    q = rng.normal((trials, queries, d))
    k = rng.normal((trials, d_x, d))
    logits = np.einsum("tqd,tkd->tqk", q, k) / math.sqrt(d)
    logits -= logits.max(axis=2, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=2, keepdims=True)
    col_means = p.mean(axis=(0, 1))
    return float(np.max(np.abs(col_means * d_x - 1.0)))


def perturbation_ratio(q: SensitivityQuery, eps: float = 1e-4, rng: SeededRng | None = None) -> float:
    """||dz_i|| / ||dx_j|| for one random perturbation of norm ``eps``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    rng = rng or SeededRng(0)
    direction = rng.normal((q.d,))
    dx = direction * (eps / np.linalg.norm(direction))
    z0 = attention_row(q)
    z1 = attention_row(q.with_source_row(q.x[q.j - 1] + dx))
    return float(np.linalg.norm(z1 - z0) / np.linalg.norm(dx))


@dataclass
class SensitivityReport:
    steps: list[int]
    mean_sensitivity: list[float]
    std_sensitivity: list[float]
    theorem_bound: list[float]
    perturbation_ratio: list[float]
    mode: Mode
    seeds: list[int]
    norm: str = "spectral"
    c3: float = field(default=1.0)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["step", "mean_sensitivity", "std_sensitivity", "bound", "perturbation_ratio"])
        for row in zip(self.steps, self.mean_sensitivity, self.std_sensitivity,
                       self.theorem_bound, self.perturbation_ratio):
            writer.writerow([row[0]] + [f"{v:.17g}" for v in row[1:]])
        return buf.getvalue()

    def spearman(self, series: str = "mean_sensitivity") -> float:
        return spearman_rho(self.steps, getattr(self, series))


def read_report_csv(text: str) -> dict[str, list[float]]:
    rows = list(csv.DictReader(io.StringIO(text)))
    return {key: [float(r[key]) for r in rows] for key in rows[0]} if rows else {}


def spearman_rho(x: Sequence[float], y: Sequence[float]) -> float:
    return float(spearmanr(x, y).statistic)


def random_partial_params(rng: SeededRng, d: int, low: float = -1.0, high: float = 1.0) -> PartialAttentionParams:
    eye = np.eye(d)
    return PartialAttentionParams(
        w_p1=rng.uniform(low, high, (d, d)),
        w_p2=rng.uniform(low, high, (d, d)),
        b_p1=rng.uniform(low, high, (d,)),
        b_p2=rng.uniform(low, high, (d,)),
        inner=AttentionWeights(eye, eye, eye),
    )


def random_query(rng: SeededRng, d: int, n: int, steps: int, mode: Mode | str,
                 low: float = -1.0, high: float = 1.0) -> SensitivityQuery:
    """Fresh i.i.d. U[low, high] instance with i = steps, j = 1."""
    mode = Mode.parse(mode)
    x = rng.uniform(low, high, (n, d))
    y = rng.uniform(low, high, (steps, d))
    a = rng.uniform(low, high, (d, d))
    w = rng.uniform(low, high, (d, d))
    partial = random_partial_params(rng, d, low, high) if mode is Mode.PARTIAL else None
    return SensitivityQuery(x, y, a, w, i=steps, j=1, mode=mode, partial=partial)


def sensitivity_curve(d: int, n: int, i_max: int, mode: Mode | str, seeds: Sequence[int],
                      norm: str = "spectral", eps: float = 1e-4, delta: float = 0.5,
                      low: float = -1.0, high: float = 1.0) -> SensitivityReport:
    """Mean sensitivity over all source rows and seeds at every step 1..i_max.

    Each seed draws one X, Y, A, W (and F_P parameters in partial mode) that
    are reused for every step.  The theorem bound is scaled so it passes
    through the step-1 mean; it is a shape reference only.
    """
    if i_max < 1:
        raise ValueError("i_max must be >= 1")
    mode = Mode.parse(mode)
    seeds = sorted(int(s) for s in seeds)
    sens = np.zeros((len(seeds), i_max, n))
    ratio = np.zeros_like(sens)
    for si, seed in enumerate(seeds):
        rng = SeededRng(seed)
        base = random_query(rng, d, n, i_max, mode, low, high)
        perturb_rng = rng.spawn(1)
        for step in range(1, i_max + 1):
            for j in range(1, n + 1):
                q = replace(base, i=step, j=j)
                sens[si, step - 1, j - 1] = sensitivity(jacobian(q), norm)
                ratio[si, step - 1, j - 1] = perturbation_ratio(q, eps, perturb_rng)
    mean = sens.mean(axis=(0, 2))
    std = sens.std(axis=(0, 2))
    steps = list(range(1, i_max + 1))
    offset = (lambda s: s) if mode is Mode.CROSS else (lambda s: 0)
    shape = [theorem_bound(n, offset(s), delta) for s in steps]
    c3 = float(mean[0] / shape[0]) if mean[0] > 0 else 1.0
    return SensitivityReport(
        steps=steps,
        mean_sensitivity=mean.tolist(),
        std_sensitivity=std.tolist(),
        theorem_bound=[c3 * b for b in shape],
        perturbation_ratio=ratio.mean(axis=(0, 2)).tolist(),
        mode=mode,
        seeds=seeds,
        norm=norm,
        c3=c3,
    )


@dataclass
class VerificationResult:
    trials: int
    max_error: float
    worst_seed: int
    worst_instance: dict

    @property
    def passed(self) -> bool:
        return self.max_error <= 1e-6


def verify_closed_forms(trials: int, max_d: int = 8, max_n: int = 6, max_i: int = 4,
                        seed: int = 0, h: float = 1e-6,
                        modes: Sequence[Mode | str] = (Mode.ENCODER, Mode.CROSS)) -> VerificationResult:
    """Closed-form Jacobians against central differences on random instances.

    Trial k uses seed ``seed + k`` to draw d, N, i, j and the mode, then a
    U[-1, 1] instance.  The error is ||J - J_fd||_F / ||J_fd||_F.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if min(max_d, max_n, max_i) < 1:
        raise ValueError("dimension limits must be >= 1")
    modes = [Mode.parse(m) for m in modes]
    worst = (-1.0, seed, {})
    for k in range(trials):
        rng = SeededRng(seed + k)
        d = 1 + int(rng.integers(max_d))
        n = 1 + int(rng.integers(max_n))
        i = 1 + int(rng.integers(max_i))
        j = 1 + int(rng.integers(n))
        mode = modes[int(rng.integers(len(modes)))]
        q = replace(random_query(rng.spawn(1), d, n, i, mode), j=j)
        exact = numerical_jacobian(q, h)
        denom = frobenius_norm(exact)
        err = frobenius_norm(jacobian(q) - exact) / (denom if denom > 0 else 1.0)
        if err > worst[0]:
            worst = (err, seed + k, {"d": d, "N": n, "i": i, "j": j, "mode": mode.value})
    return VerificationResult(trials, worst[0], worst[1], worst[2])

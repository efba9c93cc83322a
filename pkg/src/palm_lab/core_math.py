"""Dense float64 linear algebra, stable softmax, seeded randomness and the
finite-difference oracle.

Matrices are plain ``numpy.ndarray`` objects of dtype float64 in C (row-major)
order; :func:`as_matrix` is the single entry point that enforces this.

Randomness comes from :class:`SeededRng`, a counter-based splitmix64
generator.  Output ``n`` of a generator seeded with ``s`` is
``mix(s + n * 0x9E3779B97F4A7C15)`` with the standard splitmix64 finalizer,
so the uint64 stream is bit-identical on every platform.  Uniform doubles use
the top 53 bits; Gaussian draws use Box-Muller on pairs of uniforms.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(ValueError):
    """A NaN or infinity appeared where only finite values are allowed."""


class ConvergenceError(RuntimeError):
    """An iterative method ran out of iterations.

    ``estimate`` holds the best value reached before giving up.
    """

    def __init__(self, message: str, estimate: float):
        super().__init__(message)
        self.estimate = estimate


def _splitmix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


class SeededRng:
    """Deterministic splitmix64 stream.

    All stochastic behaviour in the package (initialisation, dropout, batch
    order, synthetic data, perturbation directions) draws from one of these.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self._counter = 0

    def spawn(self, key: int) -> SeededRng:
        """Independent child stream; depends only on the seed and ``key``."""
        with np.errstate(over="ignore"):
            mixed = _splitmix(np.array([self.seed ^ ((int(key) * 0xD1B54A32D192ED03) & _MASK64)],
                                       dtype=np.uint64))
        return SeededRng(int(mixed[0]))

    def next_u64(self, n: int) -> np.ndarray:
        idx = np.arange(self._counter + 1, self._counter + n + 1, dtype=np.uint64)
        self._counter += n
        with np.errstate(over="ignore"):
            return _splitmix(np.uint64(self.seed) + idx * _GOLDEN)

    def random(self, shape: int | tuple[int, ...] = ()) -> np.ndarray | float:
        """Uniform doubles in [0, 1)."""
        size = int(np.prod(shape, dtype=np.int64))
        u = (self.next_u64(size) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        if shape == ():
            return float(u[0])
        return u.reshape(shape)

    def uniform(self, low: float, high: float, shape: int | tuple[int, ...] = ()) -> np.ndarray | float:
        return low + (high - low) * self.random(shape)

    def normal(self, shape: int | tuple[int, ...] = ()) -> np.ndarray | float:
        size = int(np.prod(shape, dtype=np.int64))
        u = self.random((2 * size,)).reshape(2, size) if size else np.zeros((2, 0))
        r = np.sqrt(-2.0 * np.log1p(-u[0]))
        z = r * np.cos(2.0 * np.pi * u[1])
        if shape == ():
            return float(z[0])
        return z.reshape(shape)

    def integers(self, high: int, shape: int | tuple[int, ...] = ()) -> np.ndarray | int:
        """Integers in [0, high)."""
        if high < 1:
            raise ValueError("high must be >= 1")
        size = int(np.prod(shape, dtype=np.int64))
        vals = (self.next_u64(size) % np.uint64(high)).astype(np.int64)
        if shape == ():
            return int(vals[0])
        return vals.reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.random((n,)), kind="stable")


def as_matrix(m, *, allow_neg_inf: bool = False) -> np.ndarray:
    """Coerce to a 2-D float64 C-ordered array and check entries are finite."""
    arr = np.ascontiguousarray(m, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got shape {arr.shape}")
    bad = np.isnan(arr) | (np.isinf(arr) & ~(allow_neg_inf & (arr < 0)))
    if bad.any():
        raise NonFiniteError("matrix has non-finite entries")
    return arr


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def softmax_rows(m) -> np.ndarray:
    """Row-wise softmax.  ``-inf`` entries are masked keys and map to exactly 0."""
    m = as_matrix(m, allow_neg_inf=True)
    if m.shape[1] == 0:
        raise DimensionError("softmax over zero columns")
    row_max = m.max(axis=1, keepdims=True)
    if np.isneginf(row_max).any():
        raise ValueError("fully masked row")
    e = np.exp(m - row_max)
    return e / e.sum(axis=1, keepdims=True)


def frobenius_norm(m) -> float:
    m = as_matrix(m)
    return float(np.sqrt(np.sum(m * m)))


# fixed start vector so power iteration is reproducible without an rng argument
_POWER_START_SEED = 0x5EED


def spectral_norm(m, tol: float = 1e-10, max_iter: int = 10000) -> float:
    """Largest singular value by power iteration on ``m.T @ m``.

    Stops when the Rayleigh quotient changes by less than ``tol`` relative to
    its current value.
    """
    m = as_matrix(m)
    if m.size == 0:
        raise DimensionError("spectral norm of an empty matrix")
    gram = m.T @ m
    if not gram.any():
        return 0.0
    v = SeededRng(_POWER_START_SEED).normal((gram.shape[0],))
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        w = gram @ v
        lam_new = float(v @ w)
        nrm = np.linalg.norm(w)
        if nrm == 0.0:
            return 0.0
        v = w / nrm
        if abs(lam_new - lam) <= tol * abs(lam_new):
            return float(np.sqrt(max(lam_new, 0.0)))
        lam = lam_new
    raise ConvergenceError(f"power iteration did not converge in {max_iter} steps",
                           float(np.sqrt(max(lam, 0.0))))


def glorot_bound(rows: int, cols: int) -> float:
    return float(np.sqrt(6.0 / (rows + cols)))


def init_uniform(rows: int, cols: int, bound: float | None, rng: SeededRng) -> np.ndarray:
    """I.i.d. U[-bound, bound] entries; ``bound=None`` means the Glorot bound."""
    if bound is None:
        bound = glorot_bound(rows, cols)
    if bound <= 0:
        raise ValueError("bound must be positive")
    return rng.uniform(-bound, bound, (rows, cols))


def finite_difference_jacobian(f: Callable[[np.ndarray], np.ndarray], x, h: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian; column j is (f(x + h e_j) - f(x - h e_j)) / 2h."""
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.asarray(x, dtype=np.float64).ravel()
    cols = []
    for j in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[j] += h
        xm[j] -= h
        fp = np.asarray(f(xp), dtype=np.float64).ravel()
        fm = np.asarray(f(xm), dtype=np.float64).ravel()
        if not (np.isfinite(fp).all() and np.isfinite(fm).all()):
            raise NonFiniteError(f"f returned non-finite values around coordinate {j}")
        cols.append((fp - fm) / (2.0 * h))
    return np.stack(cols, axis=1)

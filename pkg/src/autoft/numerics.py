"""Dense float64 primitives, seeded sampling and a finite-difference checker.

Matrices are plain ``numpy.ndarray`` objects of dtype float64. The helpers
here add the shape checks and numerically stable forms the rest of the
package relies on.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ParameterError, ShapeError

GUMBEL_EPS = 1e-12
EULER_GAMMA = 0.5772156649015329


def as_matrix(values: Sequence[float] | np.ndarray, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    a = np.asarray(values, dtype=np.float64)
    if rows is not None and cols is not None:
        if a.size != rows * cols:
            raise ShapeError(f"cannot view {a.size} values as {rows}x{cols}")
        a = a.reshape(rows, cols)
    return a


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def sigmoid(x):
    """Logistic function, split on sign so ``exp`` never overflows."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def softmax(logits, tau: float = 1.0, axis: int = -1) -> np.ndarray:
    if not tau > 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    z = np.asarray(logits, dtype=np.float64) / tau
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    zmax = z.max(axis=axis, keepdims=True)
    return z - zmax - np.log(np.exp(z - zmax).sum(axis=axis, keepdims=True))


def gumbel_from_uniform(u):
    u = np.clip(np.asarray(u, dtype=np.float64), GUMBEL_EPS, 1.0 - GUMBEL_EPS)
    g = -np.log(-np.log(u))
    return g if g.ndim else float(g)


class SeededRng:
    """Reproducible random stream.

    Backed by numpy's PCG64 bit generator, whose output stream is fixed for a
    given seed on every platform. Child streams are derived with
    ``SeedSequence`` from the parent seed plus integer keys, so e.g. a
    per-(epoch, batch) stream does not depend on how many draws happened
    before it.
    """

    def __init__(self, seed: int, *keys: int):
        self.seed = int(seed)
        self.keys = tuple(int(k) for k in keys)
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, *self.keys])))

    def child(self, *keys: int) -> SeededRng:
        return SeededRng(self.seed, *self.keys, *keys)

    def uniform(self, size=None, low: float = 0.0, high: float = 1.0):
        return self._gen.uniform(low, high, size)

    def normal(self, size=None, scale: float = 1.0):
        return self._gen.normal(0.0, scale, size)

    def integers(self, high: int, size=None):
        return self._gen.integers(0, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def gumbel(self, size=None):
        return gumbel_from_uniform(self._gen.random(size))


def sample_gumbel(rng: SeededRng) -> float:
    return rng.gumbel()


def finite_difference_check(
    f: Callable[[np.ndarray], float],
    point: np.ndarray,
    analytic_grad: np.ndarray,
    h: float = 1e-5,
) -> float:
    """Max relative error between ``analytic_grad`` and central differences of ``f``.

    Per coordinate the error is ``|fd - g| / max(|fd|, |g|, 1e-8)``.
    """
    x = np.array(point, dtype=np.float64).ravel()
    g = np.asarray(analytic_grad, dtype=np.float64).ravel()
    if g.shape != x.shape:
        raise ShapeError(f"gradient shape {g.shape} does not match point shape {x.shape}")
    worst = 0.0
    for i in range(x.size):
        orig = x[i]
        x[i] = orig + h
        fp = f(x)
        x[i] = orig - h
        fm = f(x)
        x[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value at coordinate {i}")
        fd = (fp - fm) / (2.0 * h)
        err = abs(fd - g[i]) / max(abs(fd), abs(g[i]), 1e-8)
        worst = max(worst, err)
    return worst

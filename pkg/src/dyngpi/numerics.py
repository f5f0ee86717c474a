"""Seeded random generation and the small dense linear algebra used by the
simulator and the neural engine.

All arrays are float64. ``Rng`` wraps a numpy ``Generator`` (PCG64) and adds
deterministic sub-stream splitting: ``Rng(seed).child(a, b)`` derives its
state from ``SeedSequence(seed, spawn_key=(a, b))`` so that the stream for a
given (seed, key path) never depends on what other streams were drawn.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    pass


class NotPositiveDefiniteError(ValueError):
    pass


def _key_int(k) -> int:
    if isinstance(k, (int, np.integer)):
        if k < 0:
            raise ValueError(f"stream keys must be non-negative, got {k}")
        return int(k)
    if isinstance(k, float):
        return zlib.crc32(repr(k).encode())
    if isinstance(k, str):
        return zlib.crc32(k.encode())
    raise TypeError(f"unsupported stream key {k!r}")


class Rng:
    """Single-owner PRNG stream identified by ``(seed, path)``."""

    def __init__(self, seed: int, path: tuple = ()):
        self.seed = int(seed)
        self.path = tuple(_key_int(k) for k in path)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.path)
        self.gen = np.random.Generator(np.random.PCG64(ss))

    def child(self, *keys) -> "Rng":
        """Independent sub-stream; ints and strings are both accepted as keys."""
        return Rng(self.seed, self.path + tuple(_key_int(k) for k in keys))

    def uniform(self, size=None):
        return self.gen.random(size)

    def normal(self, size=None):
        return self.gen.standard_normal(size)

    def permutation(self, n):
        return self.gen.permutation(n)

    def __repr__(self):
        return f"Rng(seed={self.seed}, path={self.path})"


@dataclass(frozen=True)
class CholFactor:
    lower: np.ndarray

    @property
    def order(self) -> int:
        return self.lower.shape[0]

    def reconstruct(self) -> np.ndarray:
        return self.lower @ self.lower.T

    @classmethod
    def zero(cls, d: int) -> "CholFactor":
        """Degenerate factor: ``sample_mvn`` then returns the mean exactly."""
        return cls(np.zeros((d, d)))


def compound_symmetry(d: int, diag: float = 1.0, offdiag: float = 0.2) -> np.ndarray:
    sigma = np.full((d, d), float(offdiag))
    np.fill_diagonal(sigma, diag)
    return sigma


def cholesky(sigma) -> CholFactor:
    sigma = np.asarray(sigma, dtype=np.float64)
    if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1]:
        raise ShapeError(f"expected a square matrix, got shape {sigma.shape}")
    if not np.all(np.isfinite(sigma)):
        raise ShapeError("matrix has non-finite entries")
    scale = max(1.0, float(np.max(np.abs(sigma))))
    if np.max(np.abs(sigma - sigma.T)) > 1e-12 * scale:
        raise ShapeError("matrix is not symmetric")
    try:
        lower = np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError(str(exc)) from None
    if not np.all(np.diag(lower) > 0):
        raise NotPositiveDefiniteError("non-positive pivot")
    return CholFactor(lower)


def sample_mvn(mean, factor: CholFactor, rng: Rng, size: int | None = None) -> np.ndarray:
    """Draw ``mean + L z``; with ``size`` returns an array of shape (size, d)."""
    mean = np.asarray(mean, dtype=np.float64)
    d = factor.order
    if mean.shape != (d,):
        raise ShapeError(f"mean has shape {mean.shape}, factor has order {d}")
    if size is None:
        return mean + factor.lower @ rng.normal(d)
    z = rng.normal((size, d))
    return mean + z @ factor.lower.T


_POISSON_MAX_RATE = 30.0


def sample_poisson(lam: float, rng: Rng, size: int | None = None):
    """Poisson draws by CDF inversion. Rates above 30 are not supported."""
    lam = float(lam)
    if not np.isfinite(lam) or lam < 0:
        raise ValueError(f"Poisson rate must be finite and non-negative, got {lam}")
    if lam > _POISSON_MAX_RATE:
        raise ValueError(f"Poisson rate {lam} above supported maximum {_POISSON_MAX_RATE}")
    u = np.atleast_1d(rng.uniform(1 if size is None else size))
    out = np.zeros(u.shape, dtype=np.int64)
    if lam > 0:
        pmf = np.exp(-lam)
        cdf = pmf
        k = 0
        active = u > cdf
        while active.any():
            k += 1
            pmf *= lam / k
            cdf += pmf
            out[active] = k
            active &= u > cdf
            if k > 1000:  # cdf rounding stalls just below 1
                break
    return int(out[0]) if size is None else out


def sample_bernoulli(p, rng: Rng, size: int | None = None):
    p_arr = np.asarray(p, dtype=np.float64)
    if np.any(~np.isfinite(p_arr)) or np.any(p_arr < 0) or np.any(p_arr > 1):
        raise ValueError("Bernoulli probability outside [0, 1]")
    if size is None and p_arr.ndim == 0:
        return int(rng.uniform() < p_arr)
    shape = p_arr.shape if size is None else size
    return (rng.uniform(shape) < p_arr).astype(np.int8)

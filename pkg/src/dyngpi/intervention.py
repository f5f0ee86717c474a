"""Incremental stochastic interventions on a binary treatment sequence.

The intervention at segment ``s`` multiplies the odds of treatment given the
observed treatment history by ``delta_s``:

    q = delta * p / (delta * p + 1 - p)

Treatment histories are keyed by bitstrings, most significant bit first
(segment 1 leftmost), with ``""`` the empty history at segment 1. Internally
a history of length ``k`` is also an integer code in ``[0, 2**k)``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np


class MissingStratumError(LookupError):
    """A treatment-history pattern needed at evaluation was never observed."""

    def __init__(self, message, count=1):
        super().__init__(message)
        self.count = count


def _check_delta(delta):
    d = np.asarray(delta, dtype=np.float64)
    if np.any(~np.isfinite(d)) or np.any(d <= 0):
        raise ValueError(f"incremental parameter must be in (0, inf), got {delta}")
    return d


def _check_prob(p):
    a = np.asarray(p, dtype=np.float64)
    if np.any(~np.isfinite(a)) or np.any(a < 0) or np.any(a > 1):
        raise ValueError(f"probability outside [0, 1]: {p}")
    return a


def _scalar_or_array(x):
    return float(x) if np.ndim(x) == 0 else x


def q_shift(delta, p):
    d, a = _check_delta(delta), _check_prob(p)
    # denominator written as 1 + (delta - 1) p so that delta = 1 returns p exactly
    return _scalar_or_array(d * a / (1.0 + (d - 1.0) * a))


def dq_weight(w, delta, p):
    """Intervention mass of treatment value ``w`` (0 or 1)."""
    w_arr = np.asarray(w)
    if np.any((w_arr != 0) & (w_arr != 1)):
        raise ValueError(f"treatment must be 0 or 1, got {w}")
    q = np.asarray(q_shift(delta, p))
    return _scalar_or_array(np.where(w_arr == 1, q, 1.0 - q))


def odds_ratio(delta, p):
    a = _check_prob(p)
    if np.any((a <= 0) | (a >= 1)):
        raise ValueError("odds are undefined at p in {0, 1}")
    q = np.asarray(q_shift(delta, a))
    return _scalar_or_array((q / (1.0 - q)) * ((1.0 - a) / a))


@dataclass(frozen=True)
class InterventionSpec:
    delta: tuple

    def __post_init__(self):
        d = tuple(float(x) for x in np.atleast_1d(self.delta))
        _check_delta(d)
        if not d:
            raise ValueError("empty intervention")
        object.__setattr__(self, "delta", d)

    @classmethod
    def uniform(cls, value: float, s_max: int) -> "InterventionSpec":
        return cls((float(value),) * s_max)

    @property
    def s_max(self) -> int:
        return len(self.delta)

    def __getitem__(self, s):
        """1-based segment index."""
        return self.delta[s - 1]

    def as_array(self) -> np.ndarray:
        return np.array(self.delta)


def pattern_of(code: int, length: int) -> str:
    return format(int(code), f"0{length}b") if length else ""


def code_of(pattern: str) -> int:
    return int(pattern, 2) if pattern else 0


def history_codes(w: np.ndarray, s: int) -> np.ndarray:
    """Integer codes of the first ``s - 1`` treatments of each row of ``w``."""
    codes = np.zeros(len(w), dtype=np.int64)
    for j in range(s - 1):
        codes = 2 * codes + w[:, j].astype(np.int64)
    return codes


@dataclass
class PTables:
    """Saturated P(W_s = 1 | history, S >= s) per segment position.

    ``count[s]`` and ``treated[s]`` are arrays of length ``2**(s-1)``;
    ``p_hat(s)`` is NaN where a pattern has no units.
    """

    s_max: int
    count: dict = field(default_factory=dict)
    treated: dict = field(default_factory=dict)

    def p_hat(self, s: int) -> np.ndarray:
        c, t = self.count[s], self.treated[s]
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(c > 0, t / np.where(c > 0, c, 1), np.nan)

    def entries(self):
        """(s, pattern, count, p_hat) for every observed pattern."""
        for s in range(1, self.s_max + 1):
            p = self.p_hat(s)
            for code in np.flatnonzero(self.count[s] > 0):
                yield s, pattern_of(code, s - 1), int(self.count[s][code]), float(p[code])

    def as_dict(self) -> dict:
        return {(s, pat): p for s, pat, _, p in self.entries()}

    def get(self, s: int, pattern: str) -> float:
        code = code_of(pattern)
        if len(pattern) != s - 1 or self.count[s][code] == 0:
            raise MissingStratumError(f"no units with history {pattern!r} at segment {s}")
        return float(self.p_hat(s)[code])

    def lookup(self, s: int, codes) -> np.ndarray:
        """Vectorised p_hat; raises if any code is an unobserved pattern."""
        p = self.p_hat(s)[np.asarray(codes)]
        bad = np.isnan(p)
        if bad.any():
            raise MissingStratumError(
                f"{int(bad.sum())} lookups hit unobserved histories at segment {s}", int(bad.sum()))
        return p

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["s", "pattern", "count", "p_hat"])
            for s, pat, n, p in self.entries():
                wr.writerow([s, pat, n, repr(p)])


def fit_p_tables(split) -> PTables:
    """Exact empirical treatment frequencies per (segment, history) among
    units that reach the segment."""
    return p_tables_from_arrays(split.w, split.s_len, split.s_max)


def p_tables_from_arrays(w, s_len, s_max: int | None = None) -> PTables:
    """``w`` is an (n, s_max) 0/1 array padded beyond each unit's length."""
    w = np.asarray(w)
    s_len = np.asarray(s_len)
    if len(w) == 0:
        raise ValueError("empty split")
    s_max = int(s_max or w.shape[1])
    tab = PTables(s_max)
    for s in range(1, s_max + 1):
        at_risk = s_len >= s
        codes = history_codes(w[at_risk], s)
        size = 2 ** (s - 1)
        tab.count[s] = np.bincount(codes, minlength=size).astype(np.int64)
        tab.treated[s] = np.bincount(codes, weights=w[at_risk, s - 1], minlength=size).astype(np.int64)
    return tab

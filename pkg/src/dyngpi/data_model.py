"""Trajectories of per-segment embeddings, the on-disk dataset format and
ingestion of externally produced embeddings.

Dataset file (JSON lines, version 1). The first line is a header::

    {"d_r": 2, "format": "dyngpi-dataset", "n": 1, "s_max": 2, "version": 1}

followed by one line per unit with keys in the fixed order ``y, w, r``::

    {"y": 1.0, "w": [1, 0], "r": [[0.0, 0.0], [1.0, 1.0]]}

Floats are written with ``repr`` so a save/load round trip is exact.
"""

from __future__ import annotations

import csv
import json
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

FORMAT = "dyngpi-dataset"
VERSION = 1


class DataError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Trajectory:
    y: float
    w: np.ndarray
    r: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.w, dtype=np.int8).reshape(-1)
        r = np.asarray(self.r, dtype=np.float64)
        if r.ndim != 2:
            raise DataError(f"embedding path must be 2-d, got shape {r.shape}")
        if len(w) != len(r):
            raise DataError(f"len(w)={len(w)} but {len(r)} embeddings")
        if len(w) < 1:
            raise DataError("trajectory needs at least one segment")
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "y", float(self.y))

    @property
    def s_len(self) -> int:
        return len(self.w)

    @property
    def d_r(self) -> int:
        return self.r.shape[1]


@dataclass(frozen=True)
class LatentTruth:
    """Simulator-only latent quantities: confounder paths and outcome noise."""

    u: np.ndarray    # (n, s_max, p), zero beyond each unit's length
    eps: np.ndarray  # (n,)


class Dataset:
    """Immutable collection of trajectories stored as padded arrays.

    ``w`` is (n, s_max) int8 and ``r`` is (n, s_max, d_r); entries beyond a
    unit's segment count are zero and never read as data.
    """

    def __init__(self, y, s_len, w, r, s_max: int | None = None):
        y = np.asarray(y, dtype=np.float64)
        s_len = np.asarray(s_len, dtype=np.int64)
        w = np.asarray(w, dtype=np.int8)
        r = np.asarray(r, dtype=np.float64)
        n = len(y)
        if n == 0:
            raise DataError("dataset is empty")
        if s_len.shape != (n,) or w.ndim != 2 or r.ndim != 3 or len(w) != n or len(r) != n:
            raise DataError("inconsistent array shapes")
        width = w.shape[1]
        s_max = int(s_max or width)
        if width != s_max or r.shape[1] != s_max:
            raise DataError(f"padded width {width} does not match s_max={s_max}")
        bad = np.flatnonzero((s_len < 1) | (s_len > s_max))
        if bad.size:
            i = int(bad[0])
            raise DataError(f"unit {i}: segment count {s_len[i]} outside [1, {s_max}]")
        if not np.all(np.isfinite(y)):
            raise DataError(f"unit {int(np.flatnonzero(~np.isfinite(y))[0])}: non-finite outcome")
        if not np.all(np.isfinite(r)):
            i, s = np.argwhere(~np.isfinite(r))[0][:2]
            raise DataError(f"unit {i}, segment {s + 1}: non-finite embedding")
        if np.any((w != 0) & (w != 1)):
            i, s = np.argwhere((w != 0) & (w != 1))[0]
            raise DataError(f"unit {i}, segment {s + 1}: treatment not binary")
        self.y, self.s_len, self.w, self.r = y, s_len, w, r
        mask = self.mask
        self.w = np.where(mask, w, 0).astype(np.int8)
        self.r = r * mask[:, :, None]
        for a in (self.y, self.s_len, self.w, self.r):
            a.setflags(write=False)

    @classmethod
    def from_units(cls, units, s_max: int | None = None) -> "Dataset":
        units = list(units)
        if not units:
            raise DataError("dataset is empty")
        d_r = units[0].d_r
        longest = max(u.s_len for u in units)
        s_max = int(s_max or longest)
        if longest > s_max:
            raise DataError(f"a unit has {longest} segments but s_max={s_max}")
        n = len(units)
        w = np.zeros((n, s_max), dtype=np.int8)
        r = np.zeros((n, s_max, d_r))
        for i, u in enumerate(units):
            if u.d_r != d_r:
                raise DataError(f"unit {i}: embedding dimension {u.d_r}, expected {d_r}")
            w[i, :u.s_len] = u.w
            r[i, :u.s_len] = u.r
        return cls([u.y for u in units], [u.s_len for u in units], w, r, s_max)

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def s_max(self) -> int:
        return self.w.shape[1]

    @property
    def d_r(self) -> int:
        return self.r.shape[2]

    @property
    def mask(self) -> np.ndarray:
        return np.arange(self.w.shape[1])[None, :] < self.s_len[:, None]

    def __len__(self):
        return self.n

    def __getitem__(self, i) -> Trajectory:
        k = self.s_len[i]
        return Trajectory(self.y[i], self.w[i, :k], self.r[i, :k])

    @property
    def units(self) -> list:
        return [self[i] for i in range(self.n)]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.y[idx], self.s_len[idx], self.w[idx], self.r[idx], self.s_max)

    def structurally_equal(self, other: "Dataset") -> bool:
        return (self.s_max == other.s_max and self.d_r == other.d_r
                and np.array_equal(self.y, other.y) and np.array_equal(self.s_len, other.s_len)
                and np.array_equal(self.w, other.w) and np.array_equal(self.r, other.r))

    def __repr__(self):
        return f"Dataset(n={self.n}, s_max={self.s_max}, d_r={self.d_r})"


def save_dataset(ds: Dataset, path) -> None:
    if ds is None or ds.n == 0:
        raise DataError("refusing to save an empty dataset")
    header = {"d_r": ds.d_r, "format": FORMAT, "n": ds.n, "s_max": ds.s_max, "version": VERSION}
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for i in range(ds.n):
            k = int(ds.s_len[i])
            row = {"y": float(ds.y[i]), "w": ds.w[i, :k].tolist(), "r": ds.r[i, :k].tolist()}
            fh.write(json.dumps(row) + "\n")


def load_dataset(path) -> Dataset:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DataError(f"{path}: empty file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}:1: cannot parse header: {exc}") from None
    if header.get("format") != FORMAT or header.get("version") != VERSION:
        raise DataError(f"{path}:1: not a version-{VERSION} {FORMAT} file")
    d_r, s_max = int(header["d_r"]), int(header["s_max"])
    units = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from None
        i = len(units)
        try:
            u = Trajectory(row["y"], row["w"], row["r"])
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{path}:{lineno}: unit {i}: {exc}") from None
        if u.d_r != d_r:
            raise DataError(f"{path}:{lineno}: unit {i}: embedding dimension {u.d_r}, header says {d_r}")
        if u.s_len > s_max:
            raise DataError(f"{path}:{lineno}: unit {i}: {u.s_len} segments exceeds s_max={s_max}")
        units.append(u)
    if "n" in header and header["n"] != len(units):
        raise DataError(f"{path}: header says n={header['n']} but file has {len(units)} units")
    return Dataset.from_units(units, s_max)


def _read_embeddings(path):
    path = Path(path)
    if path.suffix == ".npy":
        arr = np.load(path)
        if arr.ndim != 3:
            raise DataError(f"{path}: expected (units, segments, dim) array, got {arr.shape}")
        arr = arr.astype(np.float64)
        return [str(i) for i in range(len(arr))], list(arr)
    ids, paths = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            if isinstance(row, dict):
                uid, vecs = str(row.get("unit_id", len(ids))), row["r"]
            else:
                uid, vecs = str(len(ids)), row
            arr = np.asarray(vecs, dtype=np.float64)
            if arr.ndim != 2:
                raise DataError(f"{path}:{lineno}: unit {uid}: embeddings must be a list of vectors")
            ids.append(uid)
            paths.append(arr)
    return ids, paths


def ingest_embeddings(embeddings_path, outcomes_path, treatments_path, s_max: int | None = None) -> Dataset:
    """Assemble a Dataset from an embeddings file (JSON lines of per-unit
    vector lists, or a float32/float64 ``.npy`` of shape (units, segments,
    dim)), an outcomes CSV ``unit_id,y`` and a treatments CSV
    ``unit_id,segment_index,w`` with 1-based segment indices."""
    ids, emb = _read_embeddings(embeddings_path)
    with open(outcomes_path, newline="") as fh:
        outcomes = {row["unit_id"].strip(): float(row["y"]) for row in csv.DictReader(fh)}
    if len(outcomes) != len(ids):
        raise DataError(f"misaligned inputs: {len(outcomes)} outcome rows vs {len(ids)} embedding units")
    treat = defaultdict(dict)
    with open(treatments_path, newline="") as fh:
        for lineno, row in enumerate(csv.DictReader(fh), start=2):
            raw = row["w"].strip()
            try:
                val = float(raw)
            except ValueError:
                val = None
            if val not in (0.0, 1.0):
                raise DataError(f"{treatments_path}:{lineno}: treatment {raw!r} is not binary")
            treat[row["unit_id"].strip()][int(row["segment_index"])] = int(val)
    units = []
    for uid, r in zip(ids, emb):
        if uid not in outcomes:
            raise DataError(f"misaligned inputs: unit {uid} has embeddings but no outcome")
        segs = treat.get(uid, {})
        if sorted(segs) != list(range(1, len(r) + 1)):
            raise DataError(
                f"misaligned inputs: unit {uid} has {len(r)} embedding segments but "
                f"treatment segments {sorted(segs)}")
        units.append(Trajectory(outcomes[uid], [segs[s] for s in range(1, len(r) + 1)], r))
    extra = set(treat) - set(ids)
    if extra:
        raise DataError(f"misaligned inputs: treatments for unknown units {sorted(extra)[:5]}")
    return Dataset.from_units(units, s_max)

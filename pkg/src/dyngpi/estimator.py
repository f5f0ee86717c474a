"""Cross-fitted estimation of the average outcome under an incremental
stochastic intervention on a sequence of segment-level treatments.

Per fold, on the out-of-fold units:

1. a shared per-segment encoder ``f(r, s)`` and an outcome head
   ``mu(w history, f history, S)`` are trained jointly on squared loss;
2. one propensity model per segment position on (S, past treatments,
   f history);
3. saturated treatment-history probabilities ``p_hat``;
4. for each intervention, backward pseudo-outcome regressions ``m_s`` and
   the history-stratum means ``tilde_m``.

In-fold units then receive their uncentered influence contributions, whose
mean is the point estimate.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .data_model import Dataset, Trajectory
from .intervention import InterventionSpec, MissingStratumError, PTables, fit_p_tables, history_codes, q_shift
from .neural import (Mlp, MlpSpec, TrainConfig, backward, fit_loop, forward, forward_cache, loss_and_grad,
                     mlp_init, train)
from .numerics import Rng

log = logging.getLogger(__name__)

Z_975 = 1.959963984540054


class EstimationError(RuntimeError):
    pass


@dataclass(frozen=True)
class Architecture:
    encoder_hidden: tuple = (64,)
    d_f: int = 32
    head_hidden: tuple = (128, 64)
    nuisance_hidden: tuple = (128, 64)


DECONF_TRAIN = TrainConfig(epochs=300, batch_size=1024, learning_rate=3e-5, patience=0, dropout_rate=0.1)
NUISANCE_TRAIN = TrainConfig(epochs=200, batch_size=200, learning_rate=1e-3, patience=5, dropout_rate=0.2,
                             validation_fraction=0.1)


@dataclass(frozen=True)
class EstimatorConfig:
    k_folds: int = 10
    arch: Architecture = Architecture()
    deconf_train: TrainConfig = DECONF_TRAIN
    nuisance_train: TrainConfig = NUISANCE_TRAIN
    c_overlap: float = 0.01
    backend: str = "neural"
    # with backend="saturated": embedding coordinates used as a fixed deconfounder
    oracle_coords: tuple = ()

    def __post_init__(self):
        if self.k_folds < 2:
            raise ValueError("k_folds must be >= 2")
        if self.backend not in ("neural", "saturated"):
            raise ValueError(f"unknown backend {self.backend!r}")
        if self.backend == "saturated" and not self.oracle_coords:
            raise ValueError("saturated backend needs oracle_coords")
        if not self.c_overlap > 0:
            raise ValueError("c_overlap must be positive")


# ---------------------------------------------------------------------------
# small regressors behind one interface


class _Standardizer:
    def __init__(self, X):
        self.mean = X.mean(axis=0)
        sd = X.std(axis=0)
        self.sd = np.where(sd > 1e-12, sd, 1.0)

    def __call__(self, X):
        return (X - self.mean) / self.sd


def _flat_start(spec: MlpSpec) -> Mlp:
    """Initialized network with a zero output layer: the untrained function is
    the constant 0 (mean target, or probability 1/2), so early-stopped fits
    carry no random initial signal."""
    m = mlp_init(spec)
    m.weights[-1][...] = 0.0
    return m


def _is_constant(y) -> bool:
    return float(np.std(y)) <= 1e-12 * max(1.0, float(np.max(np.abs(y))))


class NeuralModel:
    """Standardized-input MLP; ``kind`` is 'regression' or 'classification'."""

    def __init__(self, kind, hidden, cfg: TrainConfig, seed: int):
        self.kind, self.hidden, self.cfg, self.seed = kind, tuple(hidden), cfg, seed
        self.const = None

    def fit(self, X, y, rng: Rng):
        self.scale_x = _Standardizer(X)
        if self.kind == "classification":
            rate = float(np.mean(y))
            if rate in (0.0, 1.0):
                self.const = rate
                return self
            spec = MlpSpec((X.shape[1],) + self.hidden + (1,), "logistic", self.cfg.dropout_rate, self.seed)
            self.net = train(_flat_start(spec), self.scale_x(X), y, "logistic", self.cfg, rng)
        else:
            self.y_mean = float(np.mean(y))
            y_sd = float(np.std(y))
            if _is_constant(y):
                self.const = self.y_mean
                return self
            self.y_sd = y_sd
            spec = MlpSpec((X.shape[1],) + self.hidden + (1,), "identity", self.cfg.dropout_rate, self.seed)
            yz = (y - self.y_mean) / self.y_sd
            self.net = train(_flat_start(spec), self.scale_x(X), yz, "squared", self.cfg, rng)
        return self

    def predict(self, X):
        if self.const is not None:
            return np.full(len(X), self.const)
        out = forward(self.net, self.scale_x(X))[:, 0]
        if self.kind == "classification":
            return out
        return out * self.y_sd + self.y_mean


class SaturatedModel:
    """Cell means over exact feature rows (features must be discrete)."""

    def __init__(self, kind="regression"):
        self.kind = kind

    @staticmethod
    def _keys(X):
        X = np.ascontiguousarray(X, dtype=np.float64)
        return X.view(np.dtype((np.void, X.dtype.itemsize * X.shape[1]))).ravel()

    def fit(self, X, y, rng=None):
        keys, inv = np.unique(self._keys(X), return_inverse=True)
        inv = inv.ravel()
        means = np.bincount(inv, weights=y) / np.bincount(inv)
        self.table = dict(zip(keys.tolist(), means.tolist()))
        return self

    def predict(self, X):
        keys = self._keys(X).tolist()
        out = np.array([self.table.get(k, np.nan) for k in keys])
        missing = int(np.isnan(out).sum())
        if missing:
            raise MissingStratumError(f"{missing} rows fall in cells unseen in training", missing)
        return out


# ---------------------------------------------------------------------------
# deconfounder + outcome head


def _segment_inputs(r, s_max):
    n = r.shape[0]
    onehot = np.broadcast_to(np.eye(s_max), (n, s_max, s_max))
    return np.concatenate([r, onehot], axis=2)


def head_features(w, s_len, f) -> np.ndarray:
    """[treatments padded, presence mask, f history padded, S / s_max]."""
    n, s_max = w.shape
    mask = (np.arange(s_max)[None, :] < s_len[:, None]).astype(np.float64)
    return np.concatenate([w * mask, mask, (f * mask[:, :, None]).reshape(n, -1),
                           (s_len / s_max)[:, None]], axis=1)


@dataclass
class DeconfounderModel:
    s_max: int
    d_f: int
    encoder: Mlp | None = None
    head: Mlp | None = None
    y_mean: float = 0.0
    y_sd: float = 1.0
    oracle_coords: tuple = ()
    saturated_head: SaturatedModel | None = None

    def encode(self, r, s_len) -> np.ndarray:
        """f(r_s, s) for every present segment, zero-padded to (n, s_max, d_f)."""
        mask = np.arange(self.s_max)[None, :] < np.asarray(s_len)[:, None]
        if self.encoder is None:
            f = r[:, :, list(self.oracle_coords)]
        else:
            if r.shape[2] + self.s_max != self.encoder.n_in:
                raise ValueError(f"embedding dimension {r.shape[2]} does not match the encoder")
            inp = _segment_inputs(r, self.s_max)
            f = np.zeros((len(r), self.s_max, self.d_f))
            f[mask] = forward(self.encoder, inp[mask])
        return f * mask[:, :, None]

    def predict_mu(self, w, s_len, f) -> np.ndarray:
        if self.head is None and self.saturated_head is None:   # constant outcome
            return np.full(len(w), self.y_mean)
        X = head_features(w, s_len, f)
        if self.saturated_head is not None:
            return self.saturated_head.predict(X)
        return forward(self.head, X)[:, 0] * self.y_sd + self.y_mean

    def mu_counterfactual(self, w, s_len, f, value) -> np.ndarray:
        """Head evaluated with each unit's final treatment set to ``value``."""
        w_cf = np.array(w, dtype=np.float64)
        w_cf[np.arange(len(w)), np.asarray(s_len) - 1] = value
        return self.predict_mu(w_cf, s_len, f)


def fit_deconfounder(train_ds: Dataset, arch: Architecture, cfg: TrainConfig, rng: Rng,
                     history=None) -> DeconfounderModel:
    """Joint training of the per-segment encoder and the outcome head on
    mean squared error (outcome standardized internally)."""
    if train_ds.n < 1:
        raise EstimationError("empty training split")
    s_max, d_f = train_ds.s_max, arch.d_f
    enc = mlp_init(MlpSpec((train_ds.d_r + s_max,) + tuple(arch.encoder_hidden) + (d_f,),
                           "identity", cfg.dropout_rate, _init_seed(rng, "enc")))
    head_in = 2 * s_max + s_max * d_f + 1
    head = _flat_start(MlpSpec((head_in,) + tuple(arch.head_hidden) + (1,), "identity", cfg.dropout_rate,
                            _init_seed(rng, "head")))

    y = train_ds.y
    y_mean = float(np.mean(y))
    if _is_constant(y):
        return DeconfounderModel(s_max, d_f, enc, None, y_mean)
    y_sd = float(np.std(y))
    yz = ((y - y_mean) / y_sd)[:, None]
    mask = train_ds.mask
    seg_in = _segment_inputs(train_ds.r, s_max)
    w = train_ds.w.astype(np.float64)
    s_len = train_ds.s_len
    drop_rng = rng.child("dropout")

    def step(idx):
        m = mask[idx]
        f_seg, enc_cache = forward_cache(enc, seg_in[idx][m], cfg.dropout_rate, drop_rng)
        F = np.zeros((len(idx), s_max, d_f))
        F[m] = f_seg
        X = head_features(w[idx], s_len[idx], F)
        out, head_cache = forward_cache(head, X, cfg.dropout_rate, drop_rng)
        value, d_out = loss_and_grad(out, head_cache[2], yz[idx], "squared")
        g_head, d_x = backward(head, head_cache, d_out)
        dF = d_x[:, 2 * s_max:2 * s_max + s_max * d_f].reshape(len(idx), s_max, d_f)
        g_enc, _ = backward(enc, enc_cache, dF[m])
        return value, g_enc + g_head

    h = fit_loop(enc.params + head.params, step, train_ds.n, cfg, rng.child("order"))
    if history is not None:
        history.losses[:] = h.losses
    return DeconfounderModel(s_max, d_f, enc, head, y_mean, y_sd)


def _init_seed(rng: Rng, *name) -> int:
    return int(rng.child("init", *name).gen.integers(2 ** 63))


def fit_oracle_deconfounder(train_ds: Dataset, coords) -> DeconfounderModel:
    """Fixed encoder that reads embedding coordinates, with a saturated head."""
    model = DeconfounderModel(train_ds.s_max, len(coords), oracle_coords=tuple(coords))
    f = model.encode(train_ds.r, train_ds.s_len)
    model.saturated_head = SaturatedModel().fit(head_features(train_ds.w, train_ds.s_len, f), train_ds.y)
    return model


def encode_path(model: DeconfounderModel, traj: Trajectory) -> list:
    r = np.zeros((1, model.s_max, traj.d_r))
    r[0, :traj.s_len] = traj.r
    f = model.encode(r, [traj.s_len])[0]
    return [f[s] for s in range(traj.s_len)]


# ---------------------------------------------------------------------------
# per-position features and nuisances


def propensity_features(s, w, s_len, f) -> np.ndarray:
    """(S / s_max, W_1..W_{s-1}, f_1..f_s) for the given rows."""
    s_max = w.shape[1]
    n = len(w)
    return np.concatenate([(np.asarray(s_len) / s_max)[:, None], w[:, :s - 1].astype(np.float64),
                           f[:, :s].reshape(n, -1)], axis=1)


def regression_features(s, w, s_len, f, w_s) -> np.ndarray:
    return np.concatenate([propensity_features(s, w, s_len, f), np.asarray(w_s, dtype=np.float64)[:, None]], axis=1)


def project_overlap(pi, p, c):
    """Clip pi into [c p, 1 - c (1 - p)]."""
    pi, p = np.asarray(pi, dtype=np.float64), np.asarray(p, dtype=np.float64)
    out = np.clip(pi, c * p, 1.0 - c * (1.0 - p))
    return float(out) if out.ndim == 0 else out


def _make_model(cfg: EstimatorConfig, kind: str, rng: Rng, name):
    if cfg.backend == "saturated":
        return SaturatedModel(kind)
    return NeuralModel(kind, cfg.arch.nuisance_hidden, cfg.nuisance_train, _init_seed(rng, *name))


@dataclass
class PropensityModels:
    models: dict              # s -> fitted model
    degenerate: dict          # s -> constant class rate for single-class positions

    def predict(self, s, w, s_len, f):
        if s in self.degenerate:
            return np.full(len(w), self.degenerate[s])
        raw = self.models[s].predict(propensity_features(s, w, s_len, f))
        return np.clip(raw, 1e-7, 1 - 1e-7)

    def predict_matrix(self, w, s_len, f) -> np.ndarray:
        """Raw (unprojected) propensities, (n, s_max), zero beyond S."""
        out = np.zeros(w.shape)
        for s in range(1, w.shape[1] + 1):
            alive = s_len >= s
            if alive.any():
                out[alive, s - 1] = self.predict(s, w[alive], s_len[alive], f[alive])
        return out


def fit_propensities(w, s_len, f, cfg: EstimatorConfig, rng: Rng) -> PropensityModels:
    models, degenerate = {}, {}
    for s in range(1, w.shape[1] + 1):
        alive = s_len >= s
        if not alive.any():
            continue
        target = w[alive, s - 1].astype(np.float64)
        rate = float(target.mean())
        if rate in (0.0, 1.0):
            degenerate[s] = rate
            continue
        X = propensity_features(s, w[alive], s_len[alive], f[alive])
        models[s] = _make_model(cfg, "classification", rng, ("pi", s)).fit(X, target, rng.child("pi", s))
    return PropensityModels(models, degenerate)


def p_matrix(ptab: PTables, w, s_len) -> np.ndarray:
    """p_hat at each unit's observed history, NaN for unobserved patterns."""
    out = np.zeros(w.shape)
    for s in range(1, w.shape[1] + 1):
        alive = s_len >= s
        if alive.any():
            out[alive, s - 1] = ptab.p_hat(s)[history_codes(w[alive], s)]
    return out


# ---------------------------------------------------------------------------
# influence function


def _ratio(num, den):
    return np.divide(num, den, out=np.zeros(np.broadcast(num, den).shape), where=num > 0)


def omega_matrix(w, p, pi, delta, mask) -> np.ndarray:
    """Per-segment density ratios, set to 1 beyond each unit's length."""
    d = np.asarray(delta, dtype=np.float64)[None, :w.shape[1]]
    r1, r0 = _ratio(p, pi), _ratio(1.0 - p, 1.0 - pi)
    om = (d * w * r1 + (1 - w) * r0) / (d * p + 1.0 - p)
    return np.where(mask, om, 1.0)


def omega(traj_w, s, p, pi, delta_s) -> float:
    """Scalar weight at 1-based segment ``s`` of a treatment path."""
    w = float(traj_w[s - 1])
    r1 = p / pi if p > 0 else 0.0
    r0 = (1 - p) / (1 - pi) if p < 1 else 0.0
    return (delta_s * w * r1 + (1 - w) * r0) / (delta_s * p + 1 - p)


def omega_prefix(om) -> np.ndarray:
    """prefix[:, s-1] = prod over s' < s of omega (1 at s = 1)."""
    pre = np.ones_like(om)
    pre[:, 1:] = np.cumprod(om[:, :-1], axis=1)
    return pre


def influence_contributions(y, s_len, w, p, pi, m1, m0, tm1, tm0, delta) -> np.ndarray:
    """Uncentered influence contributions (the target is not subtracted).

    Every argument except ``y``, ``s_len`` and ``delta`` is an (n, s_max)
    array evaluated at each unit's own history; entries beyond the unit's
    length are ignored. ``pi`` must already be overlap-projected.
    """
    w = np.asarray(w, dtype=np.float64)
    s_max = w.shape[1]
    mask = np.arange(s_max)[None, :] < np.asarray(s_len)[:, None]
    d = np.asarray(delta, dtype=np.float64)[None, :s_max]
    p = np.where(mask, p, 0.5)
    pi = np.where(mask, pi, 0.5)
    denom = d * p + 1.0 - p
    r1, r0 = _ratio(p, pi), _ratio(1.0 - p, 1.0 - pi)
    om = np.where(mask, (d * w * r1 + (1 - w) * r0) / denom, 1.0)
    pre = omega_prefix(om)
    bracket = (d * m1 * (p - w * r1) + m0 * ((1.0 - p) - (1 - w) * r0)) / denom
    correction = d * (w - p) * (tm1 - tm0) / denom ** 2
    per_seg = np.where(mask, pre * bracket + correction, 0.0)
    return per_seg.sum(axis=1) + np.prod(om, axis=1) * np.asarray(y)


def influence_contribution(traj: Trajectory, p, pi, m1, m0, tm1, tm0, delta) -> float:
    """Single-trajectory form; nuisance arguments are length-S sequences."""
    S = traj.s_len
    row = lambda a: np.asarray(a, dtype=np.float64)[None, :S]
    return float(influence_contributions([traj.y], [S], row(traj.w), row(p), row(pi), row(m1), row(m0),
                                         row(tm1), row(tm0), np.asarray(delta)[:S])[0])


def tilde_m_tables(w, s_len, prefix, m1, m0, weights=None) -> dict:
    """Stratum means of prefix * m_s(., w) over units reaching segment s,
    per treatment history. Returns s -> (tm1, tm0) arrays indexed by history
    code, NaN where the stratum is empty."""
    n, s_max = w.shape
    weights = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    out = {}
    for s in range(1, s_max + 1):
        alive = s_len >= s
        size = 2 ** (s - 1)
        codes = history_codes(w[alive], s)
        wt = weights[alive]
        den = np.bincount(codes, weights=wt, minlength=size)
        with np.errstate(invalid="ignore", divide="ignore"):
            t1 = np.bincount(codes, weights=wt * prefix[alive, s - 1] * m1[alive, s - 1], minlength=size) / den
            t0 = np.bincount(codes, weights=wt * prefix[alive, s - 1] * m0[alive, s - 1], minlength=size) / den
        t1[den == 0] = np.nan
        t0[den == 0] = np.nan
        out[s] = (t1, t0)
    return out


def lookup_tilde_m(tables, w, s_len):
    n, s_max = w.shape
    tm1, tm0 = np.zeros((n, s_max)), np.zeros((n, s_max))
    for s in range(1, s_max + 1):
        alive = s_len >= s
        codes = history_codes(w[alive], s)
        tm1[alive, s - 1] = tables[s][0][codes]
        tm0[alive, s - 1] = tables[s][1][codes]
    return tm1, tm0


# ---------------------------------------------------------------------------
# backward recursion


@dataclass
class BackwardModels:
    delta: InterventionSpec
    models: dict          # s -> regression for m_s, s < s_max
    tilde_m: dict         # s -> (tm1, tm0) by history code

    def m_matrix(self, deconf: DeconfounderModel, w, s_len, f, mu1=None, mu0=None):
        """m_s(H_s, 1), m_s(H_s, 0) for every unit and s <= S."""
        n, s_max = w.shape
        m1, m0 = np.zeros((n, s_max)), np.zeros((n, s_max))
        if mu1 is None:
            mu1 = deconf.mu_counterfactual(w, s_len, f, 1)
            mu0 = deconf.mu_counterfactual(w, s_len, f, 0)
        idx = np.arange(n)
        m1[idx, s_len - 1] = mu1
        m0[idx, s_len - 1] = mu0
        for s, model in self.models.items():
            rows = s_len > s
            if rows.any():
                ws, sl, fs = w[rows], s_len[rows], f[rows]
                m1[rows, s - 1] = model.predict(regression_features(s, ws, sl, fs, np.ones(len(ws))))
                m0[rows, s - 1] = model.predict(regression_features(s, ws, sl, fs, np.zeros(len(ws))))
        return m1, m0


def fit_backward(w, s_len, f, deconf: DeconfounderModel, ptab: PTables, pi_proj, delta: InterventionSpec,
                 cfg: EstimatorConfig, rng: Rng, mu1=None, mu0=None) -> BackwardModels:
    """Backward pseudo-outcome regressions and tilde-m tables on a training split.

    ``pi_proj`` holds the overlap-projected in-sample propensities.
    """
    n, s_max = w.shape
    d = delta.as_array()
    if mu1 is None:
        mu1 = deconf.mu_counterfactual(w, s_len, f, 1)
        mu0 = deconf.mu_counterfactual(w, s_len, f, 0)
    m1, m0 = np.zeros((n, s_max)), np.zeros((n, s_max))
    idx = np.arange(n)
    m1[idx, s_len - 1] = mu1
    m0[idx, s_len - 1] = mu0
    models = {}
    for s in range(s_max - 1, 0, -1):
        rows = s_len >= s + 1
        if not rows.any():
            continue
        ws, sl, fs = w[rows], s_len[rows], f[rows]
        p_next = ptab.lookup(s + 1, history_codes(ws, s + 1))
        q = q_shift(d[s], p_next)
        y_tilde = q * m1[rows, s] + (1 - q) * m0[rows, s]
        model = _make_model(cfg, "regression", rng, ("m", s))
        model.fit(regression_features(s, ws, sl, fs, ws[:, s - 1]), y_tilde, rng.child("m", s))
        models[s] = model
        m1[rows, s - 1] = model.predict(regression_features(s, ws, sl, fs, np.ones(len(ws))))
        m0[rows, s - 1] = model.predict(regression_features(s, ws, sl, fs, np.zeros(len(ws))))
    mask = np.arange(s_max)[None, :] < s_len[:, None]
    p = p_matrix(ptab, w, s_len)
    om = omega_matrix(w, np.where(mask, p, 0.5), np.where(mask, pi_proj, 0.5), d, mask)
    tables = tilde_m_tables(w, s_len, omega_prefix(om), m1, m0)
    return BackwardModels(delta, models, tables)


# ---------------------------------------------------------------------------
# nuisance bundle and cross-fitting


@dataclass
class NuisanceSet:
    deconf: DeconfounderModel
    pi: PropensityModels
    ptab: PTables
    c_overlap: float
    backward: dict = field(default_factory=dict)   # delta tuple -> BackwardModels


@dataclass
class EstimateResult:
    delta: tuple
    psi_hat: float
    sigma_hat: float
    ci_low: float
    ci_high: float
    n: int
    contributions: np.ndarray
    missing_strata: int = 0
    overlap_projections: int = 0

    @property
    def se(self) -> float:
        return float(self.sigma_hat / np.sqrt(self.n))

    def estimating_equation(self, psi=None) -> float:
        """Mean of centered contributions at ``psi`` (default: the estimate)."""
        psi = self.psi_hat if psi is None else psi
        return float(np.mean(self.contributions - psi))


def summarize(delta, phi, missing=0, projections=0) -> EstimateResult:
    phi = np.asarray(phi, dtype=np.float64)
    n = len(phi)
    psi = float(np.mean(phi))
    sigma = float(np.sqrt(np.mean((phi - psi) ** 2)))
    half = float(Z_975 * sigma / np.sqrt(n))
    return EstimateResult(tuple(float(d) for d in delta), psi, sigma, psi - half, psi + half, n, phi,
                          missing, projections)


def fit_nuisances(train_ds: Dataset, cfg: EstimatorConfig, rng: Rng) -> NuisanceSet:
    if cfg.backend == "saturated":
        deconf = fit_oracle_deconfounder(train_ds, cfg.oracle_coords)
    else:
        deconf = fit_deconfounder(train_ds, cfg.arch, cfg.deconf_train, rng.child("deconf"))
    f = deconf.encode(train_ds.r, train_ds.s_len)
    ptab = fit_p_tables(train_ds)
    pi = fit_propensities(train_ds.w, train_ds.s_len, f, cfg, rng.child("propensity"))
    return NuisanceSet(deconf, pi, ptab, cfg.c_overlap)


def _fold_ids(n, k, rng: Rng) -> np.ndarray:
    perm = rng.permutation(n)
    ids = np.empty(n, dtype=np.int64)
    for j, chunk in enumerate(np.array_split(perm, k)):
        ids[chunk] = j
    return ids


def estimate_grid(ds: Dataset, deltas, cfg: EstimatorConfig, rng: Rng) -> list:
    """Cross-fitted estimates for several interventions sharing the
    intervention-free nuisances. Results follow the order of ``deltas``."""
    deltas = [d if isinstance(d, InterventionSpec) else InterventionSpec(d) for d in deltas]
    for d in deltas:
        if d.s_max != ds.s_max:
            raise ValueError(f"intervention has {d.s_max} entries but dataset s_max={ds.s_max}")
    k = cfg.k_folds
    if ds.n < 2 * k:
        raise EstimationError(f"{ds.n} units are too few for {k}-fold cross-fitting")
    folds = _fold_ids(ds.n, k, rng.child("folds"))
    phi = np.zeros((len(deltas), ds.n))
    missing = np.zeros(len(deltas), dtype=np.int64)
    projections = 0
    for fold in range(k):
        frng = rng.child("fold", fold)
        tr, ev = np.flatnonzero(folds != fold), np.flatnonzero(folds == fold)
        train_ds, eval_ds = ds.subset(tr), ds.subset(ev)
        if train_ds.n < 2:
            raise EstimationError(f"fold {fold}: training split too small")
        try:
            nuis = fit_nuisances(train_ds, cfg, frng)
        except MissingStratumError as exc:
            raise EstimationError(f"fold {fold}: {exc}") from None

        w_tr, sl_tr = train_ds.w, train_ds.s_len
        f_tr = nuis.deconf.encode(train_ds.r, sl_tr)
        p_tr = p_matrix(nuis.ptab, w_tr, sl_tr)
        pi_tr = project_overlap(nuis.pi.predict_matrix(w_tr, sl_tr, f_tr), np.nan_to_num(p_tr), cfg.c_overlap)
        mu1_tr = nuis.deconf.mu_counterfactual(w_tr, sl_tr, f_tr, 1)
        mu0_tr = nuis.deconf.mu_counterfactual(w_tr, sl_tr, f_tr, 0)

        w_ev, sl_ev = eval_ds.w, eval_ds.s_len
        mask_ev = eval_ds.mask
        f_ev = nuis.deconf.encode(eval_ds.r, sl_ev)
        p_ev = p_matrix(nuis.ptab, w_ev, sl_ev)
        bad_p = mask_ev & np.isnan(p_ev)
        try:
            raw_pi = nuis.pi.predict_matrix(w_ev, sl_ev, f_ev)
            mu1_ev = nuis.deconf.mu_counterfactual(w_ev, sl_ev, f_ev, 1)
            mu0_ev = nuis.deconf.mu_counterfactual(w_ev, sl_ev, f_ev, 0)
        except MissingStratumError as exc:
            missing += exc.count
            continue
        p_ev = np.where(bad_p, 0.5, p_ev)
        pi_ev = project_overlap(raw_pi, p_ev, cfg.c_overlap)
        projections += int(np.sum(mask_ev & (pi_ev != raw_pi)))

        for j, delta in enumerate(deltas):
            back = fit_backward(w_tr, sl_tr, f_tr, nuis.deconf, nuis.ptab, pi_tr, delta, cfg,
                                frng.child("backward"), mu1_tr, mu0_tr)
            nuis.backward[delta.delta] = back
            try:
                m1, m0 = back.m_matrix(nuis.deconf, w_ev, sl_ev, f_ev, mu1_ev, mu0_ev)
            except MissingStratumError as exc:
                missing[j] += exc.count
                continue
            tm1, tm0 = lookup_tilde_m(back.tilde_m, w_ev, sl_ev)
            missing[j] += int(np.sum(bad_p))
            if bad_p.any():
                continue
            phi[j, ev] = influence_contributions(eval_ds.y, sl_ev, w_ev, p_ev, pi_ev, m1, m0, tm1, tm0,
                                                 delta.as_array())
    if missing.any():
        raise MissingStratumError(
            f"{int(missing.max())} evaluation lookups hit histories unseen in their training folds",
            int(missing.max()))
    if not np.all(np.isfinite(phi)):
        raise EstimationError("non-finite influence contributions")
    return [summarize(d.delta, phi[j], 0, projections) for j, d in enumerate(deltas)]


def estimate(ds: Dataset, delta, cfg: EstimatorConfig, rng: Rng) -> EstimateResult:
    return estimate_grid(ds, [delta], cfg, rng)[0]


CSV_FIELDS = ("psi_hat", "se", "ci_low", "ci_high", "n", "missing_strata", "overlap_projections")


def estimate_rows(results, s_max: int):
    header = [f"delta_{s}" for s in range(1, s_max + 1)] + list(CSV_FIELDS)
    rows = []
    for res in results:
        rows.append([repr(float(x)) for x in res.delta]
                    + [repr(res.psi_hat), repr(float(res.se)), repr(res.ci_low), repr(res.ci_high),
                       res.n, res.missing_strata, res.overlap_projections])
    return header, rows


def write_estimates_csv(results, s_max: int, path) -> None:
    header, rows = estimate_rows(results, s_max)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        wr.writerows(rows)

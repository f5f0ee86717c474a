"""Synthetic data-generating processes and their Monte-Carlo / exact oracles.

``simulate_dataset`` implements the high-dimensional embedding process:

    S_i      = min(s_max, s_min + Poisson(lam))
    R_i1     ~ MVN(0, Sigma),   R_is = tanh(A R_i,s-1) + eta_is,  eta ~ MVN(0, Sigma)
    W_is     = 1{b' R_is[:d_w] > 0}
    U_is     = tanh(C R_is[d_w:])
    Y_i      = sum_s tau_s W_is + gamma1_s' U_is + gamma2_s' (U_is * U_is) + eps_i

with Sigma compound-symmetric and (A, b, C, gamma, tau) fixed by
``structure_seed``. ``DiscreteDgp`` is a tiny binary-confounder process whose
nuisances and target can be computed exactly by enumeration.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .data_model import Dataset, LatentTruth
from .intervention import InterventionSpec, MissingStratumError, PTables, fit_p_tables, history_codes, q_shift
from .numerics import CholFactor, Rng, cholesky, compound_symmetry, sample_bernoulli, sample_mvn, sample_poisson


@dataclass(frozen=True)
class DgpConfig:
    d_r: int = 512
    d_w: int = 256
    d_u: int = 256
    p_u: int = 16
    s_min: int = 2
    lam: float = 2.5
    s_max: int = 5
    sigma_diag: float = 1.0
    sigma_offdiag: float = 0.2
    a_scale: float = 0.8
    tau_base: float = 0.6
    tau_decay: float = 0.95
    gamma2_scale: float = 0.3
    structure_seed: int = 20240601
    noise_seed: int = 1

    def __post_init__(self):
        for name in ("d_r", "d_w", "d_u", "p_u", "s_min", "s_max"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.d_w + self.d_u != self.d_r:
            raise ValueError(f"d_w + d_u = {self.d_w + self.d_u} != d_r = {self.d_r}")
        if self.s_min > self.s_max:
            raise ValueError("s_min exceeds s_max")


@dataclass(frozen=True, eq=False)
class DgpStructure:
    a: np.ndarray       # diagonal of A, (d_r,)
    b: np.ndarray       # (d_w,)
    C: np.ndarray       # (p_u, d_u)
    g1: np.ndarray      # raw draws, (s_max, p_u)
    g2: np.ndarray
    gamma1: np.ndarray
    gamma2: np.ndarray
    tau: np.ndarray     # (s_max,)
    chol: CholFactor


def build_structure(cfg: DgpConfig) -> DgpStructure:
    rng = Rng(cfg.structure_seed).child("structure")
    d, p = cfg.d_r, cfg.p_u
    a = cfg.a_scale * rng.normal(d)
    b = rng.normal(cfg.d_w) / np.sqrt(d)
    C = rng.normal((p, cfg.d_u)) / np.sqrt(d)
    g1 = rng.normal((cfg.s_max, p))
    g2 = rng.normal((cfg.s_max, p))
    tau = cfg.tau_base * cfg.tau_decay ** np.arange(cfg.s_max)
    chol = cholesky(compound_symmetry(d, cfg.sigma_diag, cfg.sigma_offdiag))
    return DgpStructure(a, b, C, g1, g2, g1 / np.sqrt(p), cfg.gamma2_scale * g2 / np.sqrt(p), tau, chol)


def draw_lengths(cfg: DgpConfig, n: int, rng: Rng) -> np.ndarray:
    return np.minimum(cfg.s_max, cfg.s_min + sample_poisson(cfg.lam, rng, n))


def treatment_of(cfg: DgpConfig, st: DgpStructure, r) -> np.ndarray:
    return (r[..., :cfg.d_w] @ st.b > 0).astype(np.int8)


def confounder_of(cfg: DgpConfig, st: DgpStructure, r) -> np.ndarray:
    return np.tanh(r[..., cfg.d_w:] @ st.C.T)


def outcome_of(st: DgpStructure, s_len, w, u, eps) -> np.ndarray:
    """Outcome from (possibly intervened) treatments and confounder paths."""
    mask = np.arange(w.shape[1])[None, :] < np.asarray(s_len)[:, None]
    per_seg = (st.tau[None, :] * w + np.einsum("isp,sp->is", u, st.gamma1)
               + np.einsum("isp,sp->is", u * u, st.gamma2))
    return np.sum(per_seg * mask, axis=1) + eps


def _latent_paths(cfg: DgpConfig, st: DgpStructure, n: int, rng: Rng):
    s_len = draw_lengths(cfg, n, rng.child("length"))
    mvn_rng = rng.child("embedding")
    zero = np.zeros(cfg.d_r)
    r = np.empty((n, cfg.s_max, cfg.d_r))
    r[:, 0] = sample_mvn(zero, st.chol, mvn_rng, n)
    for s in range(1, cfg.s_max):
        r[:, s] = np.tanh(st.a * r[:, s - 1]) + sample_mvn(zero, st.chol, mvn_rng, n)
    mask = np.arange(cfg.s_max)[None, :] < s_len[:, None]
    r *= mask[:, :, None]
    u = confounder_of(cfg, st, r) * mask[:, :, None]
    eps = rng.child("noise").normal(n)
    return s_len, r, u, eps


def simulate_dataset(cfg: DgpConfig, st: DgpStructure, n: int, rng: Rng):
    """Returns (Dataset, LatentTruth)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    s_len, r, u, eps = _latent_paths(cfg, st, n, rng)
    mask = np.arange(cfg.s_max)[None, :] < s_len[:, None]
    w = treatment_of(cfg, st, r) * mask
    y = outcome_of(st, s_len, w, u, eps)
    return Dataset(y, s_len, w, r, cfg.s_max), LatentTruth(u, eps)


def fit_oracle_p(cfg: DgpConfig, st: DgpStructure, n_oracle: int, rng: Rng) -> PTables:
    ds, _ = simulate_dataset(cfg, st, n_oracle, rng)
    return fit_p_tables(ds)


@dataclass(frozen=True)
class OraclePsi:
    psi: float
    mc_se: float
    n_truth: int

    def __float__(self):
        return self.psi


def oracle_psi(cfg: DgpConfig, st: DgpStructure, ptab: PTables, delta: InterventionSpec,
               n_truth: int, rng: Rng) -> OraclePsi:
    """Monte-Carlo target: treatments drawn sequentially from the shifted
    history probabilities while the embedding paths follow the DGP."""
    if delta.s_max != cfg.s_max:
        raise ValueError(f"intervention has {delta.s_max} entries, DGP s_max={cfg.s_max}")
    s_len, _, u, eps = _latent_paths(cfg, st, n_truth, rng)
    w = np.zeros((n_truth, cfg.s_max), dtype=np.int8)
    draw_rng = rng.child("intervention")
    for s in range(1, cfg.s_max + 1):
        alive = s_len >= s
        codes = history_codes(w[alive], s)
        try:
            p = ptab.lookup(s, codes)
        except MissingStratumError as exc:
            raise MissingStratumError(f"unreachable history under the intervention: {exc}", exc.count) from None
        draws = sample_bernoulli(q_shift(delta[s], p), draw_rng, len(p))
        w[alive, s - 1] = draws
    y = outcome_of(st, s_len, w, u, eps)
    return OraclePsi(float(np.mean(y)), float(np.std(y, ddof=1) / np.sqrt(n_truth)), n_truth)


# ---------------------------------------------------------------------------
# discrete process with exact nuisances


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


@dataclass(frozen=True)
class DiscreteDgp:
    """Binary confounder chain U_s, treatment W_s ~ Bern(pi(W_{s-1}, U_s)),
    embeddings r_is = (W_is, U_is, z1, z2) with z standard normal noise.

    The lengths S are independent of everything else. Outcome:
    Y = sum_s tau_s W_s + beta_s U_s + kappa W_s U_s + eps.
    """

    s_max: int = 3
    length_probs: tuple = (0.2, 0.3, 0.5)
    u1_prob: float = 0.5
    u_stay: float = 0.7           # P(U_s = U_{s-1})
    pi_coef: tuple = (-0.6, 1.2, 0.8, -0.2)  # intercept, U_s, W_{s-1}, (s - 1)
    tau: tuple = (1.0, 0.7, 0.5)
    beta: tuple = (0.8, -0.5, 0.6)
    kappa: float = 0.5
    noise_sd: float = 1.0
    d_noise: int = 2

    @property
    def d_r(self) -> int:
        return 2 + self.d_noise

    # model pieces -----------------------------------------------------------

    def pi(self, s, w_prev, u_s):
        """P(W_s = 1 | W_{s-1}, U_s); 1-based s, w_prev = 0 at s = 1."""
        c0, cu, cw, cs = self.pi_coef
        return _sigmoid(c0 + cu * np.asarray(u_s) + cw * np.asarray(w_prev) + cs * (np.asarray(s) - 1))

    def u_trans(self, u_prev, u_next):
        return np.where(np.asarray(u_prev) == np.asarray(u_next), self.u_stay, 1.0 - self.u_stay)

    def mu(self, s_len, w, u):
        """E[Y | S, W path, U path] for padded (n, s_max) arrays."""
        mask = np.arange(self.s_max)[None, :] < np.asarray(s_len)[:, None]
        tau, beta = np.array(self.tau), np.array(self.beta)
        return np.sum(mask * (tau * w + beta * u + self.kappa * w * u), axis=1)

    # simulation ---------------------------------------------------------------

    def simulate(self, n: int, rng: Rng):
        gen = rng.child("discrete")
        s_len = 1 + np.searchsorted(np.cumsum(self.length_probs), gen.uniform(n), side="right")
        s_len = np.minimum(s_len, self.s_max)
        u = np.zeros((n, self.s_max), dtype=np.int8)
        w = np.zeros((n, self.s_max), dtype=np.int8)
        u[:, 0] = gen.uniform(n) < self.u1_prob
        for s in range(1, self.s_max + 1):
            if s > 1:
                stay = gen.uniform(n) < self.u_stay
                u[:, s - 1] = np.where(stay, u[:, s - 2], 1 - u[:, s - 2])
            w_prev = w[:, s - 2] if s > 1 else np.zeros(n)
            w[:, s - 1] = gen.uniform(n) < self.pi(s, w_prev, u[:, s - 1])
        mask = np.arange(self.s_max)[None, :] < s_len[:, None]
        u *= mask
        w *= mask
        eps = self.noise_sd * gen.normal(n)
        y = self.mu(s_len, w, u) + eps
        r = np.concatenate([w[:, :, None], u[:, :, None], gen.normal((n, self.s_max, self.d_noise))], axis=2)
        return Dataset(y, s_len, w, r, self.s_max), LatentTruth(u[:, :, None].astype(np.float64), eps)

    # exact enumeration ----------------------------------------------------------

    def states(self):
        """Every (S, U path, W path) with its probability; paths run to s_max."""
        rows = []
        for S in range(1, self.s_max + 1):
            for u in itertools.product((0, 1), repeat=self.s_max):
                pu = self.u1_prob if u[0] else 1 - self.u1_prob
                for s in range(1, self.s_max):
                    pu *= float(self.u_trans(u[s - 1], u[s]))
                for w in itertools.product((0, 1), repeat=self.s_max):
                    pw = 1.0
                    for s in range(1, self.s_max + 1):
                        pr = float(self.pi(s, w[s - 2] if s > 1 else 0, u[s - 1]))
                        pw *= pr if w[s - 1] else 1 - pr
                    rows.append((S, u, w, self.length_probs[S - 1] * pu * pw))
        S = np.array([r[0] for r in rows])
        u = np.array([r[1] for r in rows], dtype=np.int8)
        w = np.array([r[2] for r in rows], dtype=np.int8)
        prob = np.array([r[3] for r in rows])
        mask = np.arange(self.s_max)[None, :] < S[:, None]
        return S, u * mask, w * mask, prob

    @lru_cache(maxsize=None)
    def _p_exact(self):
        S, u, w, prob = self.states()
        full = S == self.s_max  # S is independent of the paths; full-length rows suffice
        tab = PTables(self.s_max)
        for s in range(1, self.s_max + 1):
            codes = history_codes(w[full], s)
            size = 2 ** (s - 1)
            tab.count[s] = np.bincount(codes, weights=prob[full], minlength=size)
            tab.treated[s] = np.bincount(codes, weights=prob[full] * w[full, s - 1], minlength=size)
        return tab

    def exact_p_tables(self) -> PTables:
        """History probabilities as a PTables with probability-mass 'counts'."""
        return self._p_exact()

    def exact_p(self, s: int, codes) -> np.ndarray:
        return self._p_exact().lookup(s, codes)

    def m_exact(self, s_len, w, u, delta: InterventionSpec):
        """True backward regressions m_s(H_s, 1) and m_s(H_s, 0) as padded
        (n, s_max) arrays, for the given (S, W, U) rows."""
        n = len(s_len)
        m1 = np.zeros((n, self.s_max))
        m0 = np.zeros((n, self.s_max))
        for i in range(n):
            S = int(s_len[i])
            for s in range(1, S + 1):
                for val, out in ((1, m1), (0, m0)):
                    wbar = tuple(int(x) for x in w[i, :s - 1]) + (val,)
                    ubar = tuple(int(x) for x in u[i, :s])
                    out[i, s - 1] = self._m(S, wbar, ubar, delta.delta)
        return m1, m0

    @lru_cache(maxsize=None)
    def _m(self, S, wbar, ubar, delta):
        s = len(wbar)
        if s == S:
            w = np.zeros((1, self.s_max))
            u = np.zeros((1, self.s_max))
            w[0, :s], u[0, :s] = wbar, ubar
            return float(self.mu([S], w, u)[0])
        code = int("".join(map(str, wbar)), 2)
        q = q_shift(delta[s], float(self.exact_p(s + 1, [code])[0]))
        total = 0.0
        for u_next in (0, 1):
            pu = float(self.u_trans(ubar[-1], u_next))
            total += pu * (q * self._m(S, wbar + (1,), ubar + (u_next,), delta)
                           + (1 - q) * self._m(S, wbar + (0,), ubar + (u_next,), delta))
        return total

    def exact_psi(self, delta: InterventionSpec) -> float:
        q = q_shift(delta[1], float(self.exact_p(1, [0])[0]))
        total = 0.0
        for S in range(1, self.s_max + 1):
            for u1 in (0, 1):
                pu = self.u1_prob if u1 else 1 - self.u1_prob
                total += self.length_probs[S - 1] * pu * (
                    q * self._m(S, (1,), (u1,), delta.delta) + (1 - q) * self._m(S, (0,), (u1,), delta.delta))
        return total

    def pi_matrix(self, w, u) -> np.ndarray:
        w_prev = np.concatenate([np.zeros((len(w), 1)), w[:, :-1]], axis=1)
        s = np.arange(1, self.s_max + 1)[None, :]
        return self.pi(s, w_prev, u)

    def p_matrix(self, s_len, w) -> np.ndarray:
        out = np.zeros(w.shape)
        for s in range(1, self.s_max + 1):
            alive = s_len >= s
            out[alive, s - 1] = self.exact_p(s, history_codes(w[alive], s))
        return out

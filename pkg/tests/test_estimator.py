import csv
import dataclasses

import numpy as np
import pytest

from dyngpi.data_model import Dataset, Trajectory
from dyngpi.dgp import DgpConfig, DiscreteDgp, build_structure, simulate_dataset
from dyngpi.estimator import (Z_975, Architecture, EstimationError, EstimatorConfig, NeuralModel, TrainConfig,
                              encode_path, estimate, estimate_grid, fit_backward, fit_deconfounder, fit_propensities,
                              head_features, influence_contribution, influence_contributions, omega, omega_matrix,
                              omega_prefix, project_overlap, propensity_features, summarize, write_estimates_csv)
from dyngpi.intervention import InterventionSpec, MissingStratumError, fit_p_tables
from dyngpi.neural import TrainHistory, forward
from dyngpi.numerics import Rng
from oracles import exact_tilde_m, oracle_contributions, population_mean

DISC = DiscreteDgp()
SAT = EstimatorConfig(k_folds=2, backend="saturated", oracle_coords=(1,))
TINY_ARCH = Architecture(encoder_hidden=(8,), d_f=4, head_hidden=(16,), nuisance_hidden=(16,))
TINY = EstimatorConfig(k_folds=2, arch=TINY_ARCH, deconf_train=TrainConfig(epochs=30, batch_size=64, learning_rate=1e-3,
                                                                           patience=0),
                       nuisance_train=TrainConfig(epochs=20, batch_size=64, patience=3, validation_fraction=0.1))
SMALL_DGP = DgpConfig(d_r=16, d_w=8, d_u=8, p_u=4, s_max=3)


# --- overlap, weights and the influence function ------------------------------------

def test_project_overlap_examples():
    assert project_overlap(0.0001, 0.5, 0.01) == pytest.approx(0.005)
    assert project_overlap(0.9999, 0.5, 0.01) == pytest.approx(0.995)
    assert project_overlap(0.3, 0.5, 0.01) == 0.3


def test_omega_examples():
    for w in (0, 1):
        assert omega([w], 1, 0.37, 0.37, 1.0) == 1.0
    assert omega([1], 1, 0.5, 0.5, 2.0) == pytest.approx(4 / 3)
    assert omega([0], 1, 0.0, project_overlap(1e-9, 0.0, 0.01), 3.0) == pytest.approx(1.0)


def test_omega_matrix_agrees_with_scalar_form():
    rng = Rng(0)
    w = (rng.uniform((30, 3)) < 0.5).astype(np.int8)
    p, pi = 0.1 + 0.8 * rng.uniform((30, 3)), 0.1 + 0.8 * rng.uniform((30, 3))
    d = np.array([0.5, 2.0, 3.0])
    mask = np.ones((30, 3), dtype=bool)
    om = omega_matrix(w, p, pi, d, mask)
    for i in range(30):
        for s in range(1, 4):
            assert om[i, s - 1] == pytest.approx(omega(w[i], s, p[i, s - 1], pi[i, s - 1], d[s - 1]), rel=1e-14)
    assert np.array_equal(omega_prefix(om)[:, 0], np.ones(30))
    assert np.allclose(omega_prefix(om)[:, 2], om[:, 0] * om[:, 1])


def test_identity_intervention_weights_telescope():
    rng = Rng(1)
    w = (rng.uniform((50, 4)) < 0.5).astype(np.int8)
    p = 0.05 + 0.9 * rng.uniform((50, 4))
    om = omega_matrix(w, p, p, np.ones(4), np.ones((50, 4), dtype=bool))
    assert np.max(np.abs(om - 1.0)) <= 1e-15


def hand_contribution(y, w, p, pi, m1, m0, tm1, tm0, d):
    """Literal transcription of the uncentered influence function, one unit."""
    S = len(w)
    total, prefix = 0.0, 1.0
    for s in range(S):
        den = d[s] * p[s] + 1 - p[s]
        total += prefix * (d[s] * p[s] * m1[s] * (1 - w[s] / pi[s])
                           + (1 - p[s]) * m0[s] * (1 - (1 - w[s]) / (1 - pi[s]))) / den
        total += d[s] * (w[s] - p[s]) * (tm1[s] - tm0[s]) / den ** 2
        prefix *= (d[s] * w[s] * p[s] / pi[s] + (1 - w[s]) * (1 - p[s]) / (1 - pi[s])) / den
    return total + prefix * y


def test_influence_contribution_matches_literal_formula():
    rng = Rng(2)
    for case in range(40):
        g = rng.child(case)
        S = 1 + case % 4
        w = (g.uniform(S) < 0.5).astype(int)
        p, pi = 0.1 + 0.8 * g.uniform(S), 0.1 + 0.8 * g.uniform(S)
        m1, m0, tm1, tm0 = (g.normal(S) for _ in range(4))
        d = np.exp(g.normal(S))
        y = float(g.normal())
        traj = Trajectory(y, w, np.zeros((S, 1)))
        got = influence_contribution(traj, p, pi, m1, m0, tm1, tm0, d)
        assert got == pytest.approx(hand_contribution(y, w, p, pi, m1, m0, tm1, tm0, d), rel=1e-12, abs=1e-12)


def test_vectorized_and_single_unit_forms_agree():
    rng = Rng(3)
    n, s_max = 25, 4
    s_len = 1 + (rng.uniform(n) * s_max).astype(int)
    w = (rng.uniform((n, s_max)) < 0.5).astype(np.int8) * (np.arange(s_max) < s_len[:, None])
    arrs = [0.1 + 0.8 * rng.uniform((n, s_max)) for _ in range(2)] + [rng.normal((n, s_max)) for _ in range(4)]
    y, d = rng.normal(n), np.array([0.5, 1.0, 2.0, 4.0])
    vec = influence_contributions(y, s_len, w, *arrs, d)
    for i in range(n):
        S = s_len[i]
        traj = Trajectory(y[i], w[i, :S], np.zeros((S, 1)))
        assert vec[i] == pytest.approx(influence_contribution(traj, *[a[i, :S] for a in arrs], d), rel=1e-13)


def test_contribution_examples():
    traj = Trajectory(3.7, [1], [[0.0]])
    assert influence_contribution(traj, [0.4], [0.4], [2.0], [2.0], [2.0], [2.0], [1.0]) == pytest.approx(3.7)
    rng = Rng(4)
    args = [0.2 + 0.6 * rng.uniform(3) for _ in range(2)] + [rng.normal(3) for _ in range(4)]
    t2 = Trajectory(1.3, [1, 0, 1], np.zeros((3, 1)))
    base = influence_contribution(t2, *args, [0.5, 2, 3])
    scaled = args[:2] + [7.0 * a for a in args[2:]]
    assert influence_contribution(Trajectory(7.0 * 1.3, [1, 0, 1], np.zeros((3, 1))), *scaled, [0.5, 2, 3]) \
        == pytest.approx(7.0 * base, rel=1e-13)


def test_identity_intervention_with_treatment_free_regressions_gives_mean_outcome():
    # delta = 1, pi = p and m(., 1) = m(., 0): every correction vanishes and the weights telescope
    rng = Rng(5)
    n = 40
    s_len = np.full(n, 3)
    w = (rng.uniform((n, 3)) < 0.5).astype(np.int8)
    p = 0.2 + 0.6 * rng.uniform((n, 3))
    m = rng.normal((n, 3))
    tm = rng.normal((n, 3))
    y = rng.normal(n)
    phi = influence_contributions(y, s_len, w, p, p, m, m, tm, tm, np.ones(3))
    assert np.max(np.abs(phi - y)) <= 1e-12


def test_summarize_ci_and_estimating_equation():
    phi = Rng(6).normal(101) + 2.0
    r = summarize((1.0,), phi)
    sigma = np.sqrt(np.mean((phi - phi.mean()) ** 2))
    assert r.psi_hat == pytest.approx(phi.mean(), rel=1e-15)
    assert r.ci_high - r.psi_hat == pytest.approx(1.959964 * sigma / np.sqrt(101), rel=1e-6)
    assert Z_975 == pytest.approx(1.959964, abs=1e-6)
    assert abs(r.estimating_equation()) <= 1e-10
    assert r.ci_low <= r.psi_hat <= r.ci_high and r.sigma_hat >= 0


# --- population-level properties on the discrete instance -------------------------------

@pytest.mark.parametrize("d", [0.5, 1.0, 2.0])
def test_influence_function_is_unbiased_at_truth(d):
    spec = InterventionSpec.uniform(d, 3)
    assert abs(population_mean(DISC, spec) - DISC.exact_psi(spec)) <= 1e-12


@pytest.mark.parametrize("d", [0.5, 1.0, 2.0])
def test_neyman_orthogonality(d):
    spec = InterventionSpec.uniform(d, 3)
    psi = DISC.exact_psi(spec)
    # joint perturbation of every nuisance: the bias is second order
    small = population_mean(DISC, spec, 0.01) - psi
    large = population_mean(DISC, spec, 0.1) - psi
    assert abs(large) > 1e-4
    assert abs(small) / abs(large) <= 0.02
    # propensity alone: the remainder is a product of errors, so no bias at all
    assert abs(population_mean(DISC, spec, 0.1, which=("pi",)) - psi) <= 1e-12


def test_orthogonality_check_has_power():
    # the weighted outcome alone is first-order sensitive to the propensity
    S, u, w, prob = DISC.states()
    spec = InterventionSpec.uniform(2.0, 3)
    p = DISC.p_matrix(S, w)
    mask = np.arange(3)[None, :] < S[:, None]
    y = DISC.mu(S, w, u)

    def ipw(eps):
        pi = DISC.pi_matrix(w, u) + eps * np.sin(1.0 + 2.0 * np.arange(1, 4)[None, :] + 1.5 * u + 0.7 * w)
        om = omega_matrix(w, np.where(mask, p, 0.5), pi, spec.as_array(), mask)
        return float(np.sum(prob * np.prod(om, axis=1) * y))
    psi = DISC.exact_psi(spec)
    assert abs(ipw(0.0) - psi) <= 1e-12
    assert abs(ipw(0.01) - psi) / abs(ipw(0.1) - psi) > 0.03


def test_oracle_contributions_identity_intervention_without_confounding():
    dgp = dataclasses.replace(DISC, pi_coef=(-0.6, 0.0, 0.8, -0.2))
    ds, lat = dgp.simulate(20_000, Rng(7))
    spec = InterventionSpec.uniform(1.0, 3)
    phi = oracle_contributions(dgp, ds, lat.u[:, :, 0], spec)
    se = np.hypot(phi.std(), ds.y.std()) / np.sqrt(ds.n)
    assert abs(phi.mean() - ds.y.mean()) <= 3 * se


# --- nuisance fitting ---------------------------------------------------------------

def test_saturated_estimate_matches_exact_target_small():
    ds, _ = DISC.simulate(6000, Rng(8))
    for d in (0.5, 2.0):
        r = estimate(ds, InterventionSpec.uniform(d, 3), SAT, Rng(9))
        assert abs(r.psi_hat - DISC.exact_psi(InterventionSpec.uniform(d, 3))) <= 3.5 * r.se


def test_grid_and_single_estimates_agree_bitwise():
    ds, _ = DISC.simulate(20_000, Rng(10))
    specs = [InterventionSpec.uniform(d, 3) for d in (0.5, 1.0, 2.0)]
    grid = estimate_grid(ds, specs, SAT, Rng(11))
    one = estimate(ds, specs[1], SAT, Rng(11))
    assert grid[1].psi_hat == one.psi_hat and np.array_equal(grid[1].contributions, one.contributions)
    again = estimate_grid(ds, specs, SAT, Rng(11))
    assert all(a.psi_hat == b.psi_hat and a.sigma_hat == b.sigma_hat for a, b in zip(grid, again))


def test_missing_strata_are_reported():
    ds, _ = DISC.simulate(40, Rng(12))
    with pytest.raises((MissingStratumError, EstimationError)):
        estimate(ds, InterventionSpec.uniform(1.0, 3), SAT, Rng(0))


def test_too_few_units():
    ds, _ = DISC.simulate(3, Rng(12))
    with pytest.raises(EstimationError):
        estimate(ds, InterventionSpec.uniform(1.0, 3), SAT, Rng(0))


def test_constant_outcome_gives_constant_estimate():
    st = build_structure(SMALL_DGP)
    ds, _ = simulate_dataset(SMALL_DGP, st, 400, Rng(13))
    const = Dataset(np.full(ds.n, 5.0), ds.s_len, ds.w, ds.r, ds.s_max)
    r = estimate(const, InterventionSpec.uniform(1.0, 3), TINY, Rng(14))
    assert abs(r.psi_hat - 5.0) <= 1e-6


def test_neural_estimate_runs_and_is_deterministic():
    st = build_structure(SMALL_DGP)
    ds, _ = simulate_dataset(SMALL_DGP, st, 400, Rng(15))
    specs = [InterventionSpec.uniform(d, 3) for d in (0.5, 2.0)]
    a = estimate_grid(ds, specs, TINY, Rng(16))
    b = estimate_grid(ds, specs, TINY, Rng(16))
    for x, y in zip(a, b):
        assert np.isfinite(x.psi_hat) and x.n == 400
        assert np.array_equal(x.contributions, y.contributions)


def test_deconfounder_shapes_and_training():
    st = build_structure(SMALL_DGP)
    ds, _ = simulate_dataset(SMALL_DGP, st, 300, Rng(17))
    h = TrainHistory()
    model = fit_deconfounder(ds, TINY_ARCH, TrainConfig(epochs=200, batch_size=64, learning_rate=1e-3, patience=0),
                             Rng(18), h)
    f = model.encode(ds.r, ds.s_len)
    assert f.shape == (300, 3, 4)
    assert np.all(f[~ds.mask] == 0)
    path = encode_path(model, ds[0])
    assert len(path) == ds.s_len[0] and all(v.shape == (4,) for v in path)
    assert np.array_equal(np.array(path), encode_path(model, ds[0]))
    assert h.losses[-1] < h.losses[0]


def test_encoder_is_per_segment_and_sees_the_position():
    st = build_structure(SMALL_DGP)
    ds, _ = simulate_dataset(SMALL_DGP, st, 50, Rng(19))
    model = fit_deconfounder(ds, TINY_ARCH, TrainConfig(epochs=1, batch_size=64), Rng(20))
    r0 = ds[0].r
    a = Trajectory(0.0, [1, 0], np.vstack([r0[0], Rng(1).normal(16)]))
    b = Trajectory(0.0, [0, 1], np.vstack([r0[0], Rng(2).normal(16)]))
    assert np.array_equal(encode_path(model, a)[0], encode_path(model, b)[0])
    c = Trajectory(0.0, [0, 0], np.vstack([Rng(3).normal(16), r0[0]]))
    assert not np.array_equal(encode_path(model, a)[0], encode_path(model, c)[1])
    with pytest.raises(ValueError):
        model.encode(np.zeros((1, 3, 5)), [1])


def test_deconfounder_halves_training_error_on_simulated_data():
    cfg = DgpConfig()
    ds, _ = simulate_dataset(cfg, build_structure(cfg), 1000, Rng(21))
    est = EstimatorConfig()
    # batch 128: with the default batch of 1024 an N=1000 split gets one step per epoch
    model = fit_deconfounder(ds, est.arch, dataclasses.replace(est.deconf_train, batch_size=128), Rng(22))
    untrained = fit_deconfounder(ds, est.arch, dataclasses.replace(est.deconf_train, epochs=1, learning_rate=1e-12),
                                 Rng(22))

    def mse(m):
        return np.mean((m.predict_mu(ds.w, ds.s_len, m.encode(ds.r, ds.s_len)) - ds.y) ** 2)
    assert mse(model) <= 0.5 * mse(untrained)


def test_propensity_features_and_balanced_treatment():
    gen = np.random.default_rng(23)
    n = 2000
    s_len = gen.integers(1, 4, n)
    w = gen.integers(0, 2, (n, 3)) * (np.arange(3) < s_len[:, None])
    f = gen.standard_normal((n, 3, 2)) * (np.arange(3) < s_len[:, None])[:, :, None]
    X1 = propensity_features(1, w, s_len, f)
    assert X1.shape[1] == 1 + 0 + 2      # no treatment history at the first segment
    assert propensity_features(3, w, s_len, f).shape[1] == 1 + 2 + 6
    cfg = EstimatorConfig(k_folds=2, arch=TINY_ARCH)
    tr = np.arange(n) < 1500
    models = fit_propensities(w[tr], s_len[tr], f[tr], cfg, Rng(24))
    pi = models.predict_matrix(w[~tr], s_len[~tr], f[~tr])
    alive = (np.arange(3) < s_len[~tr][:, None])
    assert np.all((pi[alive] > 0) & (pi[alive] < 1))
    # pointwise over held-out units: no more than sampling noise of a fitted curve
    assert np.mean(np.abs(pi[alive] - 0.5)) <= 0.05
    assert abs(np.mean(pi[alive]) - 0.5) <= 0.05


def test_degenerate_position_uses_class_rate():
    n = 100
    w = np.zeros((n, 2), dtype=np.int8)
    w[:50, 0] = 1
    w[:, 1] = 1
    s_len = np.full(n, 2)
    f = Rng(0).normal((n, 2, 2))
    models = fit_propensities(w, s_len, f, EstimatorConfig(k_folds=2, arch=TINY_ARCH), Rng(1))
    assert models.degenerate == {2: 1.0}


def test_backward_recursion_special_cases():
    # a single-segment dataset: nothing to regress, m is the head evaluation
    ds1, _ = DISC.simulate(20_000, Rng(25))
    one = Dataset(ds1.y, np.ones(ds1.n, dtype=int), ds1.w, ds1.r, 3)
    from dyngpi.estimator import fit_nuisances
    nuis = fit_nuisances(one, SAT, Rng(26))
    f = nuis.deconf.encode(one.r, one.s_len)
    back = fit_backward(one.w, one.s_len, f, nuis.deconf, nuis.ptab, np.full((one.n, 3), 0.5),
                        InterventionSpec.uniform(2.0, 3), SAT, Rng(27))
    assert back.models == {}
    m1, m0 = back.m_matrix(nuis.deconf, one.w, one.s_len, f)
    assert np.array_equal(m1[:, 0], nuis.deconf.mu_counterfactual(one.w, one.s_len, f, 1))
    # constant outcome: every pseudo-outcome and tilde-m entry is that constant
    const = Dataset(np.full(ds1.n, 2.5), ds1.s_len, ds1.w, ds1.r, 3)
    nuis = fit_nuisances(const, SAT, Rng(28))
    f = nuis.deconf.encode(const.r, const.s_len)
    p = fit_p_tables(const)
    pi = np.full((const.n, 3), 0.5)
    for dl in (0.5, 1.0):
        back = fit_backward(const.w, const.s_len, f, nuis.deconf, p, pi, InterventionSpec.uniform(dl, 3), SAT, Rng(29))
        m1, m0 = back.m_matrix(nuis.deconf, const.w, const.s_len, f)
        assert np.allclose(m1[const.mask], 2.5) and np.allclose(m0[const.mask], 2.5)


def test_backward_identity_pseudo_outcome():
    # delta = 1: the pseudo-outcome is p m(1) + (1 - p) m(0)
    ds, _ = DISC.simulate(20_000, Rng(30))
    from dyngpi.estimator import fit_nuisances
    nuis = fit_nuisances(ds, SAT, Rng(31))
    f = nuis.deconf.encode(ds.r, ds.s_len)
    mu1 = nuis.deconf.mu_counterfactual(ds.w, ds.s_len, f, 1)
    mu0 = nuis.deconf.mu_counterfactual(ds.w, ds.s_len, f, 0)
    back = fit_backward(ds.w, ds.s_len, f, nuis.deconf, nuis.ptab, np.full((ds.n, 3), 0.5),
                        InterventionSpec.uniform(1.0, 3), SAT, Rng(32))
    rows = ds.s_len == 2
    p2 = nuis.ptab.lookup(2, ds.w[rows, 0])
    target = p2 * mu1[rows] + (1 - p2) * mu0[rows]
    # the saturated regression for segment 1 averages the pseudo-outcome within cells of
    # (S, f_1, W_1); check one cell directly
    X = head_features(ds.w, ds.s_len, f)
    cell = rows & (ds.w[:, 0] == 1) & (f[:, 0, 0] == 1)
    m1, _ = back.m_matrix(nuis.deconf, ds.w, ds.s_len, f)
    assert m1[cell, 0][0] == pytest.approx(np.mean(target[cell[rows]]), rel=1e-12)
    assert X.shape[1] == 2 * 3 + 3 * 1 + 1


def test_neural_model_constant_and_regression():
    X = Rng(0).normal((200, 3))
    m = NeuralModel("regression", (8,), TrainConfig(epochs=5), 0).fit(X, np.full(200, 3.0), Rng(1))
    assert np.all(m.predict(X) == 3.0)
    c = NeuralModel("classification", (8,), TrainConfig(epochs=5), 0).fit(X, np.zeros(200), Rng(1))
    assert np.all(c.predict(X) == 0.0)


def test_estimates_csv(tmp_path):
    ds, _ = DISC.simulate(20_000, Rng(33))
    res = estimate_grid(ds, [InterventionSpec((0.5, 1.0, 2.0))], SAT, Rng(34))
    path = tmp_path / "e.csv"
    write_estimates_csv(res, 3, path)
    rows = list(csv.DictReader(open(path)))
    assert list(rows[0]) == ["delta_1", "delta_2", "delta_3", "psi_hat", "se", "ci_low", "ci_high", "n",
                             "missing_strata", "overlap_projections"]
    assert float(rows[0]["delta_3"]) == 2.0 and float(rows[0]["psi_hat"]) == res[0].psi_hat


def test_exact_tilde_m_tables_cover_every_history():
    tables = exact_tilde_m(DISC, InterventionSpec.uniform(2.0, 3))
    for s in (1, 2, 3):
        assert all(np.isfinite(t).all() for t in tables[s])


def test_interval_length_scales_with_root_n():
    lengths = {}
    for n in (20_000, 40_000):
        per_rep = []
        for rep in range(8):
            ds, _ = DISC.simulate(n, Rng(50).child(n, rep))
            r = estimate(ds, InterventionSpec.uniform(2.0, 3), SAT, Rng(51).child(n, rep))
            per_rep.append(r.ci_high - r.ci_low)
        lengths[n] = np.mean(per_rep)
    assert 0.65 <= lengths[40_000] / lengths[20_000] <= 0.75

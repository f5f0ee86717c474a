import numpy as np
import pytest
from hypothesis import given, strategies as st

from dyngpi.data_model import Dataset
from dyngpi.intervention import (InterventionSpec, MissingStratumError, PTables, code_of, dq_weight, fit_p_tables,
                                 history_codes, odds_ratio, p_tables_from_arrays, pattern_of, q_shift)
from dyngpi.numerics import Rng

probs = st.floats(1e-6, 1 - 1e-6)
deltas = st.floats(1e-4, 1e4)


def test_q_shift_examples():
    assert q_shift(2.0, 0.5) == pytest.approx(2 / 3)
    assert q_shift(1.0, 0.37) == 0.37
    assert q_shift(3.0, 0.0) == 0.0
    assert q_shift(3.0, 1.0) == 1.0


def test_odds_ratio_on_random_grid():
    rng = Rng(0)
    p = rng.uniform(1000) * 0.998 + 0.001
    d = np.exp(rng.uniform(1000) * 8 - 4)
    assert np.max(np.abs(odds_ratio(d, p) - d)) <= 1e-10 * np.max(d)
    assert np.max(np.abs(odds_ratio(d, p) / d - 1)) <= 1e-10


@given(probs, deltas)
def test_q_properties(p, d):
    q = q_shift(d, p)
    assert 0 <= q <= 1
    assert dq_weight(1, d, p) + dq_weight(0, d, p) == 1.0
    if d > 1:
        assert q >= p
    elif d < 1:
        assert q <= p


@given(probs)
def test_identity_intervention(p):
    assert q_shift(1.0, p) == p


@given(probs, st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
def test_q_monotone_in_delta(p, d1, d2):
    lo, hi = sorted((d1, d2))
    assert q_shift(lo, p) <= q_shift(hi, p) + 1e-15


@pytest.mark.parametrize("bad", [0.0, -1.0, np.inf, np.nan])
def test_bad_delta(bad):
    with pytest.raises(ValueError):
        q_shift(bad, 0.5)


def test_bad_inputs():
    with pytest.raises(ValueError):
        q_shift(1.0, 1.2)
    with pytest.raises(ValueError):
        dq_weight(2, 1.0, 0.5)
    with pytest.raises(ValueError):
        odds_ratio(1.0, 0.0)


def test_intervention_spec():
    spec = InterventionSpec.uniform(0.5, 3)
    assert spec.delta == (0.5, 0.5, 0.5) and spec.s_max == 3 and spec[2] == 0.5
    with pytest.raises(ValueError):
        InterventionSpec((1.0, 0.0))


def test_patterns_and_codes():
    assert pattern_of(5, 4) == "0101" and code_of("0101") == 5
    assert pattern_of(0, 0) == "" and code_of("") == 0
    w = np.array([[1, 0, 1], [0, 1, 1]])
    assert list(history_codes(w, 1)) == [0, 0]
    assert list(history_codes(w, 3)) == [2, 1]   # "10", "01": first segment is the high bit


def _toy():
    # 4 units, s_max 2: two reach segment 2
    w = np.array([[1, 1], [1, 0], [0, 0], [1, 0]])
    s_len = np.array([2, 2, 1, 1])
    return Dataset(np.zeros(4), s_len, w, np.zeros((4, 2, 1)))


def test_fit_p_tables_counts_units_reaching_each_segment():
    tab = fit_p_tables(_toy())
    assert tab.get(1, "") == 0.75
    assert tab.get(2, "1") == 0.5
    with pytest.raises(MissingStratumError):
        tab.get(2, "0")
    assert tab.as_dict() == {(1, ""): 0.75, (2, "1"): 0.5}


def test_lookup_raises_on_unseen_history():
    tab = fit_p_tables(_toy())
    assert list(tab.lookup(2, [1, 1])) == [0.5, 0.5]
    with pytest.raises(MissingStratumError) as exc:
        tab.lookup(2, [0, 1, 0])
    assert exc.value.count == 2


def test_p_tables_csv(tmp_path):
    path = tmp_path / "p.csv"
    fit_p_tables(_toy()).to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "s,pattern,count,p_hat"
    assert lines[1:] == ["1,,4,0.75", "2,1,2,0.5"]


def test_p_tables_from_arrays_matches_brute_force():
    rng = Rng(4)
    n, s_max = 500, 3
    w = (rng.uniform((n, s_max)) < 0.4).astype(np.int8)
    s_len = 1 + (rng.uniform(n) * s_max).astype(int)
    tab = p_tables_from_arrays(w, s_len, s_max)
    for s in range(1, s_max + 1):
        for code in range(2 ** (s - 1)):
            pat = pattern_of(code, s - 1)
            rows = [i for i in range(n) if s_len[i] >= s and "".join(map(str, w[i, :s - 1])) == pat]
            if rows:
                assert tab.get(s, pat) == pytest.approx(np.mean([w[i, s - 1] for i in rows]), abs=1e-15)


def test_empty_table_cells_are_nan():
    tab = PTables(1, {1: np.array([0])}, {1: np.array([0])})
    assert np.isnan(tab.p_hat(1)[0])

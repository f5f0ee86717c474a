"""What an incremental intervention does to one segment's treatment probability.

The shift multiplies the odds of treatment by delta, so a unit that was
never going to be treated (p = 0) stays untreated and a certain one stays
treated. Nothing is forced to a fixed value, which is why the target stays
identified even when some histories almost never see treatment.
"""

import numpy as np

from dyngpi import InterventionSpec, fit_p_tables, odds_ratio, q_shift
from dyngpi.dgp import DiscreteDgp
from dyngpi.numerics import Rng

p = np.array([0.0, 0.05, 0.3, 0.5, 0.9, 1.0])
print("p        " + " ".join(f"{x:6.2f}" for x in p))
for delta in (0.25, 0.5, 1.0, 2.0, 4.0):
    print(f"delta={delta:<4} " + " ".join(f"{x:6.3f}" for x in q_shift(delta, p)))

inner = p[(p > 0) & (p < 1)]
print("\nodds(q) / odds(p) at delta=3:", np.round(odds_ratio(3.0, inner), 12))

# The baseline probabilities come from history tables: P(W_s = 1 | earlier
# treatments) among units that reach segment s.
ds, _ = DiscreteDgp().simulate(5000, Rng(1))
tab = fit_p_tables(ds)
print("\nestimated history tables (segment, history, count, p_hat):")
for s, pattern, count, p_hat in tab.entries():
    print(f"  s={s}  history={pattern or '-':<3} n={count:<5d} p_hat={p_hat:.3f}")

spec = InterventionSpec((2.0, 1.0, 0.5))
print("\na segment-specific intervention:", spec.delta)

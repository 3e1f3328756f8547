"""Infinite-volume expectations on a random chain.

Boundary states are limits of the transfer maps applied from far away.  With
them the thermodynamic-limit functional is a finite computation, finite
chains converge to it geometrically, connected correlations obey the
f <= 8 D |O||O| c bound, and gauge fixing makes every transfer map trace
preserving without changing any expectation.
"""

import numpy as np

from sgmps.ensembles import gaussian_spec, sample_window
from sgmps.thermo import (
    BoundaryCache,
    finite_expectation,
    gauge_fix,
    limit_functional,
    two_point_function,
)

Z = np.diag([1.0, -1.0])
X = np.array([[0.0, 1.0], [1.0, 0.0]])

w = sample_window(gaussian_spec("TI"), -1100, 2201, seed=3)
cache = BoundaryCache(w, 1000, 1e-12)
t = limit_functional(cache, [(0, Z)]).real
print(f"<Z_0> in the thermodynamic limit: {t:+.12f}")
for N in (2, 4, 8, 16):
    print(f"  finite chain, N={N:2d}: gap {abs(t - finite_expectation(w, [(0, Z)], N)):.2e}")

print("\nconnected correlation f(0, s) and the 8 D c bound")
for s in (2, 4, 6, 8, 10):
    r = two_point_function(w, (0, Z), (s, Z), cache=cache, seed=s)
    print(f"  s={s:2d}: f = {r.f_value:.3e}   bound = {r.bound_8Dc:.3e}   holds: {r.holds}")

w = sample_window(gaussian_spec("IID"), -300, 601, seed=4)
cache = BoundaryCache(w, 140, 1e-12)
g = gauge_fix(w, -150, 150, cache)  # the gauged chain must cover the boundary depth
gc = BoundaryCache(g.gauged, 140, 1e-12)
print(f"\ngauge fixing an IID window: max trace-preservation residual {max(g.tp_residuals):.1e}")
for O in (Z, X):
    a, b = limit_functional(cache, [(0, O)]).real, limit_functional(gc, [(0, O)]).real
    print(f"  expectation before {a:+.10f}, after {b:+.10f}")

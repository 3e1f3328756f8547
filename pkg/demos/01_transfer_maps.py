"""Transfer maps of random tensors, strict positivity and the contraction coefficient.

A single Gaussian site with d = D = 2 is almost never positivity improving,
but a composition of 2 ceil(log_d D) sites almost always is.  Once a map is
strictly positive its Birkhoff contraction coefficient drops below 1, and
composing more sites shrinks it further.
"""

import numpy as np

from sgmps.contraction import contraction_estimate, contraction_oracle_d2
from sgmps.ensembles import gaussian_local_tensor, wielandt_length
from sgmps.mcore import compose_all, liouville_of_tensor, strict_positivity_check

rng = np.random.default_rng(0)
d, D = 2, 2
tensors = [gaussian_local_tensor(d, D, 1 / np.sqrt(D), rng) for _ in range(6)]
maps = [liouville_of_tensor(t) for t in tensors]

print(f"Wielandt length for d={d}, D={D}: {wielandt_length(d, D)}")
for n in range(1, 4):
    S = compose_all(maps[:n])
    verdict = strict_positivity_check(S, mode="combined")
    print(f"  {n} site(s): {verdict.value}")

print("\ncontraction coefficient of n-site products (search lower bound, grid oracle)")
for n in range(2, 7):
    S = compose_all(maps[:n])
    c = contraction_estimate(S, seed=n).lower
    print(f"  n={n}: c = {c:.4f}   oracle {contraction_oracle_d2(S, 64):.4f}")

# c is submultiplicative: c(T S) <= c(T) c(S)
S, T = compose_all(maps[:2]), compose_all(maps[2:4])
cs, ct = contraction_oracle_d2(S, 64), contraction_oracle_d2(T, 64)
print(f"\nc(S) c(T) = {cs * ct:.4f} >= c(TS) = {contraction_oracle_d2(compose_all([T, S]), 64):.4f}")

import itertools

import numpy as np
import pytest
from scipy.stats import ks_2samp

from sgmps.contraction import ZERO, projective_apply
from sgmps.ensembles import (
    EnsembleSpec,
    Explicit,
    ExceedsCap,
    Gaussian,
    Pool,
    depolarizing_tensor,
    entry_time_tau,
    explicit_ti_spec,
    gaussian_local_tensor,
    gaussian_pool,
    gaussian_spec,
    markov_beta_exact,
    pool_spec,
    sample_tau_and_c,
    sample_window,
    sticky_markov_spec,
    tail_estimate_f,
    unitary_tensor,
    wielandt_length,
    zeta_estimate,
    zeta_estimates,
)
from sgmps.errors import InvalidInput
from sgmps.mcore import Positivity, compose_all, strict_positivity_check, superop_adjoint
from sgmps.rng import RngSeed, as_seed, make_rng

HADAMARD = np.array([[1, 1], [1, -1]]) / np.sqrt(2)


def set_partitions(items):
    items = list(items)
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for part in set_partitions(rest):
        for k in range(len(part)):
            yield part[:k] + [[first] + part[k]] + part[k + 1 :]
        yield [[first]] + part


def beta_brute_force(P, pi, n):
    """sup over partitions of the joint law of (X_0, X_n) of 1/2 sum |P(A cap B) - P(A)P(B)|."""
    pi = np.asarray(pi)
    J = pi[:, None] * np.linalg.matrix_power(np.asarray(P), n)
    m = len(pi)
    best = 0.0
    for A in set_partitions(range(m)):
        for B in set_partitions(range(m)):
            tot = 0.0
            for a in A:
                for b in B:
                    joint = J[np.ix_(a, b)].sum()
                    tot += abs(joint - J[a].sum() * J[:, b].sum())
            best = max(best, 0.5 * tot)
    return best


def all_specs():
    pool = gaussian_pool(3, seed=4)
    return [
        gaussian_spec("TI"),
        gaussian_spec("IID"),
        pool_spec("IID", pool),
        sticky_markov_spec(0.8, pool),
    ]


# -- seeds


def test_rng_seed_determinism():
    a = make_rng(RngSeed(5, 1)).standard_normal(4)
    assert np.array_equal(a, make_rng(RngSeed(5, 1)).standard_normal(4))
    assert not np.array_equal(a, make_rng(RngSeed(5, 2)).standard_normal(4))
    assert as_seed(3).child(1, 2) == as_seed({"master": 3, "stream": 0}).child(1, 2)
    with pytest.raises(InvalidInput):
        RngSeed(-1, 0)


# -- specs


def test_spec_json_roundtrip():
    for spec in all_specs() + [explicit_ti_spec(depolarizing_tensor(2))]:
        assert EnsembleSpec.from_json(spec.to_json()).to_json() == spec.to_json()


def test_spec_rejects_bad_rows():
    with pytest.raises(InvalidInput, match="row 1"):
        EnsembleSpec("MarkovModulated", 2, 2, transition=((0.5, 0.5), (0.3, 0.6)),
                     branches=(Gaussian(), Gaussian()))


def test_spec_rejects_nonstationary_pi_and_reducible_chain():
    with pytest.raises(InvalidInput):
        EnsembleSpec("MarkovModulated", 2, 2, transition=((0.9, 0.1), (0.1, 0.9)), stationary=(0.3, 0.7),
                     branches=(Gaussian(), Gaussian()))
    for P in [((1.0, 0.0), (0.0, 1.0)), ((0.0, 1.0), (1.0, 0.0))]:
        with pytest.raises(InvalidInput):
            EnsembleSpec("MarkovModulated", 2, 2, transition=P, branches=(Gaussian(), Gaussian()))


def test_spec_rejects_inconsistent_dims():
    with pytest.raises(InvalidInput):
        EnsembleSpec("TI", 2, 3, marginal=Explicit(depolarizing_tensor(2)))
    with pytest.raises(InvalidInput):
        Pool((depolarizing_tensor(2),), (0.5,))


# -- sampling


def test_ti_window_identical():
    w = sample_window(gaussian_spec("TI"), 0, 5, 1)
    assert all(np.array_equal(t.kraus, w.tensors[0].kraus) for t in w.tensors)


def test_single_tensor_pool_is_deterministic():
    t = gaussian_pool(1, seed=2)[0]
    spec = EnsembleSpec("FinitePool", 2, 2, marginal=Pool((t,), (1.0,)))
    for s in range(3):
        assert all(np.array_equal(x.kraus, t.kraus) for x in sample_window(spec, 0, 6, s).tensors)


def test_window_independent_of_first_site():
    for spec in all_specs():
        a, b = sample_window(spec, 0, 6, 9), sample_window(spec, -40, 6, 9)
        assert all(np.array_equal(x.kraus, y.kraus) for x, y in zip(a.tensors, b.tensors))
        assert a.hidden_path == b.hidden_path


def test_markov_iid_modulator_matches_mixture():
    # rows equal to pi: the site marginal is the pi-mixture of the branch laws
    pi = (0.3, 0.7)
    sig = (0.5, 1.5)
    spec = EnsembleSpec("MarkovModulated", 2, 2, transition=(pi, pi), branches=tuple(Gaussian(s) for s in sig))
    n = 10_000
    x = np.array([abs(sample_window(spec, 0, 1, s).tensors[0].kraus[0, 0, 0]) ** 2 for s in range(n)])
    rng = np.random.default_rng(7)
    comp = rng.choice(2, size=n, p=pi)
    direct = np.array([abs(gaussian_local_tensor(2, 2, sig[c], rng).kraus[0, 0, 0]) ** 2 for c in comp])
    expect = sum(p * 2 * s**2 for p, s in zip(pi, sig))
    se = np.sqrt(x.var() / n + direct.var() / n)
    assert abs(x.mean() - direct.mean()) <= 4 * se
    assert abs(x.mean() - expect) <= 4 * x.std() / np.sqrt(n)


def test_gaussian_moments():
    sigma, n = 0.7, 100_000
    rng = make_rng(11)
    z = np.array([gaussian_local_tensor(2, 2, sigma, rng).kraus for _ in range(n)])
    for part in (z.real, z.imag):
        assert np.all(np.abs(part.mean(axis=0)) <= 4 * sigma / np.sqrt(n))
        assert np.all(np.abs(part.var(axis=0) / sigma**2 - 1) <= 0.05)


def test_gaussian_fixed_seed_and_errors():
    a = gaussian_local_tensor(2, 3, 0.5, 42)
    assert np.array_equal(a.kraus, gaussian_local_tensor(2, 3, 0.5, 42).kraus)
    with pytest.raises(InvalidInput):
        gaussian_local_tensor(2, 2, 0.0, 1)


def test_stationarity_in_law():
    n = 10_000
    for spec in all_specs():
        s0 = [np.linalg.norm(sample_window(spec, 0, 8, s).tensors[0].kraus[0], 2) for s in range(n)]
        s7 = [np.linalg.norm(sample_window(spec, 0, 8, s).tensors[7].kraus[0], 2) for s in range(n, 2 * n)]
        assert ks_2samp(s0, s7).pvalue > 1e-3


def test_assumption_one_sampling():
    spec = gaussian_spec("IID")
    rho = np.eye(2) / 2
    w = sample_window(spec, 0, 10_000, 3)
    for k in range(10_000):
        S = w.transfer(k)
        assert projective_apply(S, rho) is not ZERO
        assert projective_apply(superop_adjoint(S), rho) is not ZERO


# -- entry time


def test_tau_trivial_cases():
    dep = sample_window(explicit_ti_spec(depolarizing_tensor(2)), 0, 8, 0)
    assert entry_time_tau(dep) == 1
    uni = sample_window(explicit_ti_spec(unitary_tensor(HADAMARD)), 0, 8, 0)
    tau = entry_time_tau(uni)
    assert isinstance(tau, ExceedsCap) and tau > 8


def test_tau_wielandt_bound_d2_D3():
    spec = gaussian_spec("IID", 2, 3)
    L = wielandt_length(2, 3)
    assert L == 4
    hits = sum(entry_time_tau(sample_window(spec, 0, 16, s)) <= L for s in range(500))
    assert hits >= 499


def test_tau_persistence():
    spec = gaussian_spec("IID", 2, 3)
    for s in range(50):
        w = sample_window(spec, 0, 12, s)
        n = entry_time_tau(w, 8)
        for k in (1, 2, 3):
            S = compose_all([w.transfer(j) for j in range(n + k)])
            assert strict_positivity_check(S, mode="choi_sufficient") is Positivity.CERTIFIED_POSITIVE


def test_tail_estimates():
    assert tail_estimate_f(explicit_ti_spec(depolarizing_tensor(2)), 1, 50).value == 0
    assert tail_estimate_f(explicit_ti_spec(unitary_tensor(HADAMARD)), 5, 50).value == 1
    est = tail_estimate_f(gaussian_spec("IID"), 2, 1000, seed=1)
    assert est.value <= 0.01
    again = tail_estimate_f(gaussian_spec("IID"), 2, 2000, seed=2)
    assert abs(est.value - again.value) <= 3 * np.hypot(est.se, again.se) + 1e-3


def test_zeta_trivial_cases():
    for b, u in [(1, 2), (3, 8)]:
        assert zeta_estimate(explicit_ti_spec(depolarizing_tensor(2)), b, u, 30).value == 0
        assert zeta_estimate(explicit_ti_spec(unitary_tensor(HADAMARD)), b, u, 30).value == 0
    with pytest.raises(InvalidInput):
        zeta_estimate(gaussian_spec("TI"), 2, 1, 10)


def test_zeta_monotone_in_u():
    spec = gaussian_spec("TI")
    z2, z8 = zeta_estimates(spec, 4, [2, 8], 1000, seed=5)
    assert z2.value >= z8.value - 2 * z8.se
    assert zeta_estimate(spec, 4, 8, 100, seed=5).value == zeta_estimates(spec, 4, [8], 100, seed=5)[0].value
    tau, c = sample_tau_and_c(spec, 4, 100, 5)
    assert zeta_estimate(spec, 4, 8, 100, seed=5).value == np.mean((tau <= 4) & (c > 1 - 1 / 8))


# -- beta mixing


def test_beta_independent_rows():
    pi = np.array([0.2, 0.5, 0.3])
    P = np.tile(pi, (3, 1))
    assert all(markov_beta_exact(P, pi, n) == pytest.approx(0, abs=1e-15) for n in range(1, 6))


@pytest.mark.parametrize("p", [0.6, 0.75, 0.9])
def test_beta_two_state_closed_form(p):
    P = np.array([[p, 1 - p], [1 - p, p]])
    pi = np.array([0.5, 0.5])
    for n in range(1, 15):
        b = markov_beta_exact(P, pi, n)
        assert abs(b - beta_brute_force(P, pi, n)) <= 1e-12
        assert abs(b - abs(2 * p - 1) ** n / 2) <= 1e-12


def test_beta_three_state_brute_force_and_monotone():
    rng = np.random.default_rng(3)
    P = rng.random((3, 3)) + 0.05
    P /= P.sum(axis=1, keepdims=True)
    w, v = np.linalg.eig(P.T)
    pi = np.real(v[:, np.argmin(abs(w - 1))])
    pi /= pi.sum()
    vals = [markov_beta_exact(P, pi, n) for n in range(1, 40)]
    for n in (1, 2, 5):
        assert abs(vals[n - 1] - beta_brute_force(P, pi, n)) <= 1e-12
    assert all(b <= a + 1e-15 for a, b in zip(vals, vals[1:]))
    assert vals[-1] < 1e-10


def test_beta_errors():
    pi = np.array([0.5, 0.5])
    with pytest.raises(InvalidInput):
        markov_beta_exact(np.array([[0.0, 1.0], [1.0, 0.0]]), pi, 3)
    with pytest.raises(InvalidInput):
        markov_beta_exact(np.array([[0.9, 0.1], [0.1, 0.9]]), pi, 0)


def test_set_partitions_counts():
    # Bell numbers
    assert [sum(1 for _ in set_partitions(range(k))) for k in range(5)] == [1, 1, 2, 5, 15]
    assert all(sorted(itertools.chain(*p)) == [0, 1, 2] for p in set_partitions(range(3)))

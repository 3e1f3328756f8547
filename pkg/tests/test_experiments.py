import math

import numpy as np
import pytest

from sgmps.contraction import contraction_estimate_many
from sgmps.ensembles import (
    depolarizing_tensor,
    explicit_ti_spec,
    gaussian_pool,
    gaussian_spec,
    markov_beta_exact,
    pool_spec,
    sample_window,
    sticky_markov_spec,
    unitary_tensor,
)
from sgmps.errors import CalibrationFailed, InvalidInput, MissingProfile, RegimeMismatch
from sgmps.experiments import (
    DecayConstants,
    DecaySeries,
    c_expectation_series,
    calibrate_envelope,
    calibrate_iid,
    check_regime,
    estimate_xi,
    exp_fit,
    failure_fit,
    highprob_decay_table,
    recursive_bound_check,
    regime_ordering,
    sample_c_prefix,
    wielandt_experiment,
    window_bound_experiment,
)
from sgmps.mcore import compose_all

Z = np.diag([1.0, -1.0])
Z4 = np.diag([1.0, -1.0, 1.0, -1.0])
DEP = explicit_ti_spec(depolarizing_tensor(2))
UNITARY = explicit_ti_spec(unitary_tensor(np.array([[0, 1], [1, 0]], dtype=complex)))


# -- fits and series containers


def test_exp_fit_recovers_rate():
    n = np.arange(2, 13)
    f = exp_fit(n, 3.0 * np.exp(-0.4 * n))
    assert f.rate == pytest.approx(0.4) and f.prefactor == pytest.approx(3.0) and f.r_squared == pytest.approx(1)


def test_failure_fit_beta_phat():
    s = np.arange(16, 49, 4)
    x = s / (np.log(s) * np.log(np.log(s)))
    out = failure_fit(s, np.exp(-0.7 * x), 1000, "BETA_EXP")
    assert out["p_hat"] == pytest.approx(0.7)


def test_decay_series_validation_and_csv():
    args = dict(samples=(5, 5), mean_c=(0.1, 0.05), std_c=(0.0, 0.0), mean_f=(0.0, 0.0), empirical_prob=(1.0, 0.5),
                bound_value=(1.0, 0.5), floor_value=(0.9, 0.9), threshold_spec="TI")
    s = DecaySeries(separations=(2, 3), **args)
    lines = s.to_csv().splitlines()
    assert lines[0] == "separation,mean_c,std_c,mean_f,empirical_prob,bound_value,floor_value"
    assert lines[1].split(",")[0] == "2" and float(lines[2].split(",")[4]) == 0.5
    for bad in ((3, 2), (1, 2), (2, 2)):
        with pytest.raises(InvalidInput):
            DecaySeries(separations=bad, **args)
    with pytest.raises(InvalidInput):
        DecaySeries(separations=(2, 3), **{**args, "samples": (0, 5)})


# -- c series and xi


def test_depolarizing_c_series_is_zero():
    cs = c_expectation_series(DEP, [1, 2, 3], samples=5, bootstrap=10)
    assert cs.mean == (0.0, 0.0, 0.0)


def test_xi_trivial_cases():
    xi = estimate_xi(DEP, 4, samples=5)
    assert xi.minus_infinity and xi.floored == 5
    xi = estimate_xi(UNITARY, 4, samples=5)
    assert xi.xi_hat == pytest.approx(0, abs=1e-9) and not xi.minus_infinity
    with pytest.raises(InvalidInput):
        estimate_xi(DEP, 3, samples=5)


def test_xi_negative_for_iid():
    xi = estimate_xi(gaussian_spec("IID"), 8, samples=200, seed=3)
    assert xi.ci[1] < 0


def test_worker_count_does_not_change_results():
    spec = gaussian_spec("IID")
    a = sample_c_prefix(spec, [2, 4], 12, seed=5, workers=1)
    b = sample_c_prefix(spec, [2, 4], 12, seed=5, workers=3)
    assert np.array_equal(a, b)


def test_log_subadditivity():
    spec = gaussian_spec("IID")
    i, j = 2, 3
    full, head, tail, seeds = [], [], [], []
    for s in range(200):
        w = sample_window(spec, 0, i + j, s)
        maps = [w.transfer(k) for k in range(i + j)]
        full.append(compose_all(maps))
        head.append(compose_all(maps[:i]))
        tail.append(compose_all(maps[i:]))
        seeds.append(s)
    c = [np.array([e.lower for e in contraction_estimate_many(m, seeds)]) for m in (full, head, tail)]
    assert np.all(np.log(c[0]) <= np.log(c[1]) + np.log(c[2]) + 3e-2)


# -- recursive covariance bound and regime ordering


@pytest.mark.parametrize("kind", ["IID", "TI"])
def test_recursive_bound_iid_ti(kind):
    spec = gaussian_spec(kind)
    for i, q, r in ((1, 1, 1), (2, 1, 2)):
        rb = recursive_bound_check(spec, i, q, r, samples=100, seed=i)
        assert rb.rho_q == (0.0 if kind == "IID" else 1.0)
        assert rb.holds


def test_recursive_bound_markov_declared_rho():
    P = np.array([[0.9, 0.1], [0.1, 0.9]])
    pi = np.array([0.5, 0.5])
    rho = [min(1.0, 2 * math.sqrt(markov_beta_exact(P, pi, q))) for q in range(1, 9)]
    spec = sticky_markov_spec(0.9, gaussian_pool(2, seed=1), rho_profile=rho)
    triples = [(1, 1, 1), (1, 2, 1), (2, 1, 1), (1, 1, 2), (2, 2, 2), (1, 3, 1), (3, 1, 1), (2, 3, 1), (1, 4, 2), (2, 4, 2)]
    margins = [recursive_bound_check(spec, *t, samples=100, seed=k).margin for k, t in enumerate(triples)]
    assert all(m >= 0 for m in margins)


def test_recursive_bound_requires_profile():
    spec = sticky_markov_spec(0.9, gaussian_pool(2, seed=1))
    with pytest.raises(MissingProfile):
        recursive_bound_check(spec, 1, 1, 1, samples=10)


def test_regime_ordering():
    pool = gaussian_pool(4, seed=5)
    n = [2, 4, 6]
    runs = [c_expectation_series(s, n, samples=200, seed=9, bootstrap=10)
            for s in (pool_spec("IID", pool), sticky_markov_spec(0.9, pool), pool_spec("TI", pool))]
    margins = regime_ordering(*(r.mean for r in runs), *(r.se for r in runs))
    assert margins.shape == (3, 2) and np.all(margins >= 0)


# -- decay tables


def test_regime_mismatch():
    with pytest.raises(RegimeMismatch):
        check_regime(gaussian_spec("IID"), "BETA_EXP")
    with pytest.raises(RegimeMismatch):
        check_regime(gaussian_spec("IID"), "TI")
    with pytest.raises(InvalidInput):
        check_regime(gaussian_spec("TI"), "NOPE")


def test_depolarizing_table_probability_one():
    consts = DecayConstants(1e-9, 1.0, 0.1)
    rep = highprob_decay_table(DEP, "TI", (Z4, Z4), [2, 3], 100, consts, depth=10)
    assert rep.series.empirical_prob == (1.0, 1.0) and rep.theorem_check["passed"]
    assert rep.theorem_check["bound_violations"] == 0


def test_table_preconditions():
    consts = DecayConstants(1.0, 1.0, 0.1)
    with pytest.raises(InvalidInput):
        highprob_decay_table(DEP, "TI", (Z4, Z4), [2, 3], 50, consts, depth=10)
    with pytest.raises(InvalidInput):
        highprob_decay_table(DEP, "TI", (Z4, Z4), [1, 3], 100, consts, depth=10)


def test_table_is_deterministic_across_workers():
    spec = gaussian_spec("IID")
    consts = DecayConstants(1.0, 0.3, 0.3)
    a = highprob_decay_table(spec, "IID", (Z, Z), [2, 3], 100, consts, seed=4, workers=1)
    b = highprob_decay_table(spec, "IID", (Z, Z), [2, 3], 100, consts, seed=4, workers=2)
    assert a.dumps() == b.dumps() and a.series.to_csv() == b.series.to_csv()


# -- calibration


def test_envelope_calibration_covers_pilot():
    rng = np.random.default_rng(1)
    seps = np.arange(3, 9)
    rates = rng.uniform(0.3, 0.8, 200)
    f = rng.uniform(0.5, 2, 200)[:, None] * np.exp(-rates[:, None] * seps[None, :])
    c = calibrate_envelope(seps, f, 1.0, 0.1)
    covered = np.mean(np.all(f <= c.K * np.exp(-c.rate * seps)[None, :], axis=1))
    assert covered >= 0.9 - 0.05 and c.floor == 0.1
    with pytest.raises(CalibrationFailed):
        calibrate_envelope(seps, np.full((3, 6), np.nan), 1.0, 0.1)


def test_iid_calibration():
    c = calibrate_iid(0.6, 3, np.linspace(0, 1, 101), 1.0)
    assert c.rate == c.floor == 0.3
    with pytest.raises(CalibrationFailed):
        calibrate_iid(-0.1, 3, [0.1], 1.0)


# -- finite window and Wielandt


def test_window_depolarizing():
    rep = window_bound_experiment(DEP, 10, 0.5, (Z4, Z4), samples=100, depth=10)
    cal = rep.extra["calibration"]
    assert cal["b"] == 1 and cal["u"] == 2
    assert all(p == 1.0 for p in rep.series.empirical_prob) and rep.theorem_check["passed"]


def test_window_unitary_fails():
    with pytest.raises(CalibrationFailed):
        window_bound_experiment(UNITARY, 8, 0.2, (Z, Z), samples=100)
    with pytest.raises(InvalidInput):
        window_bound_experiment(DEP, 2, 0.2, (Z4, Z4), samples=100)


def test_wielandt_fraction():
    assert wielandt_experiment(2, 2, samples=500, seed=0) >= 0.998
    with pytest.raises(InvalidInput):
        wielandt_experiment(1, 2)

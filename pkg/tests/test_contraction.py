import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sgmps.contraction import (
    ZERO,
    contraction_estimate,
    contraction_estimate_many,
    contraction_oracle_d2,
    m_coeff,
    metric_d,
    projective_apply,
)
from sgmps.errors import InvalidInput, KernelMeetsStates
from sgmps.mcore import (
    LocalTensor,
    Positivity,
    Superoperator,
    compose_all,
    depolarizing_superop,
    identity_superop,
    liouville_of_tensor,
    schatten_norm,
    strict_positivity_check,
    superop_adjoint,
)

from conftest import random_state, random_tensor


def positive_channel(rng, D=2):
    # two Gaussian sites reach the Wielandt length at d = D = 2
    t = random_tensor(rng, 2, D)
    return compose_all([liouville_of_tensor(t), liouville_of_tensor(random_tensor(rng, 2, D))])


def m_bisection(A, B, hi=1e6, steps=200):
    """Largest lam with A - lam B PSD, by bisection on an eigenvalue test."""
    lo = 0.0
    if np.linalg.eigvalsh(A - 1e-300 * B)[0] < -1e-12:
        return 0.0
    for _ in range(steps):
        mid = 0.5 * (lo + hi)
        if np.linalg.eigvalsh(A - mid * B)[0] >= -1e-14:
            lo = mid
        else:
            hi = mid
    return lo


def d_from_m(A, B):
    p = m_coeff(A, B) * m_coeff(B, A)
    return (1 - p) / (1 + p)


# -- m coefficient and metric


def test_m_examples():
    rho = np.diag([0.3, 0.7])
    assert m_coeff(rho, rho) == pytest.approx(1)
    assert m_coeff(np.eye(2) / 2, np.diag([1.0, 0.0])) == pytest.approx(0.5)


def test_m_leak_into_kernel_is_zero():
    # B = |+><+| is not below any multiple of diag(1, 0)
    plus = 0.5 * np.ones((2, 2))
    assert m_coeff(np.diag([1.0, 0.0]), plus) == 0.0


def test_m_matches_bisection(rng):
    for _ in range(50):
        A, B = random_state(rng, 3), random_state(rng, 3)
        assert abs(m_coeff(A, B) - m_bisection(A, B)) <= 1e-8


def test_m_errors():
    with pytest.raises(InvalidInput):
        m_coeff(np.eye(2), np.zeros((2, 2)))
    with pytest.raises(InvalidInput):
        m_coeff(np.diag([1.0, -1.0]), np.eye(2))


def test_metric_examples(rng):
    rho = random_state(rng, 2)
    assert metric_d(rho, rho) == pytest.approx(0, abs=1e-12)
    assert metric_d(np.eye(2) / 2, np.diag([1.0, 0.0])) == pytest.approx(1)


def test_metric_matches_m_formula(rng):
    for _ in range(50):
        A, B = random_state(rng, 2), random_state(rng, 2)
        assert metric_d(A, B) == pytest.approx(d_from_m(A, B), abs=1e-10)
        assert metric_d(A, B) == pytest.approx(metric_d(B, A), abs=1e-12)


def test_metric_sandwich(rng):
    for _ in range(500):
        D = int(rng.integers(2, 4))
        A, B = random_state(rng, D), random_state(rng, D)
        d = metric_d(A, B)
        t = schatten_norm(A - B, 1)
        eta = np.linalg.eigvalsh(A)[0]
        assert 0.5 * t <= d + 1e-12
        assert d <= t / eta + 1e-10


def test_metric_rejects_non_states():
    with pytest.raises(InvalidInput):
        metric_d(np.eye(2), np.eye(2) / 2)


# -- projective action


def test_projective_apply_examples(rng):
    rho = random_state(rng, 3)
    assert np.allclose(projective_apply(depolarizing_superop(3), rho), np.eye(3) / 3)
    S = liouville_of_tensor(random_tensor(rng, 2, 3))
    assert np.allclose(projective_apply(Superoperator(2 * S.liouville), rho), projective_apply(S, rho), atol=1e-14)
    for _ in range(20):
        out = projective_apply(positive_channel(rng, 3), random_state(rng, 3))
        assert abs(np.trace(out) - 1) <= 1e-12


def test_projective_apply_zero_and_errors():
    kill = LocalTensor(np.array([[[0, 1], [0, 0]]], dtype=complex))  # X -> E01 X E10
    assert projective_apply(liouville_of_tensor(kill), np.diag([1.0, 0.0])) is ZERO
    with pytest.raises(InvalidInput):
        projective_apply(identity_superop(2), np.diag([1.0, -0.5]))


# -- contraction coefficient


def test_contraction_examples(rng):
    assert contraction_estimate(identity_superop(2), restarts=8, iters=50).lower == pytest.approx(1, abs=1e-9)
    assert contraction_estimate(depolarizing_superop(3)).lower == 0.0


def test_kernel_meets_states():
    kill = LocalTensor(np.array([[[0, 1], [0, 0]]], dtype=complex))
    with pytest.raises(KernelMeetsStates):
        contraction_estimate(liouville_of_tensor(kill), restarts=4, iters=5)


def test_witnesses_reproduce_lower(rng):
    for k in range(10):
        S = positive_channel(rng)
        est = contraction_estimate(S, restarts=16, iters=60, seed=k)
        a, b = (projective_apply(S, w) for w in est.achieved_pair)
        assert 0 <= est.lower <= 1
        assert abs(metric_d(a, b) - est.lower) <= 1e-8


def test_batched_equals_single(rng):
    maps = [positive_channel(rng) for _ in range(5)]
    many = contraction_estimate_many(maps, list(range(5)), restarts=8, iters=30)
    for k, S in enumerate(maps):
        assert contraction_estimate(S, restarts=8, iters=30, seed=k).lower == many[k].lower


def test_oracle_examples(rng):
    assert contraction_oracle_d2(identity_superop(2), grid=32) >= 0.999
    assert contraction_oracle_d2(depolarizing_superop(2)) == pytest.approx(0, abs=1e-12)
    with pytest.raises(InvalidInput):
        contraction_oracle_d2(identity_superop(2), grid=4)
    with pytest.raises(InvalidInput):
        contraction_oracle_d2(identity_superop(3))


def test_oracle_refinement_stable(rng):
    for _ in range(5):
        S = positive_channel(rng)
        assert abs(contraction_oracle_d2(S, 64) - contraction_oracle_d2(S, 32)) < 5e-3


def test_estimate_agrees_with_oracle(rng):
    for k in range(10):
        S = positive_channel(rng)
        assert abs(contraction_estimate(S, seed=k).lower - contraction_oracle_d2(S, 64)) <= 2e-2


def test_positive_implies_contraction(rng):
    for _ in range(30):
        S = positive_channel(rng)
        if strict_positivity_check(S, mode="choi_sufficient") is Positivity.CERTIFIED_POSITIVE:
            assert contraction_oracle_d2(S, 32) < 1 - 1e-3


@pytest.mark.parametrize("alpha", [0.5, 2, 10])
def test_oracle_scale_invariant(rng, alpha):
    S = positive_channel(rng)
    # equal up to the last bit of the trace normalization
    assert contraction_oracle_d2(Superoperator(alpha * S.liouville), 32) == pytest.approx(contraction_oracle_d2(S, 32), abs=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_submultiplicative(seed):
    rng = np.random.default_rng(seed)
    S, T = positive_channel(rng), positive_channel(rng)
    ST = compose_all([T, S])
    assert contraction_oracle_d2(ST, 32) <= contraction_oracle_d2(S, 32) * contraction_oracle_d2(T, 32) + 3e-2


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_adjoint_symmetry(seed):
    rng = np.random.default_rng(seed)
    S = liouville_of_tensor(random_tensor(rng, 2, 2))
    assert abs(contraction_oracle_d2(S, 32) - contraction_oracle_d2(superop_adjoint(S), 32)) <= 3e-2

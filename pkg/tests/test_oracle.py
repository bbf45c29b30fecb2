import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from bpr.errors import NumericError
from bpr.oracle import (NoiseSpec, TabularMDP, adversarial_instance, assumption1_check, bellman_optimality,
                        exact_return, greedy, implicit_q, inject_noise, occupancy, pdl_check, policy_evaluation,
                        prop1_check, prop2_check, random_mdp, random_policy, rho_bounds, rho_bounds_check,
                        soft_preference, tvd_half_l1, tvd_sup, value_iteration, verify_suite)


def single_state(r=1.0, gamma=0.5):
    return TabularMDP(np.ones((1, 1, 1)), [[r]], gamma, [1.0])


def chain():
    """Two states, two actions: action 0 stays, action 1 switches."""
    P = np.zeros((2, 2, 2))
    P[0, 0, 0] = P[1, 0, 1] = 1.0
    P[0, 1, 1] = P[1, 1, 0] = 1.0
    R = np.array([[0.0, 1.0], [2.0, 0.0]])
    return TabularMDP(P, R, 0.5, [1.0, 0.0])


def test_mdp_validation():
    with pytest.raises(ValueError):
        TabularMDP(np.full((1, 1, 2), 0.6), [[0.0]], 0.9, [1.0])
    with pytest.raises(ValueError):
        TabularMDP(np.ones((1, 1, 1)), [[0.0]], 1.0, [1.0])
    with pytest.raises(ValueError):
        TabularMDP(np.ones((1, 1, 1)), [[0.0]], 0.5, [0.5])


def test_value_iteration_examples():
    assert value_iteration(single_state())[0, 0] == pytest.approx(2.0, abs=1e-12)
    mdp = random_mdp(np.random.default_rng(0))
    zero = TabularMDP(mdp.P, mdp.R, 0.0, mdp.p0)
    np.testing.assert_array_equal(value_iteration(zero), mdp.R)
    Q = value_iteration(mdp)
    assert np.max(np.abs(bellman_optimality(mdp, Q) - Q)) <= 1e-10


@given(st.integers(0, 10_000))
def test_value_iteration_dominates_every_deterministic_policy(seed):
    rng = np.random.default_rng(seed)
    mdp = random_mdp(rng, 4, 2)
    V = value_iteration(mdp).max(1)
    for k in range(16):
        pi = np.array([(k >> i) & 1 for i in range(4)])
        assert np.all(policy_evaluation(mdp, pi)[1] <= V + 1e-10)


def test_exact_return_examples():
    rng = np.random.default_rng(1)
    mdp = random_mdp(rng)
    pi = random_policy(rng, 5, 3)
    zero = TabularMDP(mdp.P, mdp.R, 0.0, mdp.p0)
    assert exact_return(zero, pi) == pytest.approx(float(mdp.p0 @ (pi * mdp.R).sum(1)), abs=1e-14)
    ones = TabularMDP(mdp.P, np.ones_like(mdp.R), 0.9, mdp.p0)
    assert exact_return(ones, pi) == pytest.approx(10.0, abs=1e-10)


def test_exact_return_matches_monte_carlo():
    rng = np.random.default_rng(2)
    mdp = random_mdp(rng)
    pi = random_policy(rng, 5, 3)
    n, horizon = 1_000_000, 160
    s = rng.choice(5, n, p=mdp.p0)
    ret = np.zeros(n)
    cum_pi = pi.cumsum(1)
    cum_P = mdp.P.cumsum(2)
    disc = 1.0
    for _ in range(horizon):
        a = (rng.random(n)[:, None] > cum_pi[s]).sum(1)
        ret += disc * mdp.R[s, a]
        s = np.minimum((rng.random(n)[:, None] > cum_P[s, a]).sum(1), 4)
        disc *= mdp.gamma
    se = ret.std() / math.sqrt(n)
    assert abs(ret.mean() - exact_return(mdp, pi)) <= 3 * se + disc * 10


def test_occupancy_examples():
    assert occupancy(single_state(gamma=0.8), [0])[0] == pytest.approx(5.0)
    P = np.zeros((2, 1, 2))
    P[:, 0, 0] = 1.0
    mdp = TabularMDP(P, [[1.0], [0.0]], 0.9, [1.0, 0.0])
    assert occupancy(mdp, [0, 0])[1] == 0.0
    rng = np.random.default_rng(3)
    mdp = random_mdp(rng)
    pi = random_policy(rng, 5, 3)
    rho = occupancy(mdp, pi)
    assert float(rho @ (pi * mdp.R).sum(1)) == pytest.approx(exact_return(mdp, pi), abs=1e-10)


@given(st.integers(0, 10_000), st.floats(0.0, 0.99))
def test_occupancy_mass(seed, gamma):
    rng = np.random.default_rng(seed)
    mdp = random_mdp(rng, 5, 3, gamma)
    rho = occupancy(mdp, random_policy(rng, 5, 3))
    assert abs(rho.sum() - 1 / (1 - gamma)) <= 1e-9 * max(1.0, 1 / (1 - gamma))
    assert np.all(rho >= -1e-12)


def test_pdl_identity_examples():
    rng = np.random.default_rng(4)
    mdp = random_mdp(rng)
    pi = random_policy(rng, 5, 3)
    assert pdl_check(mdp, pi, pi) <= 1e-12
    for _ in range(100):
        m = random_mdp(rng)
        assert pdl_check(m, random_policy(rng, 5, 3), random_policy(rng, 5, 3)) <= 1e-10


def test_pdl_hand_worked_chain():
    # pi1 always switches, pi2 always stays; start in state 0, gamma 0.5.
    mdp = chain()
    # pi2 stays in 0 forever with reward 0: V2 = (0, 4), eta2 = 0
    Q2, V2 = policy_evaluation(mdp, [0, 0])
    np.testing.assert_allclose(V2, [0.0, 4.0])
    np.testing.assert_allclose(Q2, [[0.0, 1 + 0.5 * 4], [2 + 0.5 * 4, 0.0]])
    # pi1 alternates 0 -> 1 -> 0 with rewards 1, 0, 1, 0: eta1 = 1 / (1 - 0.25) = 4/3
    assert exact_return(mdp, [1, 1]) == pytest.approx(4 / 3)
    # rho1 = (4/3, 2/3); advantages: state 0 -> 3 - 0 = 3, state 1 -> 0 - 4 = -4
    rho1 = occupancy(mdp, [1, 1])
    np.testing.assert_allclose(rho1, [4 / 3, 2 / 3])
    rhs = 4 / 3 * 3 + 2 / 3 * -4
    assert rhs == pytest.approx(4 / 3 - 0)
    assert pdl_check(mdp, [1, 1], [0, 0]) <= 1e-12


def test_implicit_q_examples():
    Qt = implicit_q([[1.0, 2.0]], [[0.9, 0.1]], 1.0)
    np.testing.assert_allclose(Qt, [[1 + math.log(0.9), 2 + math.log(0.1)]])
    np.testing.assert_allclose(Qt, [[0.8946, -0.3026]], atol=1e-4)
    assert soft_preference(Qt, 0, 1, 0) == pytest.approx(-1.1972, abs=1e-4)
    Q = np.random.default_rng(0).standard_normal((4, 3))
    np.testing.assert_allclose(implicit_q(Q, np.full((4, 3), 0.3), 1e12), Q, atol=1e-11)
    uni = implicit_q(Q, np.full((4, 3), 1 / 3), 2.0)
    np.testing.assert_allclose(uni, Q - math.log(3) / 2.0)
    np.testing.assert_array_equal(greedy(uni), Q.argmax(1))
    with pytest.raises(ValueError):
        implicit_q(Q, np.full((4, 3), 1 / 3), 0.0)


def test_zero_probability_is_a_dominated_sentinel():
    Qt = implicit_q([[5.0, 0.0, 1.0]], [[0.0, 0.5, 0.5]], 1.0)
    assert Qt[0, 0] == -np.inf
    assert greedy(Qt)[0] == 2
    with pytest.raises(ValueError):
        greedy(np.array([[-np.inf, -np.inf]]))


@given(st.lists(st.floats(-10, 10), min_size=3, max_size=3), st.integers(0, 2), st.integers(0, 2))
def test_soft_preference_antisymmetry(row, a1, a2):
    Qt = np.array([row])
    assert soft_preference(Qt, 0, a1, a2) == -soft_preference(Qt, 0, a2, a1)
    assert soft_preference(Qt, 0, a1, a1) == 0.0


def test_assumption1_constant_q_has_no_violations():
    rng = np.random.default_rng(5)
    pb = random_policy(rng, 4, 3)
    for lam in (0.1, 1.0, 10.0):
        assert assumption1_check(None, implicit_q(np.full((4, 3), 2.0), pb, lam), pb) == []


def test_assumption1_uniform_behavior_reports_every_q_difference():
    Q = np.array([[1.0, 2.0], [3.0, 3.0], [0.0, -1.0]])
    pb = np.full((3, 2), 0.5)
    got = {(s, a1, a2) for s, a1, a2, _ in assumption1_check(None, implicit_q(Q, pb, 1.0), pb)}
    assert got == {(0, 0, 1), (2, 1, 0)}


def test_assumption1_violations_move_with_lambda():
    # the log-likelihood bonus shrinks as lambda grows, so anti-aligned Q wins more pairs
    Q, pb = adversarial_instance(np.random.default_rng(6))
    counts = [len(assumption1_check(None, implicit_q(Q, pb, lam), pb)) for lam in (0.25, 1, 4, 16)]
    assert counts[0] < counts[-1]
    assert all(x <= y for x, y in zip(counts, counts[1:]))


def test_prop1_examples():
    rng = np.random.default_rng(7)
    for _ in range(100):
        mdp = random_mdp(rng)
        assert prop1_check(mdp, random_policy(rng, 5, 3), 1.0).surrogate_nonneg
    mdp = random_mdp(rng)
    # a deterministic behavior policy that is already greedy on its own implicit Q
    b = value_iteration(mdp).argmax(1)
    rep = prop1_check(mdp, np.eye(3)[b], 1.0)
    assert rep.surrogate == 0.0 and rep.eta_gap == 0.0


def test_prop1_large_lambda_never_loses_return():
    rng = np.random.default_rng(8)
    for _ in range(50):
        mdp = random_mdp(rng)
        assert prop1_check(mdp, random_policy(rng, 5, 3), 1e9).eta_gap >= -1e-10


def test_noise_injection_respects_bounds():
    Qt = np.zeros((5, 3))
    b = np.array([0, 1, 2, 0, 1])
    Qn, delta = inject_noise(Qt, b, NoiseSpec(0.05, 0.2, seed=3))
    assert np.all(np.abs(delta[np.arange(5), b]) <= 0.05)
    assert np.all(np.abs(delta) <= 0.2)
    with pytest.raises(ValueError):
        NoiseSpec(-0.1, 0.1)


def test_prop2_zero_noise_reduces_to_prop1():
    rng = np.random.default_rng(9)
    mdp, pb = random_mdp(rng), random_policy(rng, 5, 3)
    r1 = prop1_check(mdp, pb, 1.0)
    r2 = prop2_check(mdp, pb, 1.0, NoiseSpec(0.0, 0.0))
    assert r2.surrogate == pytest.approx(r1.surrogate, abs=1e-14)
    assert r2.eta_gap == pytest.approx(r1.eta_gap, abs=1e-14)


def test_prop2_constrained_to_behavior_holds():
    rng = np.random.default_rng(10)
    for _ in range(20):
        rep = prop2_check(random_mdp(rng), random_policy(rng, 5, 3), 1.0, NoiseSpec(0.1, 0.1, 1),
                          constrain_to_behavior=True)
        assert rep.eta_gap == 0.0 and rep.holds and rep.mismatch == 0.0


def test_rho_bounds_examples():
    lo, m, hi = rho_bounds(single_state(gamma=0.9), [0])
    assert lo == pytest.approx(m) and m == pytest.approx(hi)
    # uniform visitation: every state jumps to a uniformly random state, uniform start
    n = 4
    mdp = TabularMDP(np.full((n, 1, n), 1 / n), np.zeros((n, 1)), 0.9, np.full(n, 1 / n))
    lo, m, hi = rho_bounds(mdp, np.zeros(n, int))
    assert m == pytest.approx(lo, abs=1e-12)


def test_rho_bounds_on_many_instances():
    rng = np.random.default_rng(11)
    for _ in range(1000):
        n = int(rng.integers(1, 7))
        mdp = random_mdp(rng, n, 2, float(rng.uniform(0, 0.99)))
        assert rho_bounds_check(mdp, random_policy(rng, n, 2))


@given(st.integers(2, 10), st.integers(0, 10_000))
def test_tvd_forms_agree(k, seed):
    rng = np.random.default_rng(seed)
    u, v = rng.dirichlet(np.ones(k)), rng.dirichlet(np.ones(k))
    assert abs(tvd_sup(u, v) - tvd_half_l1(u, v)) <= 1e-12
    assert tvd_sup(u, u) == 0.0


def test_verify_suite_report_shape():
    reports = verify_suite(10, 0)
    names = [r["check"] for r in reports]
    assert names == ["pdl", "occupancy_mass", "bellman_residual", "rho_bounds", "prop1_surrogate",
                     "prop2_bound", "tvd_identity"]
    for r in reports:
        assert set(r) >= {"check", "instances", "violations", "worst_slack"}
        assert isinstance(r["violations"], int)
    by = {r["check"]: r for r in reports}
    for name in ("pdl", "occupancy_mass", "bellman_residual", "rho_bounds", "prop1_surrogate", "tvd_identity"):
        assert by[name]["violations"] == 0


def test_singular_system_is_reported():
    from bpr.oracle import _solve
    with pytest.raises(NumericError):
        _solve(np.zeros((2, 2)), np.ones(2), "test")

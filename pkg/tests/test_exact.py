import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nac2ts.errors import ShapeError
from nac2ts.exact import (bellman_optimality_residual, build_gamma_instruments,
                          discounted_visitation, exact_q, exact_v, gamma_value,
                          greedy_actions, reward_vector, solve_optimal, td_matrix)
from nac2ts.mdp_core import (Mdp, Policy, StateActionTuple, build_counterexample,
                             build_random_ergodic, induced_kernel)

from oracles import (a_bar_enumerated, brute_force_optimal, mc_horizon, mc_returns,
                     policy_value_state, value_iteration, value_series, visitation_series)

# value iteration on the counterexample at gamma = 0.95, tol 1e-13
V_STAR_COUNTEREXAMPLE = np.array([17.096980016482473, 17.996821069981646,
                                  18.94587106998165, 19.94587106998165])


def random_policy(rng, nS, nA):
    return rng.dirichlet(np.ones(nA), size=nS)


def rand_mdp(seed, nS=5, nA=2, gamma=0.9):
    return build_random_ergodic(nS, nA, gamma, 0.01, np.random.default_rng(seed))


class TestPolicyEvaluation:
    def test_myopic(self):
        mdp = rand_mdp(0, gamma=1e-12)
        np.testing.assert_allclose(exact_q(mdp, Policy.uniform(5, 2)), mdp.reward, atol=1e-10)

    def test_unit_reward(self):
        mdp = rand_mdp(1)
        mdp = Mdp(mdp.transition, np.ones((5, 2)), 0.9)
        q = exact_q(mdp, random_policy(np.random.default_rng(0), 5, 2))
        np.testing.assert_allclose(q, 10.0, atol=1e-10)

    def test_two_state_cycle(self):
        P = np.array([[[0.0, 1.0]], [[1.0, 0.0]]])
        mdp = Mdp(P, np.array([[1.0], [0.0]]), 0.5)
        v = exact_v(mdp, np.ones((2, 1)))
        np.testing.assert_allclose(v.values, [4 / 3, 2 / 3], atol=1e-12)
        assert v.aggregate == pytest.approx(1.0)

    def test_single_state(self):
        mdp = Mdp(np.ones((1, 1, 1)), np.ones((1, 1)), 0.8)
        assert exact_v(mdp, np.ones((1, 1))).values[0] == pytest.approx(5.0)

    def test_matches_series_and_state_solve(self):
        rng = np.random.default_rng(2)
        for seed in range(10):
            mdp = rand_mdp(seed)
            pi = random_policy(rng, 5, 2)
            v = exact_v(mdp, pi).values
            np.testing.assert_allclose(v, value_series(mdp.transition, mdp.reward, 0.9, pi),
                                       atol=1e-10)
            np.testing.assert_allclose(v, policy_value_state(mdp.transition, mdp.reward, 0.9, pi),
                                       atol=1e-10)

    def test_monte_carlo_per_entry(self):
        mdp = rand_mdp(7, gamma=0.8)
        pi = random_policy(np.random.default_rng(1), 5, 2)
        q = exact_q(mdp, pi)
        rng = np.random.default_rng(99)
        n = 10_000
        for s, a in itertools.product(range(5), range(2)):
            g = mc_returns(mdp.transition, mdp.reward, 0.8, pi, s, a, n, rng)
            se = g.std(ddof=1) / np.sqrt(n)
            # 10 comparisons: a 4 SE band keeps the familywise false-alarm rate tiny
            assert abs(g.mean() - q[s, a]) <= 4 * se + 1e-4

    def test_horizon_formula(self):
        H = mc_horizon(0.9)
        assert 0.9 ** H / 0.1 <= 1e-4 < 0.9 ** (H - 1) / 0.1

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            exact_q(build_counterexample(), np.full((3, 2), 0.5))

    def test_aggregate_uses_initial(self):
        mdp = build_counterexample()
        pi = Policy.uniform(4, 2)
        v = exact_v(mdp, pi, initial=[1, 0, 0, 0])
        assert v.aggregate == v.values[0]
        assert exact_v(mdp, pi).aggregate == pytest.approx(v.values.mean())


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 0.99))
def test_q_range_and_v_hull(seed, gamma):
    rng = np.random.default_rng(seed)
    mdp = build_random_ergodic(4, 3, gamma, 0.01, rng)
    pi = random_policy(rng, 4, 3)
    q = exact_q(mdp, pi)
    v = exact_v(mdp, pi).values
    tol = 1e-9 * mdp.q_max
    assert q.min() >= -tol and q.max() <= mdp.q_max + tol
    assert np.all(v >= q.min(axis=1) - tol) and np.all(v <= q.max(axis=1) + tol)


class TestVisitation:
    def test_zero_discount(self):
        mdp = rand_mdp(3, gamma=1e-12)
        p0 = np.array([0.1, 0.2, 0.3, 0.4, 0.0])
        np.testing.assert_allclose(discounted_visitation(mdp, Policy.uniform(5, 2), p0), p0,
                                   atol=1e-10)

    def test_first_term_floor_and_series(self):
        mdp = rand_mdp(4, nS=2)
        pi = random_policy(np.random.default_rng(0), 2, 2)
        p0 = np.array([0.7, 0.3])
        d = discounted_visitation(mdp, pi, p0)
        assert np.all(d >= 0.1 * p0 - 1e-15)
        P_pi = induced_kernel(mdp, pi).matrix
        np.testing.assert_allclose(d, visitation_series(P_pi, p0, 0.9), atol=1e-12)


class TestOptimal:
    def test_counterexample(self):
        pi, v = solve_optimal(build_counterexample(0.95))
        assert pi.probs[0].argmax() == 1
        np.testing.assert_allclose(v.values, V_STAR_COUNTEREXAMPLE, atol=1e-9)

    def test_single_action(self):
        mdp = rand_mdp(5, nA=1)
        pi, v = solve_optimal(mdp)
        np.testing.assert_allclose(v.values, exact_v(mdp, np.ones((5, 1))).values)

    @pytest.mark.parametrize("seed", range(10))
    def test_brute_force(self, seed):
        mdp = rand_mdp(seed, nS=4)
        best, _ = brute_force_optimal(mdp.transition, mdp.reward, mdp.gamma)
        pi, v = solve_optimal(mdp)
        np.testing.assert_allclose(v.values, best, atol=1e-9)
        np.testing.assert_allclose(v.values, value_iteration(mdp.transition, mdp.reward, 0.9),
                                   atol=1e-9)
        assert bellman_optimality_residual(mdp, v.values) < 1e-9

    def test_greedy_ties_lowest_index(self):
        assert greedy_actions(np.array([[1.0, 1.0, 0.0], [0.0, 2.0, 2.0]])).tolist() == [0, 1]

    def test_tied_mdp(self):
        # identical actions everywhere: canonical choice is action 0
        P = np.repeat(rand_mdp(0).transition[:, :1], 2, axis=1)
        R = np.repeat(rand_mdp(0).reward[:, :1], 2, axis=1)
        pi, _ = solve_optimal(Mdp(P, R, 0.9))
        assert pi.probs.argmax(axis=1).tolist() == [0] * 5


class TestInstruments:
    def test_scalar_case(self):
        mdp = Mdp(np.ones((1, 1, 1)), np.ones((1, 1)), 0.7)
        inst = build_gamma_instruments(mdp, np.ones((1, 1)))
        np.testing.assert_allclose(inst.a_bar, [[0.7 - 1.0]])
        np.testing.assert_allclose(inst.mu, [1.0])

    def test_a_bar_enumeration(self):
        rng = np.random.default_rng(8)
        for seed in range(5):
            mdp = rand_mdp(seed, nS=3, nA=2)
            pi = random_policy(rng, 3, 2)
            inst = build_gamma_instruments(mdp, pi)
            np.testing.assert_allclose(inst.a_bar,
                                       a_bar_enumerated(mdp.transition, pi, 0.9, inst.mu),
                                       atol=1e-12)
            assert np.linalg.norm(inst.a_bar, 2) <= np.sqrt(2)

    def test_td_matrix_and_reward(self):
        mdp = build_counterexample()
        o = StateActionTuple(0, 0, 1, 1)
        A = td_matrix(mdp, o)
        assert A[0, 0] == -1.0 and A[0, 3] == 0.95
        assert np.count_nonzero(A) == 2
        same = td_matrix(mdp, StateActionTuple(2, 1, 2, 1))
        assert same[5, 5] == pytest.approx(0.95 - 1.0)
        r = reward_vector(mdp, o)
        assert np.count_nonzero(r) == 1 and r[0] == 0.1

    def test_gamma_zero_theta(self):
        mdp = rand_mdp(1, nS=3)
        pi = random_policy(np.random.default_rng(0), 3, 2)
        inst = build_gamma_instruments(mdp, pi)
        assert gamma_value(inst, exact_q(mdp, pi), np.zeros(6), StateActionTuple(0, 1, 2, 0)) == 0

    def test_gamma_linear_term(self):
        mdp = rand_mdp(2, nS=3)
        pi = random_policy(np.random.default_rng(0), 3, 2)
        inst = build_gamma_instruments(mdp, pi)
        q = exact_q(mdp, pi)
        o = StateActionTuple(1, 0, 2, 1)
        theta = np.zeros(6)
        theta[2] = 1.0
        quad = theta @ ((td_matrix(mdp, o) - inst.a_bar) @ theta)
        linear = gamma_value(inst, q, theta, o) - quad
        td_residual = mdp.reward[1, 0] + 0.9 * q[2, 1] - q[1, 0]
        assert linear == pytest.approx(td_residual, abs=1e-12)

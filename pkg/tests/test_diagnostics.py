import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nac2ts import diagnostics as dg
from nac2ts.errors import DomainError, ErgodicityError
from nac2ts.exact import build_gamma_instruments, exact_q
from nac2ts.mdp_core import (Mdp, Policy, TransitionKernel, build_counterexample,
                             build_random_ergodic, induced_kernel, mix_epsilon_greedy,
                             softmax_rows)
from nac2ts.nac import RunTrace, Schedule, Snapshot, eps_before, log_checkpoints, preset, run

# fitted on the counterexample's uniform-policy chain, tau_max = 200
COUNTEREXAMPLE_MIXING = (500747.14555124607, 0.0005000017372191463)


def rand_mdp(seed, nS=4, nA=2, gamma=0.9):
    return build_random_ergodic(nS, nA, gamma, 0.01, np.random.default_rng(seed))


def short_trace(sched, T=3000, seed=0, mdp=None):
    mdp = build_counterexample() if mdp is None else mdp
    return run(mdp, sched, T, seed=seed, checkpoints=log_checkpoints(T, 32), metrics=False).trace


class TestResult:
    def test_tolerance_and_merge(self):
        r = dg.LemmaCheckResult("x")
        r.add(1.0, 1.0 + 1e-12)
        r.add(1.0, 0.5)
        assert r.violations == 0 and r.instances_checked == 2
        r.add(1.0, 1.1)
        assert r.violations == 1 and r.worst_margin == pytest.approx(-0.1)
        m = r.merge(dg.LemmaCheckResult("x", 3, 0, 2.0))
        assert (m.instances_checked, m.violations) == (6, 1)
        assert set(m.to_dict()) == {"lemma_id", "instances", "violations", "worst_margin"}


class TestConstants:
    def test_values(self):
        mdp = rand_mdp(0, gamma=0.9)
        c = dg.constants_report(mdp, preset("corollary_1_1"))
        assert c.q_max == pytest.approx(10.0) and c.delta_q == pytest.approx(21.0)
        assert c.l1 == pytest.approx(28.284, abs=1e-3)
        assert c.l2 == pytest.approx(720.0)
        assert c.l3 == 0.0

    def test_l3_positive_with_decay(self):
        mdp = rand_mdp(0)
        c = dg.constants_report(mdp, preset("corollary_1_2"))
        assert c.l3 == pytest.approx(math.sqrt(4) * (1 / math.sqrt(2) + 1) / 6)


class TestMixing:
    def test_rank_one(self):
        est = dg.estimate_mixing(np.array([[0.7, 0.3], [0.7, 0.3]]))
        assert est.tv_curve[0][1] == 0.0
        assert est.rho == 1e-6

    def test_two_state_rho(self):
        est = dg.estimate_mixing(np.array([[0.7, 0.3], [0.6, 0.4]]))
        assert abs(est.rho - 0.1) < 1e-3
        assert np.all(est.bound([t for t, _ in est.tv_curve]) >= [v for _, v in est.tv_curve])

    def test_counterexample_baseline(self):
        K = induced_kernel(build_counterexample(), Policy.uniform(4, 2))
        est = dg.estimate_mixing(K)
        assert est.rho < 1
        assert est.m == pytest.approx(COUNTEREXAMPLE_MIXING[0], rel=1e-6)
        assert est.rho == pytest.approx(COUNTEREXAMPLE_MIXING[1], rel=1e-6)

    def test_reducible_rejected(self):
        with pytest.raises(ErgodicityError):
            dg.estimate_mixing(TransitionKernel(np.eye(2)))

    def test_check_mixing_random(self):
        rng = np.random.default_rng(0)
        kernels = [induced_kernel(rand_mdp(s), rng.dirichlet([1, 1], size=4)) for s in range(5)]
        assert dg.check_mixing(kernels, 100).passed


class TestNegativeDrift:
    def test_zero_theta(self):
        r = dg.check_negative_drift(rand_mdp(0), Policy.uniform(4, 2), 0.5, np.zeros((1, 8)),
                                    np.random.default_rng(0))
        assert r.worst_margin == 0.0 and r.passed

    def test_scalar_equality(self):
        mdp = Mdp(np.ones((1, 1, 1)), np.ones((1, 1)), 0.6)
        r = dg.check_negative_drift(mdp, np.ones((1, 1)), 1.0, np.array([[2.0]]),
                                    np.random.default_rng(0))
        assert r.worst_margin == pytest.approx(0.0, abs=1e-15)

    def test_random_draws(self):
        rng = np.random.default_rng(1)
        total = dg.LemmaCheckResult(dg.ID_NEGATIVE_DRIFT)
        for k in range(100):
            mdp = rand_mdp(k)
            total = total.merge(dg.check_negative_drift(
                mdp, rng.dirichlet([1, 1], size=4), rng.uniform(0.01, 1), 1, rng))
        assert total.instances_checked == 100 and total.passed

    def test_needs_positive_eps(self):
        with pytest.raises(DomainError):
            dg.check_negative_drift(rand_mdp(0), Policy.uniform(4, 2), 0.0, 1,
                                    np.random.default_rng(0))


class TestStaticChecks:
    def test_lipschitz_identical(self):
        pi = Policy.uniform(4, 2)
        r = dg.check_q_lipschitz(rand_mdp(0), 0, None, pairs=[(pi, pi)])
        assert r.worst_margin == 0.0

    def test_lipschitz_random(self):
        rng = np.random.default_rng(2)
        for k in range(5):
            assert dg.check_q_lipschitz(rand_mdp(k, nS=5), 20, rng).passed

    def test_bounds(self):
        mdp = build_counterexample()
        tr = short_trace(preset("corollary_1_1"))
        assert dg.check_bounds(mdp, 50, np.random.default_rng(0), [tr]).passed

    def test_performance_difference(self):
        rng = np.random.default_rng(3)
        r = dg.check_performance_difference(rand_mdp(1), 50, rng)
        assert r.passed and r.instances_checked == 50

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(0.05, 1.0))
    def test_gamma_mean_zero(self, seed, eps):
        rng = np.random.default_rng(seed)
        mdp = build_random_ergodic(3, 2, 0.9, 0.01, rng)
        pi_hat = mix_epsilon_greedy(rng.dirichlet([1, 1], size=3), eps)
        assert abs(dg.stationary_gamma_mean(mdp, pi_hat, rng.standard_normal(6))) <= 1e-10

    def test_gamma_mean_suite(self):
        rng = np.random.default_rng(4)
        inst = [(rand_mdp(k), mix_epsilon_greedy(rng.dirichlet([1, 1], size=4), 0.3))
                for k in range(20)]
        assert dg.check_gamma_mean(inst, rng).passed


def fake_trace(mdp, sched, t, q_row_lo, q_row_hi):
    """Two consecutive snapshots around one actor step with an adversarial Q."""
    z = np.zeros((mdp.n_states, mdp.n_actions))
    z[:, 1] = 30.0  # near-deterministic on the action Q will push away from
    q = np.tile([q_row_hi, q_row_lo], (mdp.n_states, 1))
    beta_t = sched.beta / (t + 1) ** sched.sigma
    snaps = {}
    for k, zz in ((t, z), (t + 1, z + beta_t * q)):
        pi = softmax_rows(zz)
        snaps[k] = Snapshot(k, pi, mix_epsilon_greedy(pi, eps_before(sched, k)).probs, q)
    return RunTrace(mdp, sched, 0, (0, 1), [], snaps)


class TestRunChecks:
    def test_frozen_actor_policy_drift(self):
        sched = Schedule(beta=0.0, sigma=0.0, xi=0.0, strict=False)
        r = dg.check_policy_drift(short_trace(sched))
        assert r.passed and r.instances_checked > 0

    @pytest.mark.parametrize("name", ["corollary_1_1", "corollary_1_2"])
    def test_policy_drift_run(self, name):
        tr = short_trace(preset(name))
        r = dg.check_policy_drift(tr)
        assert r.passed
        first = min(t for t in dg._pairs(tr, 1))
        snaps = tr.snapshots
        gap = np.linalg.norm(snaps[first + 1].sampling_policy - snaps[first].sampling_policy)
        assert dg.policy_drift_bound(tr, first) - gap >= 0

    def test_policy_drift_adversarial(self):
        mdp = build_counterexample()
        sched = preset("corollary_1_2", beta=1.0)
        for t in (1, 2, 10):
            tr = fake_trace(mdp, sched, t, 0.0, mdp.q_max)
            assert dg.check_policy_drift(tr).passed

    def test_composition(self):
        tr = short_trace(preset("corollary_1_2"))
        c = dg.constants_report(tr.mdp, tr.schedule)
        for t in dg._pairs(tr, 1):
            direct = c.l2 * (c.l3 * eps_before(tr.schedule, t) / t
                             + c.l1 * tr.schedule.beta / (t + 1) ** tr.schedule.sigma)
            assert c.l2 * dg.policy_drift_bound(tr, t) == pytest.approx(direct, rel=1e-12)

    def test_q_drift_identical(self):
        sched = Schedule(beta=0.0, sigma=0.0, strict=False)
        r = dg.check_q_function_drift(short_trace(sched))
        assert r.passed

    @pytest.mark.parametrize("name", ["corollary_1_1", "corollary_1_2"])
    def test_run_checks(self, name):
        tr = short_trace(preset(name), seed=3)
        for fn in (dg.check_q_function_drift, dg.check_theta_drift, dg.check_critic_drift):
            r = fn(tr)
            assert r.passed and r.instances_checked > 0

    def test_frozen_theta(self):
        sched = Schedule(alpha=0.0, beta=0.0, sigma=0.0, nu=0.0, xi=0.0, strict=False)
        tr = short_trace(sched)
        snaps = tr.snapshots
        for t in dg._pairs(tr, 2):
            if t - 1 in snaps:
                th = snaps[t].q - exact_q(tr.mdp, snaps[t - 1].sampling_policy)
                th2 = snaps[t + 1].q - exact_q(tr.mdp, snaps[t].sampling_policy)
                assert np.linalg.norm(th2 - th) == 0.0
        assert dg.check_theta_drift(tr).passed

    def test_critic_step_recomputed(self):
        tr = short_trace(preset("corollary_1_1"), T=500)
        snaps = tr.snapshots
        c = dg.constants_report(tr.mdp, tr.schedule)
        for t in dg._pairs(tr, 0):
            step = np.abs(snaps[t + 1].q - snaps[t].q)
            assert np.count_nonzero(step) <= 1
            assert step.max() <= tr.schedule.alpha / (t + 1) ** 0.5 * c.delta_q


class TestKl:
    def test_identical(self):
        pi = np.array([[0.3, 0.7], [1.0, 0.0]])
        assert dg.kl_potential(pi, pi, [0.5, 0.5]) == 0.0

    def test_uniform_vs_deterministic(self):
        ps = Policy.deterministic([0, 1, 2], 3)
        assert dg.kl_potential(Policy.uniform(3, 3), ps, np.ones(3) / 3) == pytest.approx(np.log(3))

    def test_hand_value(self):
        v = dg.kl_potential(np.array([[0.75, 0.25]]), np.array([[1.0, 0.0]]), [1.0])
        assert v == pytest.approx(np.log(4 / 3))

    def test_zero_support(self):
        with pytest.raises(DomainError):
            dg.kl_potential(np.array([[0.0, 1.0]]), np.array([[1.0, 0.0]]), [1.0])


def test_stationary_drift_matrix_enumerated():
    # A_bar via the instruments agrees with the direct quadratic form bound
    mdp = rand_mdp(5)
    pi_hat = mix_epsilon_greedy(Policy.uniform(4, 2), 0.2)
    inst = build_gamma_instruments(mdp, pi_hat)
    th = np.random.default_rng(0).standard_normal(8)
    assert th @ inst.a_bar @ th <= -(1 - mdp.gamma) * inst.weights.min() * th @ th + 1e-12

"""Ground-truth solvers for finite discounted MDPs.

Policy evaluation is a dense linear solve over the |S||A| state-action space.
The same state-action transition matrix drives the analysis instruments used
by the diagnostics: the per-transition TD matrix A(O), the one-hot reward
r(O), their stationary expectation A_bar, and the scalar Gamma.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, SolverError
from .mdp_core import (Mdp, Policy, StateActionTuple, as_probs, induced_kernel,
                       stationary_distribution)

RESIDUAL_TOL = 1e-10


def _policy_probs(mdp: Mdp, pi) -> np.ndarray:
    probs = as_probs(pi)
    if probs.shape != (mdp.n_states, mdp.n_actions):
        raise ShapeError(f"policy shape {probs.shape} does not match MDP "
                         f"({mdp.n_states}, {mdp.n_actions})")
    return probs


def _initial(mdp: Mdp, initial) -> np.ndarray:
    if initial is None:
        return np.full(mdp.n_states, 1.0 / mdp.n_states)
    p0 = np.asarray(initial, dtype=float)
    if p0.shape != (mdp.n_states,) or p0.min() < 0 or abs(p0.sum() - 1) > 1e-9:
        raise ShapeError("initial must be a distribution over states")
    return p0


def state_action_kernel(mdp: Mdp, pi) -> np.ndarray:
    """Matrix mapping (s,a) -> (s',a') with probability P(s'|s,a) pi(a'|s')."""
    probs = _policy_probs(mdp, pi)
    n = mdp.n_states * mdp.n_actions
    return np.einsum("sat,tb->satb", mdp.transition, probs).reshape(n, n)


def _solve(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    try:
        x = np.linalg.solve(A, b)
    except np.linalg.LinAlgError as exc:
        raise SolverError(f"linear solve failed: {exc}") from None
    resid = np.max(np.abs(A @ x - b))
    if not np.isfinite(resid) or resid > RESIDUAL_TOL * max(1.0, np.max(np.abs(x))):
        raise SolverError(f"linear solve residual {resid:.3g} above tolerance")
    return x


def exact_q(mdp: Mdp, pi) -> np.ndarray:
    """Q^pi as an (S, A) table, from ``(I - gamma P Pi) Q = R``."""
    n = mdp.n_states * mdp.n_actions
    M = np.eye(n) - mdp.gamma * state_action_kernel(mdp, pi)
    return _solve(M, mdp.reward.reshape(n)).reshape(mdp.n_states, mdp.n_actions)


@dataclass(frozen=True, eq=False)
class ValueTable:
    values: np.ndarray
    aggregate: float


def exact_v(mdp: Mdp, pi, initial=None) -> ValueTable:
    """Per-state V^pi and its average under ``initial`` (uniform by default)."""
    probs = _policy_probs(mdp, pi)
    v = (probs * exact_q(mdp, probs)).sum(axis=1)
    return ValueTable(v, float(_initial(mdp, initial) @ v))


def discounted_visitation(mdp: Mdp, pi, initial=None) -> np.ndarray:
    """d^pi solving ``d = (1 - gamma) p0 + gamma P^pi^T d``."""
    P = induced_kernel(mdp, pi).matrix
    p0 = _initial(mdp, initial)
    d = _solve(np.eye(mdp.n_states) - mdp.gamma * P.T, (1.0 - mdp.gamma) * p0)
    d = np.clip(d, 0.0, None)
    return d / d.sum()


def greedy_actions(q: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Row-wise argmax, lowest index among near-ties."""
    best = q.max(axis=1, keepdims=True)
    return np.argmax(q >= best - tol * np.maximum(1.0, np.abs(best)), axis=1)


def bellman_optimality_residual(mdp: Mdp, v: np.ndarray) -> float:
    backup = mdp.reward + mdp.gamma * mdp.transition @ v
    return float(np.max(np.abs(backup.max(axis=1) - v)))


def solve_optimal(mdp: Mdp, initial=None) -> tuple[Policy, ValueTable]:
    """Policy iteration from the all-zeros action choice until greedy-stable."""
    actions = np.zeros(mdp.n_states, dtype=int)
    budget = mdp.n_actions ** min(mdp.n_states, 60) + 1
    for _ in range(int(min(budget, 10**7))):
        pi = Policy.deterministic(actions, mdp.n_actions)
        q = exact_q(mdp, pi)
        nxt = greedy_actions(q)
        # keep the incumbent action when it is already (near-)greedy
        cur = q[np.arange(mdp.n_states), actions]
        keep = cur >= q.max(axis=1) - 1e-12 * np.maximum(1.0, np.abs(cur))
        nxt = np.where(keep, actions, nxt)
        if np.array_equal(nxt, actions):
            break
        actions = nxt
    else:
        raise SolverError("policy iteration did not converge")
    # canonical tie-break once stable
    actions = greedy_actions(q)
    pi = Policy.deterministic(actions, mdp.n_actions)
    value = exact_v(mdp, pi, initial)
    resid = bellman_optimality_residual(mdp, value.values)
    if resid > RESIDUAL_TOL * max(1.0, mdp.q_max):
        raise SolverError(f"Bellman optimality residual {resid:.3g} above tolerance")
    return pi, value


def flat_index(mdp: Mdp, s: int, a: int) -> int:
    return s * mdp.n_actions + a


def td_matrix(mdp: Mdp, o: StateActionTuple) -> np.ndarray:
    """A(O): the TD update written as ``Q <- Q + alpha (r(O) + A(O) Q)``."""
    n = mdp.n_states * mdp.n_actions
    A = np.zeros((n, n))
    i = flat_index(mdp, o.s, o.a)
    j = flat_index(mdp, o.s_next, o.a_next)
    A[i, i] -= 1.0
    A[i, j] += mdp.gamma
    return A


def reward_vector(mdp: Mdp, o: StateActionTuple) -> np.ndarray:
    r = np.zeros(mdp.n_states * mdp.n_actions)
    r[flat_index(mdp, o.s, o.a)] = mdp.reward[o.s, o.a]
    return r


@dataclass(frozen=True, eq=False)
class GammaInstruments:
    """Stationary TD matrix A_bar for a fixed policy, plus A(O)/r(O) builders."""

    mdp: Mdp
    probs: np.ndarray
    mu: np.ndarray
    a_bar: np.ndarray

    def a_matrix(self, o: StateActionTuple) -> np.ndarray:
        return td_matrix(self.mdp, o)

    def r_vector(self, o: StateActionTuple) -> np.ndarray:
        return reward_vector(self.mdp, o)

    @property
    def weights(self) -> np.ndarray:
        """Stationary state-action mass mu(s) pi(a|s), flattened."""
        return (self.mu[:, None] * self.probs).reshape(-1)


def build_gamma_instruments(mdp: Mdp, pi) -> GammaInstruments:
    """A_bar = M (gamma P Pi - I), M = diag(mu(s) pi(a|s)); needs an ergodic chain."""
    probs = _policy_probs(mdp, pi)
    mu = stationary_distribution(induced_kernel(mdp, probs))
    w = (mu[:, None] * probs).reshape(-1)
    n = w.size
    a_bar = w[:, None] * (mdp.gamma * state_action_kernel(mdp, probs) - np.eye(n))
    return GammaInstruments(mdp, probs, mu, a_bar)


def gamma_value(inst: GammaInstruments, q_pi: np.ndarray, theta: np.ndarray,
                o: StateActionTuple) -> float:
    """Gamma(pi, theta, O) = theta.(r(O) + A(O) Q^pi) + theta.(A(O) - A_bar) theta."""
    q = np.asarray(q_pi, dtype=float).reshape(-1)
    th = np.asarray(theta, dtype=float).reshape(-1)
    if q.size != inst.a_bar.shape[0] or th.size != q.size:
        raise ShapeError("theta and Q must have |S||A| entries")
    A = inst.a_matrix(o)
    return float(th @ (inst.r_vector(o) + A @ q) + th @ ((A - inst.a_bar) @ th))

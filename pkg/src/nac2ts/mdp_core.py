"""Finite MDPs, tabular policies, trajectory sampling and induced-chain analysis.

States and actions are 0-based integers. Tables are numpy arrays laid out as
``transition[s, a, s']``, ``reward[s, a]`` and ``probs[s, a]``; a state-action
pair flattens to index ``s * n_actions + a``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import reduce
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import DomainError, ErgodicityError, InvariantError, ShapeError

PROB_TOL = 1e-12
RENORM_TOL = 1e-9


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


def _check_rows(rows: np.ndarray, what: str) -> np.ndarray:
    """Renormalize near-stochastic rows along the last axis, reject the rest."""
    if not np.all(np.isfinite(rows)):
        raise InvariantError(f"{what} contains non-finite entries")
    if np.any(rows < 0):
        raise InvariantError(f"{what} has negative entries")
    sums = rows.sum(axis=-1, keepdims=True)
    dev = np.max(np.abs(sums - 1.0))
    if dev > RENORM_TOL:
        raise InvariantError(f"{what} rows must sum to 1 (max deviation {dev:.3g})")
    if dev > PROB_TOL:
        rows = rows / sums
    return rows


@dataclass(frozen=True, eq=False)
class Mdp:
    """Discounted MDP with rewards in [0, 1]."""

    transition: np.ndarray
    reward: np.ndarray
    gamma: float

    def __post_init__(self):
        P = np.array(self.transition, dtype=float)
        R = np.array(self.reward, dtype=float)
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise ShapeError(f"transition must have shape (S, A, S), got {P.shape}")
        if R.shape != P.shape[:2]:
            raise ShapeError(f"reward shape {R.shape} does not match transition {P.shape}")
        if P.shape[0] < 1 or P.shape[1] < 1:
            raise ShapeError("an MDP needs at least one state and one action")
        P = _check_rows(P, "transition")
        if not np.all(np.isfinite(R)) or R.min() < 0.0 or R.max() > 1.0:
            raise InvariantError("rewards must lie in [0, 1]")
        gamma = float(self.gamma)
        if not 0.0 < gamma < 1.0:
            raise InvariantError(f"gamma must lie in (0, 1), got {gamma}")
        object.__setattr__(self, "transition", _readonly(P))
        object.__setattr__(self, "reward", _readonly(R))
        object.__setattr__(self, "gamma", gamma)

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    @property
    def q_max(self) -> float:
        return 1.0 / (1.0 - self.gamma)

    def with_gamma(self, gamma: float) -> "Mdp":
        return Mdp(self.transition, self.reward, gamma)


@dataclass(frozen=True, eq=False)
class Policy:
    """Tabular stochastic policy ``probs[s, a] = pi(a|s)``."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.array(self.probs, dtype=float)
        if p.ndim != 2:
            raise ShapeError(f"policy table must be 2-D, got shape {p.shape}")
        object.__setattr__(self, "probs", _readonly(_check_rows(p, "policy")))

    @property
    def shape(self) -> tuple[int, int]:
        return self.probs.shape

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> "Policy":
        return cls(np.full((n_states, n_actions), 1.0 / n_actions))

    @classmethod
    def deterministic(cls, actions, n_actions: int) -> "Policy":
        actions = np.asarray(actions, dtype=int)
        probs = np.zeros((actions.size, n_actions))
        probs[np.arange(actions.size), actions] = 1.0
        return cls(probs)


def as_probs(pi) -> np.ndarray:
    """Probability table of a Policy, or of a raw array (validated)."""
    if isinstance(pi, Policy):
        return pi.probs
    return Policy(pi).probs


def softmax_rows(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


@dataclass(frozen=True, eq=False)
class PolicyLogits:
    """Accumulated actor logits; the policy is their row-wise softmax."""

    logits: np.ndarray

    def __post_init__(self):
        z = np.array(self.logits, dtype=float)
        if z.ndim != 2:
            raise ShapeError(f"logits must be 2-D, got shape {z.shape}")
        if not np.all(np.isfinite(z)):
            raise InvariantError("logits must be finite")
        object.__setattr__(self, "logits", _readonly(z))

    @classmethod
    def zeros(cls, n_states: int, n_actions: int) -> "PolicyLogits":
        return cls(np.zeros((n_states, n_actions)))

    def policy(self) -> Policy:
        return Policy(softmax_rows(self.logits))


@dataclass(frozen=True, eq=False)
class TransitionKernel:
    """Row-stochastic state-to-state matrix."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ShapeError(f"kernel must be square, got shape {m.shape}")
        object.__setattr__(self, "matrix", _readonly(_check_rows(m, "kernel")))

    @property
    def n(self) -> int:
        return self.matrix.shape[0]


class StateActionTuple(NamedTuple):
    s: int
    a: int
    s_next: int
    a_next: int


def mix_epsilon_greedy(pi, eps: float) -> Policy:
    """Mix a policy with the uniform distribution: ``eps/|A| + (1 - eps) * pi``."""
    if not 0.0 <= eps <= 1.0:
        raise DomainError(f"eps must lie in [0, 1], got {eps}")
    probs = as_probs(pi)
    return Policy(eps / probs.shape[1] + (1.0 - eps) * probs)


def induced_kernel(mdp: Mdp, pi) -> TransitionKernel:
    """State chain ``P^pi(s'|s) = sum_a P(s'|s,a) pi(a|s)``."""
    probs = as_probs(pi)
    if probs.shape != (mdp.n_states, mdp.n_actions):
        raise ShapeError(f"policy shape {probs.shape} does not match MDP "
                         f"({mdp.n_states}, {mdp.n_actions})")
    return TransitionKernel(np.einsum("sa,sat->st", probs, mdp.transition))


def _as_matrix(kernel) -> np.ndarray:
    if isinstance(kernel, TransitionKernel):
        return kernel.matrix
    return TransitionKernel(kernel).matrix


def _reachable(adj: np.ndarray, start: int) -> np.ndarray:
    seen = np.zeros(adj.shape[0], dtype=bool)
    seen[start] = True
    stack = [start]
    while stack:
        u = stack.pop()
        for v in np.flatnonzero(adj[u] & ~seen):
            seen[v] = True
            stack.append(v)
    return seen


def chain_period(kernel) -> int:
    """Period of an irreducible chain from BFS levels on the support graph.

    Raises ErgodicityError if the chain is reducible.
    """
    adj = _as_matrix(kernel) > 0
    if not (_reachable(adj, 0).all() and _reachable(adj.T, 0).all()):
        raise ErgodicityError("induced chain is reducible")
    n = adj.shape[0]
    level = np.full(n, -1)
    level[0] = 0
    frontier = [0]
    while frontier:
        nxt = []
        for u in frontier:
            for v in np.flatnonzero(adj[u]):
                if level[v] < 0:
                    level[v] = level[u] + 1
                    nxt.append(v)
        frontier = nxt
    us, vs = np.nonzero(adj)
    return reduce(math.gcd, (int(d) for d in level[us] + 1 - level[vs]), 0)


def check_ergodic(kernel) -> None:
    """Raise ErgodicityError unless the chain is irreducible and aperiodic."""
    d = chain_period(kernel)
    if d != 1:
        raise ErgodicityError(f"induced chain is periodic with period {d}")


def is_ergodic(kernel) -> bool:
    try:
        check_ergodic(kernel)
    except ErgodicityError:
        return False
    return True


def stationary_distribution(kernel, tol: float = 1e-10) -> np.ndarray:
    """Stationary distribution of an ergodic chain.

    Solves ``(P^T - I) mu = 0`` with the normalization row appended; falls back
    to power iteration when that system is ill-conditioned.
    """
    P = _as_matrix(kernel)
    check_ergodic(P)
    n = P.shape[0]
    A = np.vstack([P.T - np.eye(n), np.ones((1, n))])
    b = np.zeros(n + 1)
    b[-1] = 1.0
    if np.linalg.cond(A) < 1e12:
        mu = np.linalg.lstsq(A, b, rcond=None)[0]
    else:
        mu = np.full(n, 1.0 / n)
        for _ in range(1_000_000):
            nxt = mu @ P
            if np.abs(nxt - mu).sum() <= tol * 1e-2:
                mu = nxt
                break
            mu = nxt
    mu = np.clip(mu, 0.0, None)
    mu /= mu.sum()
    if np.abs(mu @ P - mu).sum() > tol or mu.min() <= 0:
        raise ErgodicityError("stationary distribution did not reach tolerance")
    return mu


def categorical(cdf: np.ndarray, u: float) -> int:
    """Inverse-CDF draw: first index whose cumulative mass exceeds ``u``."""
    i = int(np.searchsorted(cdf, u, side="right"))
    if i >= cdf.size:
        # u landed above a cumulative sum that rounded below 1
        i = int(np.flatnonzero(np.diff(cdf, prepend=0.0) > 0)[-1])
    return i


def sample_step(mdp: Mdp, s: int, a: int, pi_hat, rng: np.random.Generator) -> StateActionTuple:
    """Draw ``s' ~ P(.|s,a)`` then ``a' ~ pi_hat(.|s')``, one uniform each."""
    probs = as_probs(pi_hat)
    if not (0 <= s < mdp.n_states and 0 <= a < mdp.n_actions):
        raise IndexError(f"state-action ({s}, {a}) out of range")
    s_next = categorical(np.cumsum(mdp.transition[s, a]), rng.random())
    a_next = categorical(np.cumsum(probs[s_next]), rng.random())
    return StateActionTuple(int(s), int(a), s_next, a_next)


def build_counterexample(gamma: float = 0.95) -> Mdp:
    """Four-state, two-action MDP where an unexplored action is optimal.

    State ``i`` here is s_{i+1}; action 0 is a_1, action 1 is a_2. Playing a_2
    from s_1 climbs to s_4, whose a_1 reward of 1 dominates the 0.1 on offer
    at s_1.
    """
    P = np.zeros((4, 2, 4))
    for i in range(3):
        P[i, 0, 0] = 0.999
        P[i, 0, i + 1] = 0.001
    P[3, 0, 3] = 0.999
    P[3, 0, 0] = 0.001
    P[0, 1, 1] = 1.0
    for i in (1, 2):
        P[i, 1, 0] = 0.001
        P[i, 1, i + 1] = 0.999
    P[3, 1, 3] = 0.001
    P[3, 1, 0] = 0.999
    R = np.zeros((4, 2))
    R[0, 0] = 0.1
    R[3, 0] = 1.0
    return Mdp(P, R, gamma)


def build_random_ergodic(n_states: int, n_actions: int, gamma: float,
                         smoothing: float, rng: np.random.Generator) -> Mdp:
    """Random MDP whose transition entries are all positive.

    Each row is a flat Dirichlet draw, floored at ``smoothing`` and renormalized,
    so every policy induces an ergodic chain. Rewards are uniform on [0, 1].
    """
    if not smoothing > 0:
        raise DomainError(f"smoothing must be positive, got {smoothing}")
    if smoothing * n_states >= 1:
        raise DomainError(f"smoothing * n_states must be < 1, got {smoothing * n_states}")
    P = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    P = np.maximum(P, smoothing)
    P /= P.sum(axis=2, keepdims=True)
    R = rng.uniform(0.0, 1.0, size=(n_states, n_actions))
    return Mdp(P, R, gamma)


def mdp_to_dict(mdp: Mdp) -> dict:
    return {
        "n_states": mdp.n_states,
        "n_actions": mdp.n_actions,
        "gamma": mdp.gamma,
        "transition": mdp.transition.tolist(),
        "reward": mdp.reward.tolist(),
    }


def mdp_from_dict(doc: dict) -> Mdp:
    try:
        mdp = Mdp(np.asarray(doc["transition"], dtype=float),
                  np.asarray(doc["reward"], dtype=float), doc["gamma"])
    except KeyError as exc:
        raise InvariantError(f"MDP document missing field {exc.args[0]!r}") from None
    if (doc.get("n_states", mdp.n_states), doc.get("n_actions", mdp.n_actions)) \
            != (mdp.n_states, mdp.n_actions):
        raise ShapeError("n_states/n_actions disagree with the arrays")
    return mdp


def save_mdp(mdp: Mdp, path) -> None:
    Path(path).write_text(json.dumps(mdp_to_dict(mdp), indent=2))


def load_mdp(path) -> Mdp:
    return mdp_from_dict(json.loads(Path(path).read_text()))

"""Single-trajectory two-time-scale natural actor-critic with epsilon-greedy mixing.

Iteration ``t`` of the loop, starting from ``(S_t, A_t)``, critic ``Q_t`` and
actor logits ``z_t``:

1. ``S_{t+1} ~ P(.|S_t, A_t)`` and ``A_{t+1} ~ pi_hat_t(.|S_{t+1})``, where
   ``pi_hat_t = eps_{t-1}/|A| + (1 - eps_{t-1}) softmax(z_t)`` and ``eps_{-1} = 0``;
2. TD(0) on the visited entry only:
   ``Q_{t+1}(S_t,A_t) = Q_t(S_t,A_t) + alpha_t [R + gamma Q_t(S_{t+1},A_{t+1}) - Q_t(S_t,A_t)]``;
3. natural policy gradient on every entry: ``z_{t+1} = z_t + beta_t Q_{t+1}``.

The actor keeps logits rather than probabilities so that actions whose mass
decays geometrically do not underflow to an unrecoverable zero.

The hot loop is compiled with numba. It consumes uniforms pre-drawn from a
numpy Generator, two per iteration, so its streams match the pure-Python
``step`` reference bit for bit.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numba
import numpy as np

from .errors import ConfigError, DomainError, ShapeError
from .exact import discounted_visitation, exact_q, exact_v, solve_optimal
from .mdp_core import (Mdp, Policy, PolicyLogits, StateActionTuple, categorical,
                       mix_epsilon_greedy, sample_step, softmax_rows)


@dataclass(frozen=True)
class Schedule:
    """Step sizes ``alpha/(t+1)^nu``, ``beta/(t+1)^sigma``, ``eps/(t+1)^xi``.

    ``strict`` enforces ``0 <= xi < nu < sigma < 1``; ablations such as a frozen
    actor or no exploration turn it off.
    """

    alpha: float = 0.5
    beta: float = 0.5
    eps: float = 0.5
    nu: float = 0.5
    sigma: float = 0.75
    xi: float = 0.0
    strict: bool = True

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise DomainError(f"alpha base must lie in [0, 1], got {self.alpha}")
        if not 0.0 <= self.eps <= 1.0:
            raise DomainError(f"eps base must lie in [0, 1], got {self.eps}")
        if self.beta < 0:
            raise DomainError(f"beta base must be nonnegative, got {self.beta}")
        if min(self.nu, self.sigma, self.xi) < 0:
            raise DomainError("exponents must be nonnegative")
        if self.strict and not (0.0 <= self.xi < self.nu < self.sigma < 1.0):
            raise DomainError(
                f"need 0 <= xi < nu < sigma < 1, got xi={self.xi}, nu={self.nu}, sigma={self.sigma}")

    def as_array(self) -> np.ndarray:
        return np.array([self.alpha, self.nu, self.beta, self.sigma, self.eps, self.xi])


PRESETS = {
    "corollary_1_1": dict(nu=0.5, sigma=0.75, xi=0.0),
    "corollary_1_2": dict(nu=0.5, sigma=5.0 / 6.0, xi=1.0 / 6.0),
    "no_exploration": dict(nu=0.5, sigma=0.75, xi=0.0, eps=0.0, strict=False),
}


def preset(name: str, alpha: float = 0.5, beta: float = 0.5, eps: float = 0.5) -> Schedule:
    try:
        params = dict(PRESETS[name])
    except KeyError:
        raise ConfigError(f"unknown schedule preset {name!r}; "
                          f"choose from {sorted(PRESETS)}") from None
    params = {"alpha": alpha, "beta": beta, "eps": eps, **params}
    return Schedule(**params)


def schedule_at(sched: Schedule, t: int) -> tuple[float, float, float]:
    if t < 0:
        raise DomainError(f"t must be nonnegative, got {t}")
    k = t + 1.0
    return (sched.alpha / k ** sched.nu, sched.beta / k ** sched.sigma,
            sched.eps / k ** sched.xi)


def eps_before(sched: Schedule, t: int) -> float:
    """eps_{t-1}, with eps_{-1} = eps_{-2} = 0."""
    return 0.0 if t <= 0 else schedule_at(sched, t - 1)[2]


def betas(sched: Schedule, T: int) -> np.ndarray:
    return sched.beta / np.arange(1.0, T + 2.0) ** sched.sigma


def critic_update(q: np.ndarray, obs: StateActionTuple, reward: float,
                  alpha_t: float, gamma: float) -> np.ndarray:
    """Asynchronous TD(0): returns a new table with only ``(s, a)`` changed."""
    if not 0.0 <= reward <= 1.0:
        raise DomainError(f"reward must lie in [0, 1], got {reward}")
    out = np.array(q, dtype=float)
    s, a, s2, a2 = obs
    out[s, a] = q[s, a] + alpha_t * (reward + gamma * q[s2, a2] - q[s, a])
    return out


def actor_update(logits, q_next: np.ndarray, beta_t: float) -> PolicyLogits:
    """Multiplicative-weight step ``pi <- pi exp(beta Q) / Z`` in logit form."""
    z = logits.logits if isinstance(logits, PolicyLogits) else np.asarray(logits, float)
    if z.shape != np.shape(q_next):
        raise ShapeError(f"logits {z.shape} and Q {np.shape(q_next)} disagree")
    return PolicyLogits(z + beta_t * np.asarray(q_next, dtype=float))


def sample_output_index(weights, rng: np.random.Generator) -> int:
    """Draw ``i`` with probability ``weights[i] / sum(weights)``."""
    w = np.asarray(weights, dtype=float)
    if w.size == 0 or np.any(w < 0) or not w.sum() > 0:
        raise DomainError("output-index weights must be nonnegative and not all zero")
    cdf = np.cumsum(w)
    return categorical(cdf, rng.random() * cdf[-1])


@dataclass
class NacState:
    """Mutable loop state at the start of iteration ``t``."""

    mdp: Mdp
    schedule: Schedule
    t: int
    q: np.ndarray
    logits: np.ndarray
    current: tuple[int, int]
    rng: np.random.Generator

    def policy(self) -> Policy:
        """pi_t."""
        return Policy(softmax_rows(self.logits))

    def sampling_policy(self) -> Policy:
        """pi_hat_t."""
        return mix_epsilon_greedy(self.policy(), eps_before(self.schedule, self.t))


def init_state(mdp: Mdp, sched: Schedule, rng: np.random.Generator,
               initial_state: int = 0, q0=None) -> NacState:
    """Zero logits (uniform pi_0), ``A_0 ~ pi_0(.|S_0)``."""
    if not 0 <= initial_state < mdp.n_states:
        raise ConfigError(f"initial_state {initial_state} out of range")
    q = np.zeros((mdp.n_states, mdp.n_actions)) if q0 is None else np.array(q0, dtype=float)
    if q.shape != (mdp.n_states, mdp.n_actions):
        raise ShapeError(f"q0 must have shape {(mdp.n_states, mdp.n_actions)}")
    if q.min() < 0 or q.max() > mdp.q_max:
        raise DomainError("q0 entries must lie in [0, 1/(1-gamma)]")
    a0 = categorical(np.cumsum(np.full(mdp.n_actions, 1.0 / mdp.n_actions)), rng.random())
    return NacState(mdp, sched, 0, q, np.zeros_like(q), (int(initial_state), a0), rng)


def step(state: NacState) -> StateActionTuple:
    """One loop iteration through the public operations (reference path)."""
    mdp, t = state.mdp, state.t
    s, a = state.current
    obs = sample_step(mdp, s, a, state.sampling_policy(), state.rng)
    alpha_t, beta_t, _ = schedule_at(state.schedule, t)
    state.q = critic_update(state.q, obs, mdp.reward[s, a], alpha_t, mdp.gamma)
    if beta_t != 0.0:
        state.logits = actor_update(state.logits, state.q, beta_t).logits.copy()
    state.current = (obs.s_next, obs.a_next)
    state.t = t + 1
    return obs


@numba.njit(cache=True)
def _draw(cdf, u):
    n = cdf.shape[0]
    for i in range(n):
        if u < cdf[i]:
            return i
    for i in range(n - 1, -1, -1):
        prev = cdf[i - 1] if i > 0 else 0.0
        if cdf[i] > prev:
            return i
    return n - 1


@numba.njit(cache=True)
def _advance(cdf_p, reward, gamma, q, z, sa, t0, n_steps, sched, u):
    alpha, nu, beta, sigma, eps, xi = sched[0], sched[1], sched[2], sched[3], sched[4], sched[5]
    n_actions = reward.shape[1]
    probs = np.empty(n_actions)
    cdf = np.empty(n_actions)
    s = sa[0]
    a = sa[1]
    for k in range(n_steps):
        t = t0 + k
        s2 = _draw(cdf_p[s, a], u[2 * k])
        eps_prev = 0.0 if t == 0 else eps / (t * 1.0) ** xi
        m = z[s2, 0]
        for b in range(1, n_actions):
            if z[s2, b] > m:
                m = z[s2, b]
        tot = 0.0
        for b in range(n_actions):
            probs[b] = math.exp(z[s2, b] - m)
            tot += probs[b]
        acc = 0.0
        for b in range(n_actions):
            acc += eps_prev / n_actions + (1.0 - eps_prev) * (probs[b] / tot)
            cdf[b] = acc
        a2 = _draw(cdf, u[2 * k + 1])
        alpha_t = alpha / (t + 1.0) ** nu
        q[s, a] = q[s, a] + alpha_t * (reward[s, a] + gamma * q[s2, a2] - q[s, a])
        beta_t = beta / (t + 1.0) ** sigma
        if beta_t != 0.0:
            for i in range(q.shape[0]):
                for j in range(n_actions):
                    z[i, j] += beta_t * q[i, j]
        s = s2
        a = a2
    sa[0] = s
    sa[1] = a


def advance(state: NacState, n_steps: int) -> None:
    """Run ``n_steps`` iterations in place through the compiled loop."""
    if n_steps <= 0:
        return
    mdp = state.mdp
    u = state.rng.random(2 * n_steps)
    sa = np.array(state.current, dtype=np.int64)
    q = np.ascontiguousarray(state.q, dtype=float)
    z = np.ascontiguousarray(state.logits, dtype=float)
    _advance(np.cumsum(mdp.transition, axis=2), np.ascontiguousarray(mdp.reward),
             mdp.gamma, q, z, sa, state.t, n_steps, state.schedule.as_array(), u)
    state.q, state.logits = q, z
    state.current = (int(sa[0]), int(sa[1]))
    state.t += n_steps


def log_checkpoints(T: int, count: int = 64) -> list[int]:
    pts = np.unique(np.round(np.geomspace(1, T + 1, max(count - 1, 1))).astype(int) - 1)
    return sorted({0, T, *pts.tolist()})


def linear_checkpoints(T: int, count: int = 64) -> list[int]:
    return sorted(set(np.round(np.linspace(0, T, max(count, 2))).astype(int).tolist()))


class Snapshot(NamedTuple):
    t: int
    policy: np.ndarray
    sampling_policy: np.ndarray
    q: np.ndarray


class TraceRow(NamedTuple):
    t: int
    value_gap: float
    critic_error: float
    theta_norm: float
    min_policy_entry: float
    pi_watch: float
    kl_potential: float
    seed: int


TRACE_COLUMNS = TraceRow._fields


@dataclass
class RunTrace:
    """Checkpoint metrics plus the raw snapshots they were computed from.

    Snapshots are kept at ``c - 1``, ``c`` and ``c + 1`` for each checkpoint
    ``c`` so that one-step drift bounds can be evaluated afterwards.
    """

    mdp: Mdp
    schedule: Schedule
    seed: int
    watch: tuple[int, int]
    rows: list[TraceRow] = field(default_factory=list)
    snapshots: dict[int, Snapshot] = field(default_factory=dict)


@dataclass
class RunResult:
    output_policy: Policy
    output_index: int
    trace: RunTrace
    final_state: NacState


def _trace_rows(trace: RunTrace, checkpoints, initial) -> list[TraceRow]:
    from .diagnostics import kl_potential

    def kl(probs):
        try:
            return kl_potential(probs, pi_star, d_star)
        except DomainError:
            return math.inf

    mdp = trace.mdp
    pi_star, v_star = solve_optimal(mdp, initial)
    d_star = discounted_visitation(mdp, pi_star, initial)
    snaps = trace.snapshots
    q_cache: dict[int, np.ndarray] = {}

    def q_of(t):
        if t not in q_cache:
            q_cache[t] = exact_q(mdp, snaps[t].sampling_policy)
        return q_cache[t]

    rows = []
    s_w, a_w = trace.watch
    has_watch = s_w < mdp.n_states and a_w < mdp.n_actions
    for c in checkpoints:
        pi_hat = snaps[c].sampling_policy
        gap = v_star.aggregate - exact_v(mdp, pi_hat, initial).aggregate
        crit = float(np.linalg.norm(q_of(c) - snaps[c + 1].q))
        theta = float(np.linalg.norm(snaps[c].q - q_of(c - 1))) if c >= 1 else math.nan
        rows.append(TraceRow(c, float(gap), crit, theta, float(pi_hat.min()),
                             float(snaps[c].policy[s_w, a_w]) if has_watch else math.nan,
                             kl(pi_hat), trace.seed))
    return rows


def run(mdp: Mdp, sched: Schedule, T: int, *, seed: int = 0, rng=None, q0=None,
        initial_state: int = 0, checkpoints=None, watch=(0, 1), initial=None,
        metrics: bool = True) -> RunResult:
    """Run the actor-critic loop for iterations ``t = 0..T``.

    ``rng`` defaults to a Philox stream keyed by ``seed``. The output index
    ``T_hat`` (``P(T_hat = i)`` proportional to ``beta_i``) comes from an
    independent child stream; it does not depend on the trajectory, so it is
    drawn up front and ``pi_hat_{T_hat}`` is captured on the way past.
    ``checkpoints`` defaults to 64 log-spaced iterations; ``metrics=False``
    skips the exact per-checkpoint evaluation.
    """
    if T < 0:
        raise ConfigError(f"T must be nonnegative, got {T}")
    if rng is None:
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    out_rng = rng.spawn(1)[0]
    checkpoints = log_checkpoints(T) if checkpoints is None else sorted(set(checkpoints))
    if any(c < 0 or c > T for c in checkpoints):
        raise ConfigError(f"checkpoints must lie in [0, {T}]")
    w = betas(sched, T)
    t_hat = sample_output_index(w, out_rng) if w.sum() > 0 else \
        int(out_rng.integers(0, T + 1))
    stops = {t_hat, T, T + 1}
    for c in checkpoints:
        stops.update(x for x in (c - 1, c, c + 1) if x >= 0)

    state = init_state(mdp, sched, rng, initial_state, q0)
    trace = RunTrace(mdp, sched, seed, tuple(watch))
    for stop in sorted(stops):
        advance(state, stop - state.t)
        pi = state.policy()
        trace.snapshots[stop] = Snapshot(
            stop, pi.probs, mix_epsilon_greedy(pi, eps_before(sched, stop)).probs,
            state.q.copy())
    if metrics and checkpoints:
        trace.rows = _trace_rows(trace, checkpoints, initial)
    output = Policy(trace.snapshots[t_hat].sampling_policy)
    return RunResult(output, t_hat, trace, state)

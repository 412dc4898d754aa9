"""Executable checks of the analytical bounds behind the actor-critic analysis.

Every ``check_*`` returns a :class:`LemmaCheckResult` whose ``worst_margin`` is
``min(bound - observed)`` over the instances checked; a negative margin
beyond round-off counts as a violation. Run-based checks read the snapshots a
:class:`~nac2ts.nac.RunTrace` keeps around each checkpoint.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import DomainError, ErgodicityError
from .exact import (build_gamma_instruments, discounted_visitation, exact_q, exact_v,
                    gamma_value)
from .mdp_core import (Mdp, StateActionTuple, TransitionKernel, as_probs,
                       check_ergodic, induced_kernel, mix_epsilon_greedy,
                       stationary_distribution)
from .nac import RunTrace, Schedule, eps_before, schedule_at

# report identifiers, fixed by the JSON report format
ID_Q_DRIFT = "5.2"
ID_THETA_DRIFT = "5.3"
ID_NEGATIVE_DRIFT = "5.4"
ID_BOUNDS = "5.5"
ID_Q_LIPSCHITZ = "5.10"
ID_POLICY_DRIFT = "5.11"
ID_CRITIC_STEP = "C.7-6"
ID_PERF_DIFF = "PDL"
ID_GAMMA_MEAN = "Γ-mean"
ID_MIXING = "mixing"

REL_TOL = 1e-9


@dataclass
class LemmaCheckResult:
    lemma_id: str
    instances_checked: int = 0
    violations: int = 0
    worst_margin: float = math.inf

    def add(self, bound: float, observed: float, tol: float | None = None) -> None:
        margin = float(bound) - float(observed)
        if tol is None:
            tol = REL_TOL * max(1.0, abs(bound), abs(observed))
        self.instances_checked += 1
        self.violations += int(margin < -tol)
        self.worst_margin = min(self.worst_margin, margin)

    def merge(self, other: "LemmaCheckResult") -> "LemmaCheckResult":
        return LemmaCheckResult(self.lemma_id,
                                self.instances_checked + other.instances_checked,
                                self.violations + other.violations,
                                min(self.worst_margin, other.worst_margin))

    @property
    def passed(self) -> bool:
        return self.violations == 0

    def to_dict(self) -> dict:
        margin = self.worst_margin if math.isfinite(self.worst_margin) else None
        return {"lemma_id": self.lemma_id, "instances": self.instances_checked,
                "violations": self.violations, "worst_margin": margin}


@dataclass(frozen=True)
class ConstantsReport:
    q_max: float
    delta_q: float
    l1: float
    l2: float
    l3: float
    mu_min: float | None

    def to_dict(self) -> dict:
        return asdict(self)


def constants_report(mdp: Mdp, sched: Schedule, pi=None) -> ConstantsReport:
    nS, nA, g = mdp.n_states, mdp.n_actions, mdp.gamma
    q_max = 1.0 / (1.0 - g)
    mu_min = None
    if pi is not None:
        try:
            mu_min = float(stationary_distribution(induced_kernel(mdp, pi)).min())
        except ErgodicityError:
            mu_min = None
    return ConstantsReport(
        q_max=q_max,
        delta_q=2.0 * q_max + 1.0,
        l1=q_max * math.sqrt(nA * nS),
        l2=g * nS * nA / (1.0 - g) ** 2,
        l3=sched.xi * math.sqrt(nS) * (1.0 / math.sqrt(nA) + 1.0),
        mu_min=mu_min,
    )


@dataclass(frozen=True)
class MixingEstimate:
    m: float
    rho: float
    tv_curve: list[tuple[int, float]]

    def bound(self, tau) -> np.ndarray:
        return self.m * self.rho ** np.asarray(tau, dtype=float)


def tv_curve(kernel, tau_max: int, tv_floor: float = 1e-12) -> list[tuple[int, float]]:
    """Worst-start total variation to stationarity for tau = 1..tau_max.

    Distances below ``tv_floor`` are indistinguishable from round-off in the
    stationary vector and are reported as 0.
    """
    P = kernel.matrix if isinstance(kernel, TransitionKernel) else TransitionKernel(kernel).matrix
    mu = stationary_distribution(P)
    Pk = P.copy()
    out = []
    for tau in range(1, tau_max + 1):
        tv = 0.5 * float(np.abs(Pk - mu).sum(axis=1).max())
        out.append((tau, tv if tv >= tv_floor else 0.0))
        Pk = Pk @ P
    return out


def second_eigenvalue_modulus(kernel) -> float:
    P = kernel.matrix if isinstance(kernel, TransitionKernel) else np.asarray(kernel, float)
    mu = stationary_distribution(P)
    return float(np.max(np.abs(np.linalg.eigvals(P - np.outer(np.ones(len(mu)), mu)))))


def estimate_mixing(kernel, tau_max: int = 200, rho_floor: float = 1e-6,
                    tv_floor: float = 1e-12) -> MixingEstimate:
    """Geometric certificate ``tv(tau) <= m rho^tau`` for an ergodic chain.

    ``rho`` is a least-squares fit of log tv over the tail half of the
    resolvable part of the curve, floored at the second-largest eigenvalue
    modulus so the certificate keeps holding past ``tau_max``. ``m`` is the
    smallest constant that dominates every measured point.
    """
    check_ergodic(kernel)
    curve = tv_curve(kernel, tau_max, tv_floor)
    taus = np.array([c[0] for c in curve], dtype=float)
    tvs = np.array([c[1] for c in curve])
    zero = np.flatnonzero(tvs == 0.0)
    resolvable = len(tvs) if zero.size == 0 else int(zero[0])
    rho = rho_floor
    if resolvable >= 1:
        tail = np.arange(resolvable // 2, resolvable)
        if tail.size >= 2:
            slope = np.polyfit(taus[tail], np.log(tvs[tail]), 1)[0]
            rho = math.exp(slope)
        else:
            rho = tvs[0] ** (1.0 / taus[0])
    rho = max(rho, second_eigenvalue_modulus(kernel), rho_floor)
    if rho >= 1.0:
        raise ErgodicityError("total variation does not decay geometrically")
    pos = tvs > 0
    m = float(np.max(tvs[pos] / rho ** taus[pos])) if pos.any() else 1.0
    return MixingEstimate(m, rho, curve)


def check_mixing(kernels, tau_max: int = 200) -> LemmaCheckResult:
    """Fit a certificate per kernel and test it on twice the fitted horizon."""
    res = LemmaCheckResult(ID_MIXING)
    for kernel in kernels:
        est = estimate_mixing(kernel, tau_max)
        for tau, tv in tv_curve(kernel, 2 * tau_max):
            res.add(float(est.bound(tau)), tv, tol=1e-12)
    return res


def _random_policy(rng, nS, nA) -> np.ndarray:
    return rng.dirichlet(np.ones(nA), size=nS)


def check_negative_drift(mdp: Mdp, pi, eps: float, theta_samples, rng) -> LemmaCheckResult:
    """theta' A_bar theta <= -(1-gamma) (eps/|A|) mu_min |theta|^2 for the eps-mixed pi.

    ``theta_samples`` is either a count of Gaussian draws or an array of them.
    """
    if not eps > 0:
        raise DomainError("negative drift needs eps > 0")
    pi_hat = mix_epsilon_greedy(pi, eps)
    inst = build_gamma_instruments(mdp, pi_hat)
    coef = (1.0 - mdp.gamma) * eps / mdp.n_actions * inst.mu.min()
    n = inst.a_bar.shape[0]
    thetas = (rng.standard_normal((int(theta_samples), n)) if np.isscalar(theta_samples)
              else np.asarray(theta_samples, dtype=float).reshape(-1, n))
    res = LemmaCheckResult(ID_NEGATIVE_DRIFT)
    for th in thetas:
        res.add(-coef * float(th @ th), float(th @ inst.a_bar @ th))
    return res


def check_q_lipschitz(mdp: Mdp, n_pairs: int, rng, pairs=None) -> LemmaCheckResult:
    """|Q^pi1 - Q^pi2| <= L2 |pi1 - pi2| over random (or given) policy pairs."""
    l2 = mdp.gamma * mdp.n_states * mdp.n_actions / (1.0 - mdp.gamma) ** 2
    if pairs is None:
        pairs = [(_random_policy(rng, mdp.n_states, mdp.n_actions),
                  _random_policy(rng, mdp.n_states, mdp.n_actions)) for _ in range(n_pairs)]
    res = LemmaCheckResult(ID_Q_LIPSCHITZ)
    for p1, p2 in pairs:
        p1, p2 = as_probs(p1), as_probs(p2)
        res.add(l2 * np.linalg.norm(p1 - p2),
                float(np.linalg.norm(exact_q(mdp, p1) - exact_q(mdp, p2))))
    return res


def check_bounds(mdp: Mdp, n_policies: int, rng, traces=()) -> LemmaCheckResult:
    """Range bounds on V^pi, Q^pi, |Q^pi|, and on critic iterates of recorded runs."""
    q_max = mdp.q_max
    norm_cap = math.sqrt(mdp.n_states * mdp.n_actions) * q_max
    res = LemmaCheckResult(ID_BOUNDS)

    def table(q):
        res.add(q_max, float(q.max()))
        res.add(float(q.min()), 0.0)
        res.add(norm_cap, float(np.linalg.norm(q)))

    for _ in range(n_policies):
        pi = _random_policy(rng, mdp.n_states, mdp.n_actions)
        v = exact_v(mdp, pi).values
        res.add(q_max, float(v.max()))
        res.add(float(v.min()), 0.0)
        table(exact_q(mdp, pi))
    for trace in traces:
        for snap in trace.snapshots.values():
            table(snap.q)
    return res


def check_performance_difference(mdp: Mdp, n_pairs: int, rng, initial=None,
                                 tol: float = 1e-8) -> LemmaCheckResult:
    """V^pi1 - V^pi2 against the visitation-weighted advantage of pi1 under pi2."""
    res = LemmaCheckResult(ID_PERF_DIFF)
    for _ in range(n_pairs):
        p1 = _random_policy(rng, mdp.n_states, mdp.n_actions)
        p2 = _random_policy(rng, mdp.n_states, mdp.n_actions)
        v1, v2 = exact_v(mdp, p1, initial), exact_v(mdp, p2, initial)
        adv = exact_q(mdp, p2) - v2.values[:, None]
        d1 = discounted_visitation(mdp, p1, initial)
        rhs = float((d1[:, None] * p1 * adv).sum()) / (1.0 - mdp.gamma)
        res.add(tol, abs((v1.aggregate - v2.aggregate) - rhs), tol=0.0)
    return res


def stationary_gamma_mean(mdp: Mdp, pi_hat, theta) -> float:
    """E[Gamma] with O drawn from the stationary state-action-transition law."""
    probs = as_probs(pi_hat)
    inst = build_gamma_instruments(mdp, probs)
    q_pi = exact_q(mdp, probs)
    P = mdp.transition
    total = 0.0
    for s in range(mdp.n_states):
        for a in range(mdp.n_actions):
            w_sa = inst.mu[s] * probs[s, a]
            for s2 in range(mdp.n_states):
                for a2 in range(mdp.n_actions):
                    w = w_sa * P[s, a, s2] * probs[s2, a2]
                    if w > 0:
                        total += w * gamma_value(inst, q_pi, theta,
                                                 StateActionTuple(s, a, s2, a2))
    return total


def check_gamma_mean(instances, rng, tol: float = 1e-10) -> LemmaCheckResult:
    """Stationary mean of Gamma vanishes; ``instances`` yields (mdp, pi_hat) pairs."""
    res = LemmaCheckResult(ID_GAMMA_MEAN)
    for mdp, pi_hat in instances:
        theta = rng.standard_normal(mdp.n_states * mdp.n_actions)
        res.add(tol, abs(stationary_gamma_mean(mdp, pi_hat, theta)), tol=0.0)
    return res


def _pairs(trace: RunTrace, start: int):
    snaps = trace.snapshots
    for t in sorted(snaps):
        if t >= start and t + 1 in snaps:
            yield t


def check_policy_drift(trace: RunTrace) -> LemmaCheckResult:
    """|pi_hat_{t+1} - pi_hat_t| <= L1 beta_t + L3 eps_{t-1}/t for t >= 1."""
    snaps = trace.snapshots
    res = LemmaCheckResult(ID_POLICY_DRIFT)
    for t in _pairs(trace, 1):
        res.add(policy_drift_bound(trace, t),
                float(np.linalg.norm(snaps[t + 1].sampling_policy - snaps[t].sampling_policy)))
    return res


def policy_drift_bound(trace: RunTrace, t: int) -> float:
    c = constants_report(trace.mdp, trace.schedule)
    return c.l1 * schedule_at(trace.schedule, t)[1] + c.l3 * eps_before(trace.schedule, t) / t


def check_q_function_drift(trace: RunTrace) -> LemmaCheckResult:
    """|Q^{pi_hat_{t+1}} - Q^{pi_hat_t}| <= L2 (L3 eps_{t-1}/t + L1 beta_t) for t >= 1."""
    c = constants_report(trace.mdp, trace.schedule)
    snaps, mdp = trace.snapshots, trace.mdp
    res = LemmaCheckResult(ID_Q_DRIFT)
    for t in _pairs(trace, 1):
        lhs = np.linalg.norm(exact_q(mdp, snaps[t + 1].sampling_policy)
                             - exact_q(mdp, snaps[t].sampling_policy))
        res.add(c.l2 * policy_drift_bound(trace, t), float(lhs))
    return res


def check_critic_drift(trace: RunTrace) -> LemmaCheckResult:
    """|Q_{t+1} - Q_t| <= alpha_t (2 Q_max + 1)."""
    c = constants_report(trace.mdp, trace.schedule)
    snaps = trace.snapshots
    res = LemmaCheckResult(ID_CRITIC_STEP)
    for t in _pairs(trace, 0):
        alpha_t = schedule_at(trace.schedule, t)[0]
        res.add(alpha_t * c.delta_q, float(np.linalg.norm(snaps[t + 1].q - snaps[t].q)))
    return res


def check_theta_drift(trace: RunTrace) -> LemmaCheckResult:
    """|theta_{t+1} - theta_t|^2 bound, theta_t = Q_t - Q^{pi_hat_{t-1}}, for t >= 2."""
    c = constants_report(trace.mdp, trace.schedule)
    snaps, mdp, sched = trace.snapshots, trace.mdp, trace.schedule
    res = LemmaCheckResult(ID_THETA_DRIFT)
    for t in _pairs(trace, 2):
        if t - 1 not in snaps:
            continue
        theta_t = snaps[t].q - exact_q(mdp, snaps[t - 1].sampling_policy)
        theta_next = snaps[t + 1].q - exact_q(mdp, snaps[t].sampling_policy)
        alpha_t = schedule_at(sched, t)[0]
        beta_prev = schedule_at(sched, t - 1)[1]
        eps_pp = eps_before(sched, t - 1)
        bound = (2 * alpha_t ** 2 * c.delta_q ** 2
                 + 4 * c.l2 ** 2 * c.l3 ** 2 * eps_pp ** 2 / (t - 1) ** 2
                 + 4 * c.l2 ** 2 * c.l1 ** 2 * beta_prev ** 2)
        res.add(bound, float(np.sum((theta_next - theta_t) ** 2)))
    return res


def kl_potential(pi, pi_star, d_star) -> float:
    """E_{s ~ d*} KL(pi*(.|s) || pi(.|s))."""
    p, ps = as_probs(pi), as_probs(pi_star)
    d = np.asarray(d_star, dtype=float)
    support = ps > 0
    if np.any(p[support] <= 0):
        raise DomainError("pi puts zero mass on an action the reference policy plays")
    logs = np.zeros_like(ps)
    logs[support] = np.log(ps[support] / p[support])
    return float(d @ (ps * logs).sum(axis=1))

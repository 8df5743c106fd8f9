"""Exact fictitious play over the augmented state space.

Each iteration models the other taxis by a per-(t, zone) count
distribution, computes one taxi's exact best response against it by
finite-horizon backward induction, averages the best-response occupancy
into the running population occupancy, and renormalizes that average
into the next symmetric policy. The count distribution is binomial: a
single representative agent's presence marginal is propagated forward
through the congestion dynamics (at expected counts), and the other
``N-1`` agents are treated as independent draws from it.

Backward induction replaces the equivalent occupancy-variable linear
program: against a fixed count model the best response is a plain
finite-horizon MDP over (zone, hours, breaks), so the DP is exact and
solver-free. Ties break toward the lowest action index, which keeps
runs deterministic.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import binom

from .model import FleetInstance
from .policy import (
    OccupancyMatrix,
    Policy,
    feasible_actions,
    policy_from_occupancy,
    policy_shape,
    uniform_start_policy,
)

__all__ = [
    "CountModel",
    "FpConfig",
    "ConvergenceReport",
    "agent_count_probability",
    "exact_best_response",
    "policy_value",
    "policy_occupancy",
    "run_fp",
    "exploitability",
]

# Binomial tails thinner than this are dropped when averaging rewards and
# transitions over the competitor count; the induced error is bounded by
# the dropped mass times the largest reward magnitude.
COUNT_MASS_TOL = 1e-6


@dataclass
class CountModel:
    """Distribution of how many other taxis share each zone at each step.

    ``presence[t, s]`` is the probability that one representative other
    taxi occupies ``s`` at ``t``; the count of the remaining ``others``
    taxis is Binomial(others, presence).
    """

    others: int
    presence: np.ndarray  # (H, num_states)

    def pmf(self, t: int, s: int) -> np.ndarray:
        """Full pmf over 0..others other taxis at (t, s)."""
        q = float(np.clip(self.presence[t, s], 0.0, 1.0))
        return binom.pmf(np.arange(self.others + 1), self.others, q)

    def truncated_pmf(
        self, t: int, s: int, mass_tol: float = COUNT_MASS_TOL
    ) -> tuple[np.ndarray, np.ndarray]:
        """Smallest central support interval holding >= 1 - mass_tol."""
        q = float(np.clip(self.presence[t, s], 0.0, 1.0))
        lo = int(binom.ppf(mass_tol / 2, self.others, q))
        hi = int(binom.isf(mass_tol / 2, self.others, q))
        support = np.arange(lo, hi + 1)
        return support, binom.pmf(support, self.others, q)


@dataclass
class FpConfig:
    epsilon: float = 1e-3
    max_iters: int = 500
    mode: str = "flexible"  # "flexible" or "rigid"
    trace: bool = False     # keep per-iteration occupancies (tests/diagnostics)


@dataclass
class ConvergenceReport:
    converged: bool
    iterations: int
    final_delta: float
    deltas: list[float] = field(default_factory=list)
    value: float | None = None
    wall_time: float = 0.0
    mean_occupancy: np.ndarray | None = None
    occupancy_iterates: list[np.ndarray] | None = None
    policy_iterates: list[np.ndarray] | None = None


def _zone_kernel_at(instance: FleetInstance, t: int, d: np.ndarray) -> np.ndarray:
    """Transition kernel (src zone, zone action, dest zone) at congestion d."""
    Z = instance.num_zones
    out = instance.flow[t, :Z, :Z]
    total = out.sum(axis=1)
    ds = np.asarray(d, dtype=float)[:Z]
    covered = total >= ds  # demand covers every taxi present
    denom = np.where(covered, np.where(total > 0, total, 1.0), ds)
    base = out / denom[:, None]
    kernel = np.repeat(base[:, None, :], Z, axis=1)
    idx = np.arange(Z)
    stay = np.where(covered, 0.0, 1.0 - total / ds)
    kernel[:, idx, idx] += stay[:, None]
    return kernel


def _step_distribution(
    instance: FleetInstance,
    mu: np.ndarray,
    prob_t: np.ndarray,
    kernel: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """One forward step: state-action mass at t and the state mass at t+1.

    Assumes ``prob_t`` puts no mass on infeasible actions (so counter
    indices never overflow).
    """
    Z, sink = instance.num_zones, instance.sink
    M, B = instance.max_hours, instance.max_breaks
    x_t = mu[..., None] * prob_t
    mu_next = np.zeros_like(mu)
    # zone -> zone moves serve one more hour
    moved = np.einsum("snba,saz->znb", x_t[:Z, :M, :, :Z], kernel)
    mu_next[:Z, 1:, :] += moved
    # leaving a zone (or staying off duty) keeps the counters
    mu_next[sink] += x_t[:Z, :, :, Z].sum(axis=0)
    mu_next[sink] += x_t[sink, :, :, Z]
    # first start: sink with n=0 moving out, break count unchanged
    mu_next[:Z, 1, :] += x_t[sink, 0, :, :Z].T
    # resuming after a break consumes one
    if M >= 2 and B >= 1:
        mu_next[:Z, 2 : M + 1, 1 : B + 1] += x_t[sink, 1:M, :B, :Z].transpose(2, 0, 1)
    return x_t, mu_next


def _start_distribution(instance: FleetInstance) -> np.ndarray:
    mu = np.zeros((instance.num_states, instance.max_hours + 1, instance.max_breaks + 1))
    mu[instance.sink, 0, 0] = 1.0
    return mu


def agent_count_probability(
    policy: Policy, instance: FleetInstance, others: int
) -> CountModel:
    """Binomial count model induced by everyone playing ``policy``.

    A single agent's occupancy marginal is pushed forward through the
    congestion dynamics in one pass, evaluating transitions at the
    expected zone loads ``others * presence + 1`` (the +1 counts the
    agent itself).
    """
    H = instance.horizon
    presence = np.zeros((H, instance.num_states))
    mu = _start_distribution(instance)
    for t in range(H):
        q = mu.sum(axis=(1, 2))
        presence[t] = q
        d_bar = others * q + 1.0
        kernel = _zone_kernel_at(instance, t, d_bar)
        _, mu = _step_distribution(instance, mu, policy.prob[t], kernel)
    return CountModel(others=others, presence=presence)


def _expected_tables_t(
    counts: CountModel, instance: FleetInstance, t: int
) -> tuple[np.ndarray, np.ndarray]:
    """Reward table (S, A) and zone kernel (Z, Z, Z) averaged over counts.

    For a zone with total departing demand F and K = i + 1 taxis present
    (i other taxis plus the agent), both the transition row and the
    reward are constant in the demand-covered regime (K <= F) and linear
    in 1/K otherwise, so the average needs only P(K <= F) and
    E[1/K ; K > F] per zone.
    """
    Z, sink = instance.num_zones, instance.sink
    out = instance.flow[t, :Z, :Z]
    total = out.sum(axis=1)
    net = instance.fare[t, :Z, :Z] - instance.cost[t, :Z, :Z]
    gross = (out * net).sum(axis=1)

    p_covered = np.zeros(Z)
    inv_mean = np.zeros(Z)  # E[1/K] restricted to the oversupplied regime
    for s in range(Z):
        q = float(np.clip(counts.presence[t, s], 0.0, 1.0))
        i_min = int(np.floor(total[s]))  # smallest i with i+1 taxis > demand
        if i_min >= 1:
            p_covered[s] = binom.cdf(i_min - 1, counts.others, q)
        lo = int(binom.ppf(COUNT_MASS_TOL / 2, counts.others, q))
        hi = int(binom.isf(COUNT_MASS_TOL / 2, counts.others, q))
        lo = max(lo, i_min)
        if lo <= hi:
            support = np.arange(lo, hi + 1)
            inv_mean[s] = float(
                (binom.pmf(support, counts.others, q) / (support + 1.0)).sum()
            )
    p_over = 1.0 - p_covered

    ratio = np.where(total > 0, p_covered / np.where(total > 0, total, 1.0), 0.0)
    weight = ratio + inv_mean
    kernel = np.repeat((out * weight[:, None])[:, None, :], Z, axis=1)
    idx = np.arange(Z)
    kernel[:, idx, idx] += (p_over - inv_mean * total)[:, None]

    rbar = np.zeros((instance.num_states, instance.num_actions))
    rbar[:Z, :Z] = (weight * gross)[:, None] + instance.cost[t, :Z, :Z] * (
        inv_mean * total - p_over
    )[:, None]
    rbar[:Z, Z] = instance.cost[t, :Z, sink]
    rbar[sink, :] = instance.cost[t, sink, :]
    return rbar, kernel


def _action_values(
    instance: FleetInstance,
    rbar: np.ndarray,
    kernel: np.ndarray,
    v_next: np.ndarray,
    feas: np.ndarray,
) -> np.ndarray:
    """One-step lookahead values Q(s, n, b, a); -inf on infeasible actions."""
    Z, sink = instance.num_zones, instance.sink
    M, B = instance.max_hours, instance.max_breaks
    q = np.full((instance.num_states, M + 1, B + 1, instance.num_actions), -np.inf)
    cont = np.einsum("saz,znb->sanb", kernel, v_next[:Z, 1:, :])
    q[:Z, :M, :, :Z] = rbar[:Z, None, None, :Z] + cont.transpose(0, 2, 3, 1)
    q[:Z, :, :, Z] = rbar[:Z, Z][:, None, None] + v_next[sink][None, :, :]
    q[sink, :, :, Z] = rbar[sink, Z] + v_next[sink]
    q[sink, 0, :, :Z] = rbar[sink, :Z][None, :] + v_next[:Z, 1, :].T
    if M >= 2 and B >= 1:
        resume = v_next[:Z, 2 : M + 1, 1 : B + 1]
        q[sink, 1:M, :B, :Z] = rbar[sink, :Z][None, None, :] + resume.transpose(1, 2, 0)
    return np.where(feas, q, -np.inf)


def exact_best_response(
    counts: CountModel, instance: FleetInstance, rigid: bool = False
) -> tuple[OccupancyMatrix, Policy, float]:
    """Optimal single-taxi policy against the count model.

    Returns the greedy policy's occupancy (one unit of mass starting off
    duty with zero hours and breaks), the policy itself, and its expected
    total money.
    """
    if instance.max_hours < 1:
        raise ValueError("best response needs max_hours >= 1")
    H, sink = instance.horizon, instance.sink
    feas = feasible_actions(instance, rigid=rigid)
    prob = np.zeros(policy_shape(instance))
    tables = [_expected_tables_t(counts, instance, t) for t in range(H)]

    v_next = np.zeros((instance.num_states, instance.max_hours + 1, instance.max_breaks + 1))
    for t in reversed(range(H)):
        rbar, kernel = tables[t]
        q = _action_values(instance, rbar, kernel, v_next, feas)
        greedy = q.argmax(axis=-1)
        np.put_along_axis(prob[t], greedy[..., None], 1.0, axis=-1)
        v_next = np.take_along_axis(q, greedy[..., None], axis=-1)[..., 0]
    value = float(v_next[sink, 0, 0])

    policy = Policy(prob)
    occupancy = policy_occupancy(policy, counts, instance, _tables=tables)
    return occupancy, policy, value


def policy_occupancy(
    policy: Policy,
    counts: CountModel,
    instance: FleetInstance,
    _tables=None,
) -> OccupancyMatrix:
    """Expected state-action visitation of one taxi following ``policy``."""
    H = instance.horizon
    x = np.zeros(policy_shape(instance))
    mu = _start_distribution(instance)
    for t in range(H):
        kernel = (
            _tables[t][1] if _tables is not None
            else _expected_tables_t(counts, instance, t)[1]
        )
        x[t], mu = _step_distribution(instance, mu, policy.prob[t], kernel)
    return OccupancyMatrix(mass=x)


def policy_value(policy: Policy, counts: CountModel, instance: FleetInstance) -> float:
    """Expected total money for one taxi following ``policy`` against counts."""
    H, sink = instance.horizon, instance.sink
    feas = feasible_actions(instance)
    v_next = np.zeros((instance.num_states, instance.max_hours + 1, instance.max_breaks + 1))
    for t in reversed(range(H)):
        rbar, kernel = _expected_tables_t(counts, instance, t)
        q = _action_values(instance, rbar, kernel, v_next, feas)
        q = np.where(np.isfinite(q), q, 0.0)
        v_next = (policy.prob[t] * q).sum(axis=-1)
    return float(v_next[sink, 0, 0])


def run_fp(
    instance: FleetInstance, config: FpConfig | None = None
) -> tuple[Policy, ConvergenceReport]:
    """Fictitious play: average best-response occupancies until the policy settles.

    Starts from the uniform policy and stops when the max-norm policy
    change drops to ``config.epsilon`` or after ``config.max_iters``
    best responses (the report then says ``converged=False``). In rigid
    mode breaks are disabled and a started shift runs its full length.
    """
    config = config or FpConfig()
    rigid = config.mode == "rigid"
    start = time.perf_counter()
    feas = feasible_actions(instance, rigid=rigid)
    pi = uniform_start_policy(instance, rigid=rigid)
    others = instance.num_agents - 1

    counts = agent_count_probability(pi, instance, others)
    x_sum = policy_occupancy(pi, counts, instance).mass.copy()
    iterates = [x_sum.copy()] if config.trace else None
    n_averaged = 1

    deltas: list[float] = []
    converged = False
    iteration = 0
    for iteration in range(1, config.max_iters + 1):
        x_br, _, _ = exact_best_response(counts, instance, rigid=rigid)
        x_sum += x_br.mass
        n_averaged += 1
        if config.trace:
            iterates.append(x_br.mass.copy())
        new_prob = policy_from_occupancy(x_sum / n_averaged, feas)
        delta = float(np.abs(new_prob - pi.prob).max())
        deltas.append(delta)
        pi = Policy(new_prob)
        if delta <= config.epsilon:
            converged = True
            break
        counts = agent_count_probability(pi, instance, others)

    counts = agent_count_probability(pi, instance, others)
    value = policy_value(pi, counts, instance)
    report = ConvergenceReport(
        converged=converged,
        iterations=iteration,
        final_delta=deltas[-1] if deltas else 0.0,
        deltas=deltas,
        value=value,
        wall_time=time.perf_counter() - start,
        mean_occupancy=x_sum / n_averaged if config.trace else None,
        occupancy_iterates=iterates,
    )
    return pi, report


def exploitability(policy: Policy, instance: FleetInstance, rigid: bool = False) -> float:
    """Best-response value minus the policy's own value, both against the
    count model the policy induces; nonnegative up to float noise."""
    counts = agent_count_probability(policy, instance, instance.num_agents - 1)
    _, _, v_br = exact_best_response(counts, instance, rigid=rigid)
    v_pi = policy_value(policy, counts, instance)
    return v_br - v_pi

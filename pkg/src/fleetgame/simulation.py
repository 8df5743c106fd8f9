"""Simulation-based best response.

Instead of an exact best response, each iteration simulates the current
symmetric policy for the whole fleet, keeps the k highest-revenue
trajectories, folds them into a revenue-weighted partial occupancy
matrix (cells no selected trajectory visited are missing), completes the
matrix with an imputer, and renormalizes it into the next policy. The
update inherits the selection character of replicator dynamics: without
imputation, actions the policy stopped playing can never come back;
imputation is what reopens them.

The fleet steps synchronously: at each time step the empirical zone
loads are computed from everyone's current position, then every taxi
samples an action and a transition against those shared loads. All
randomness comes from one seeded generator consumed in fixed agent
order, so results are reproducible and independent of any scheduling.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .exact import ConvergenceReport
from .imputation import ImputationProblem, ImputerConfig, impute
from .model import FleetInstance
from .policy import (
    OccupancyMatrix,
    PartialOccupancy,
    Policy,
    feasible_actions,
    policy_from_occupancy,
    policy_shape,
    uniform_start_policy,
)

__all__ = [
    "Trajectory",
    "SbrConfig",
    "simulate",
    "top_k_weighted_path",
    "sbr_step",
    "run_sbr",
    "visitation_counts",
    "occupancy_to_problem",
    "policy_reference_matrix",
]

# Shift applied to top-k revenues before normalizing them into weights;
# keeps every selected trajectory's weight positive even on revenue ties.
REVENUE_WEIGHT_EPS = 1e-6

_FEATURE_COLUMNS = (0, 1, 2, 3)  # t, s, n, b


@dataclass
class Trajectory:
    """One taxi's day: per-step records plus the summed revenue."""

    agent: int
    times: np.ndarray
    zones: np.ndarray
    hours: np.ndarray
    breaks: np.ndarray
    actions: np.ndarray
    next_zones: np.ndarray
    rewards: np.ndarray
    total_revenue: float

    def steps(self):
        """Yield (t, (zone, hours, breaks), action, next zone, reward)."""
        from .model import AugmentedState

        for i in range(len(self.times)):
            yield (
                int(self.times[i]),
                AugmentedState(int(self.zones[i]), int(self.hours[i]), int(self.breaks[i])),
                int(self.actions[i]),
                int(self.next_zones[i]),
                float(self.rewards[i]),
            )


def _sample_rows(rows: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw per row; zero-probability columns are never picked."""
    cum = np.cumsum(rows, axis=1)
    scaled = u * cum[:, -1]
    return (scaled[:, None] >= cum).sum(axis=1)


def _sanitize(policy: Policy, instance: FleetInstance) -> np.ndarray:
    """Zero stray mass on infeasible actions and renormalize, if any."""
    feas = feasible_actions(instance)
    prob = policy.prob
    if prob[:, ~feas].any():
        prob = policy_from_occupancy(prob, feas)
    return prob


def simulate(
    policy: Policy, instance: FleetInstance, seed
) -> tuple[list[Trajectory], np.ndarray]:
    """Run the whole fleet under one symmetric policy for a day.

    Returns one trajectory per taxi and the trace of state distributions
    ``d[t]`` (zone counts plus the off-duty count) that drove each step's
    congestion. Deterministic in ``seed``.
    """
    N = instance.num_agents
    H, Z, sink = instance.horizon, instance.num_zones, instance.sink
    prob = _sanitize(policy, instance)
    rng = np.random.default_rng(seed)

    zone = np.full(N, sink, dtype=np.int64)
    hours = np.zeros(N, dtype=np.int64)
    breaks = np.zeros(N, dtype=np.int64)

    zones_h = np.empty((H, N), dtype=np.int64)
    hours_h = np.empty((H, N), dtype=np.int64)
    breaks_h = np.empty((H, N), dtype=np.int64)
    actions_h = np.empty((H, N), dtype=np.int64)
    next_h = np.empty((H, N), dtype=np.int64)
    rewards_h = np.empty((H, N))
    d_trace = np.empty((H, instance.num_states))

    for t in range(H):
        d = np.bincount(zone, minlength=instance.num_states).astype(float)
        d_trace[t] = d

        act = _sample_rows(prob[t, zone, hours, breaks], rng.random(N))
        nxt = np.empty(N, dtype=np.int64)
        rew = np.empty(N)

        off = act == Z
        nxt[off] = sink
        rew[off] = instance.cost[t, zone[off], sink]

        out_of_sink = ~off & (zone == sink)
        nxt[out_of_sink] = act[out_of_sink]
        rew[out_of_sink] = instance.cost[t, sink, act[out_of_sink]]

        cruising = ~off & (zone != sink)
        if cruising.any():
            src = zone[cruising]
            intent = act[cruising]
            flows = instance.flow[t, src, :Z]
            total = instance.flow[t].sum(axis=1)[src]
            ds = d[src]
            covered = total >= ds
            denom = np.where(covered, np.where(total > 0, total, 1.0), ds)
            p = flows / denom[:, None]
            over = ~covered
            rows_idx = np.arange(p.shape[0])
            p[rows_idx[over], intent[over]] += 1.0 - total[over] / ds[over]

            dest = _sample_rows(p, rng.random(p.shape[0]))
            hired = np.ones(p.shape[0], dtype=bool)
            landed_intent = over & (dest == intent)
            if landed_intent.any():
                where = rows_idx[landed_intent]
                p_cell = p[where, intent[landed_intent]]
                hire_prob = (flows[where, intent[landed_intent]] / ds[landed_intent]) / p_cell
                hired[landed_intent] = rng.random(where.size) < hire_prob
            gross = instance.fare[t, src, dest]
            spent = instance.cost[t, src, dest]
            rew[cruising] = np.where(hired, gross - spent, -spent)
            nxt[cruising] = dest

        zones_h[t], hours_h[t], breaks_h[t] = zone, hours, breaks
        actions_h[t], next_h[t], rewards_h[t] = act, nxt, rew

        moved_into_zone = ~off
        resumed = out_of_sink & (hours > 0)
        hours = hours + moved_into_zone
        breaks = breaks + resumed
        zone = nxt

    revenues = rewards_h.sum(axis=0)
    times = np.arange(H, dtype=np.int64)
    trajectories = [
        Trajectory(
            agent=i,
            times=times,
            zones=zones_h[:, i],
            hours=hours_h[:, i],
            breaks=breaks_h[:, i],
            actions=actions_h[:, i],
            next_zones=next_h[:, i],
            rewards=rewards_h[:, i],
            total_revenue=float(revenues[i]),
        )
        for i in range(N)
    ]
    return trajectories, d_trace


def _top_k_cells(
    trajectories: list[Trajectory], k: int, shape: tuple
) -> tuple[np.ndarray, np.ndarray]:
    """Flat cell indices and per-visit weights of the k best trajectories.

    A cell can appear several times (once per selected trajectory through
    it); summing the weights per cell gives the weighted path matrix.
    """
    if not trajectories:
        raise ValueError("no trajectories to select from")
    if not 1 <= k <= len(trajectories):
        raise ValueError(f"k must be in [1, {len(trajectories)}], got {k}")
    revenues = np.array([tr.total_revenue for tr in trajectories])
    agents = np.array([tr.agent for tr in trajectories])
    order = np.lexsort((agents, -revenues))
    top = order[:k]
    weights = revenues[top] - revenues[top].min() + REVENUE_WEIGHT_EPS
    weights = weights / weights.sum()

    cells = np.concatenate(
        [
            np.ravel_multi_index(
                (tr.times, tr.zones, tr.hours, tr.breaks, tr.actions), shape
            )
            for tr in (trajectories[i] for i in top)
        ]
    )
    horizon = shape[0]
    return cells, np.repeat(weights, horizon)


def top_k_weighted_path(
    trajectories: list[Trajectory], k: int, instance: FleetInstance
) -> PartialOccupancy:
    """Revenue-weighted occupancy of the k best trajectories.

    Weights are the top-k revenues shifted by their minimum (plus a small
    epsilon, so ties still count) and normalized to sum to one; every
    visited (t, s, n, b, a) cell accumulates the weights of the selected
    trajectories passing through it. Unvisited cells are missing.
    """
    shape = policy_shape(instance)
    cells, weights = _top_k_cells(trajectories, k, shape)
    values = np.zeros(shape)
    visited = np.zeros(shape, dtype=bool)
    np.add.at(values.reshape(-1), cells, weights)
    visited.reshape(-1)[cells] = True
    return PartialOccupancy(mass=values, mask=visited)


def visitation_counts(trajectories: list[Trajectory], instance: FleetInstance) -> np.ndarray:
    """Unweighted visit counts per (t, s, n, b, a) cell."""
    shape = policy_shape(instance)
    counts = np.zeros(shape)
    flat = counts.reshape(-1)
    for tr in trajectories:
        cells = np.ravel_multi_index(
            (tr.times, tr.zones, tr.hours, tr.breaks, tr.actions), shape
        )
        np.add.at(flat, cells, 1.0)
    return counts


def occupancy_to_problem(
    partial: PartialOccupancy, instance: FleetInstance
) -> ImputationProblem:
    """Flatten a partial occupancy into the imputers' matrix layout.

    One row per (t, s, n, b) state with those four coordinates exposed as
    observed feature columns; one target column per action, so imputers
    can condition each action's mass on the others and on the state.
    """
    shape = policy_shape(instance)
    state_shape, n_actions = shape[:4], shape[4]
    feats = np.indices(state_shape).reshape(4, -1).T.astype(float)
    targets = partial.mass.reshape(-1, n_actions)
    observed_t = partial.mask.reshape(-1, n_actions)
    values = np.concatenate(
        [feats, np.where(observed_t, targets, np.nan)], axis=1
    )
    observed = np.concatenate(
        [np.ones(feats.shape, dtype=bool), observed_t], axis=1
    )
    return ImputationProblem(values, observed, feature_columns=_FEATURE_COLUMNS)


def policy_reference_matrix(policy: Policy, instance: FleetInstance) -> np.ndarray:
    """Reference matrix (same layout as the problem) holding policy values."""
    shape = policy_shape(instance)
    state_shape, n_actions = shape[:4], shape[4]
    feats = np.indices(state_shape).reshape(4, -1).T.astype(float)
    return np.concatenate([feats, policy.prob.reshape(-1, n_actions)], axis=1)


def _tensor_reference_matrix(tensor: np.ndarray, instance: FleetInstance) -> np.ndarray:
    """Reference matrix (problem layout) holding the tensor's cell values."""
    shape = policy_shape(instance)
    state_shape, n_actions = shape[:4], shape[4]
    feats = np.indices(state_shape).reshape(4, -1).T.astype(float)
    return np.concatenate([feats, tensor.reshape(-1, n_actions)], axis=1)


def _completed_mass(
    policy: Policy,
    instance: FleetInstance,
    imputer: ImputerConfig,
    k: int,
    seed,
    reference_tensor: np.ndarray | None = None,
) -> tuple[np.ndarray, PartialOccupancy]:
    """Simulate, select, impute; the dense completed mass tensor.

    ``reference_tensor`` backs supervised imputation when the config has
    no explicit reference; the one-shot path passes the input policy,
    the solver loop its running-average occupancy.

    Supervised and zero fills short-circuit the flattened-matrix detour
    and write the tensor directly (cell-for-cell the same result; the
    matrix layout only matters to imputers that fit models across
    columns). At fleet scale this is what keeps one iteration cheap.
    """
    trajectories, _ = simulate(policy, instance, seed)
    partial = top_k_weighted_path(trajectories, k, instance)

    if imputer.method == "none":
        return np.where(partial.mask, partial.mass, 0.0), partial
    if imputer.method == "supervised" and imputer.reference is None:
        ref = reference_tensor if reference_tensor is not None else policy.prob
        if not np.isfinite(ref).all():
            raise ValueError("supervised reference has non-finite cells")
        return np.where(partial.mask, partial.mass, ref), partial

    problem = occupancy_to_problem(partial, instance)
    config = imputer
    if imputer.method == "mf":
        cap = min(problem.values.shape[0], len(problem.target_columns))
        if imputer.rank > cap:
            config = replace(imputer, rank=cap)
    result = impute(problem, config)
    mass = result.values[:, len(_FEATURE_COLUMNS):].reshape(policy_shape(instance))
    return mass, partial


def sbr_step(
    policy: Policy,
    instance: FleetInstance,
    imputer: ImputerConfig,
    k: int,
    seed,
    reference_policy: Policy | None = None,
) -> Policy:
    """One simulation-based best-response update of a symmetric policy.

    The completed matrix is clamped at zero, masked to feasible actions
    and renormalized per state (states left with no mass fall back to
    uniform over their feasible actions). For supervised imputation with
    no explicit reference, the input policy doubles as the reference.
    """
    ref = reference_policy.prob if reference_policy is not None else None
    mass, _ = _completed_mass(policy, instance, imputer, k, seed, ref)
    feas = feasible_actions(instance)
    return Policy(policy_from_occupancy(mass, feas))


@dataclass
class SbrConfig:
    k: int = 500
    imputer: ImputerConfig = field(default_factory=lambda: ImputerConfig(method="supervised"))
    epsilon: float = 1e-3
    max_iters: int = 100
    seed: int = 0
    trace: bool = False


def run_sbr(
    instance: FleetInstance, config: SbrConfig | None = None
) -> tuple[Policy, ConvergenceReport]:
    """Fictitious play with the simulation-based best response.

    Same loop shape as the exact solver: completed path matrices, in
    visitation-mass units, are averaged across iterations and the
    running average is renormalized into the next policy, with the same
    max-norm stopping test. The uniform starting policy's empirical
    population flow seeds the average (the initial-flow term of the
    exact loop), which keeps every initially reachable behavior alive at
    weight 1/i; the no-imputation ablation drops that seed, leaving pure
    top-k selection whose support can only shrink. Supervised imputation
    with no explicit reference copies missing cells from the running
    average itself, the mass-scale rendition of referencing the
    running-average policy.
    """
    config = config or SbrConfig()
    start = time.perf_counter()
    method = config.imputer.method
    shape = policy_shape(instance)
    feas = feasible_actions(instance)
    pi = uniform_start_policy(instance)
    x_sum = np.zeros(shape)
    # cumulative mass selected trajectories actually put on cells; its
    # per-iteration mean backs the supervised reference, so cells nobody
    # visits fade as 1/i instead of freezing at their seed mass
    internal_ref = method == "supervised" and config.imputer.reference is None
    observed_sum = np.zeros(shape) if internal_ref else None
    fill_buffer = np.zeros(shape) if (internal_ref or method == "none") else None
    n_averaged = 0
    if method != "none":
        seed0 = np.random.SeedSequence(entropy=config.seed, spawn_key=(0,))
        start_trajectories, _ = simulate(pi, instance, seed0)
        seed_flow = visitation_counts(start_trajectories, instance) / instance.num_agents
        x_sum += seed_flow
        if observed_sum is not None:
            observed_sum += seed_flow
        n_averaged = 1

    deltas: list[float] = []
    policy_iterates: list[np.ndarray] | None = [pi.prob.copy()] if config.trace else None
    converged = False
    iteration = 0
    for iteration in range(1, config.max_iters + 1):
        seed_i = np.random.SeedSequence(entropy=config.seed, spawn_key=(iteration,))
        if fill_buffer is not None:
            # fast path: the completed matrix is the reference (or zero)
            # with visited cells overwritten by fresh top-k weights
            trajectories, _ = simulate(pi, instance, seed_i)
            cells, weights = _top_k_cells(trajectories, config.k, shape)
            if internal_ref:
                np.divide(observed_sum, max(n_averaged, 1), out=fill_buffer)
            else:
                fill_buffer.fill(0.0)
            flat = fill_buffer.reshape(-1)
            flat[cells] = 0.0
            np.add.at(flat, cells, weights)
            x_sum += fill_buffer
            if observed_sum is not None:
                obs_flat = observed_sum.reshape(-1)
                np.add.at(obs_flat, cells, weights)
            clip = False  # fills are trajectory mass or averages, never negative
        else:
            mass_i, _ = _completed_mass(
                pi, instance, config.imputer, config.k, seed_i
            )
            x_sum += mass_i
            clip = True  # model-based imputers may predict negative mass
        n_averaged += 1
        # renormalization is row-scale invariant, so the 1/i mean is implicit
        new_prob = policy_from_occupancy(x_sum, feas, clip_negative=clip)
        delta = float(np.abs(new_prob - pi.prob).max())
        deltas.append(delta)
        pi = Policy(new_prob)
        if config.trace:
            policy_iterates.append(pi.prob.copy())
        if delta <= config.epsilon:
            converged = True
            break

    report = ConvergenceReport(
        converged=converged,
        iterations=iteration,
        final_delta=deltas[-1] if deltas else 0.0,
        deltas=deltas,
        wall_time=time.perf_counter() - start,
        mean_occupancy=x_sum / max(n_averaged, 1) if config.trace else None,
        policy_iterates=policy_iterates,
    )
    return pi, report

"""Policies and occupancy measures over the augmented state space.

A policy is a dense tensor ``pi[t, s, n, b, a]``: for each time step,
zone-or-sink, hours served ``n`` and breaks taken ``b``, a distribution
over actions (the Z zones plus the off-duty action). Shift bookkeeping:

* ``n`` counts time steps spent in zones, incremented on every arrival
  into a zone, so zone actions require ``n < max_hours``;
* ``b`` counts completed breaks. Leaving a zone for the sink is always
  allowed (a final sign-off is not a break); coming back out of the sink
  after having worked is what consumes a break, so it requires
  ``b < max_breaks`` and arrives with ``b + 1``;
* the pre-start state is the sink with ``(n=0, b=0)``; the first move
  into a zone starts the shift without consuming a break.

The rigid variant reproduces the fixed-shift regime used as a benchmark:
no breaks, and once a taxi starts it keeps taking zone actions until its
hour cap (or the horizon) is reached.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import FleetInstance

__all__ = [
    "Policy",
    "OccupancyMatrix",
    "PartialOccupancy",
    "feasible_actions",
    "next_counters",
    "uniform_start_policy",
    "policy_from_occupancy",
    "policy_shape",
    "validate_policy",
]


@dataclass
class Policy:
    """Action distributions per augmented state; ``prob[t, s, n, b, a]``."""

    prob: np.ndarray

    @property
    def shape(self) -> tuple:
        return self.prob.shape

    def copy(self) -> "Policy":
        return Policy(self.prob.copy())


@dataclass
class OccupancyMatrix:
    """Nonnegative visitation mass per ``(t, s, n, b, a)`` cell.

    ``mask`` (True = cell carries a value) marks partially observed
    matrices produced by the simulation path; a complete matrix leaves
    it as None.
    """

    mass: np.ndarray
    mask: np.ndarray | None = None

    @property
    def is_partial(self) -> bool:
        return self.mask is not None and not self.mask.all()


# A partial occupancy is an occupancy with a mandatory visited-cell mask.
PartialOccupancy = OccupancyMatrix


def policy_shape(instance: FleetInstance) -> tuple[int, int, int, int, int]:
    return (
        instance.horizon,
        instance.num_states,
        instance.max_hours + 1,
        instance.max_breaks + 1,
        instance.num_actions,
    )


def feasible_actions(instance: FleetInstance, rigid: bool = False) -> np.ndarray:
    """Boolean mask ``(s, n, b, a)`` of actions a policy may put mass on.

    The mask is time-independent; rows for states that can never be
    reached still get a nonempty action set so dense policy tensors are
    well defined everywhere.
    """
    Z = instance.num_zones
    M, B = instance.max_hours, instance.max_breaks
    sink = instance.sink
    f = np.zeros((Z + 1, M + 1, B + 1, Z + 1), dtype=bool)
    n = np.arange(M + 1)[:, None]  # (n, b) grid broadcast
    b = np.arange(B + 1)[None, :]

    if not rigid:
        # zones: work while hours remain, leaving for the sink is always open
        f[:Z, :, :, :Z] = (n < M)[None, :, :, None]
        f[:Z, :, :, Z] = True
        # sink: staying is always open; starting needs hours remaining,
        # resuming additionally consumes one of the remaining breaks
        f[sink, :, :, Z] = True
        can_out = (n < M) & ((n == 0) | (b < B))
        f[sink, :, :, :Z] = can_out[:, :, None]
    else:
        f[:Z, :, :, :Z] = (n < M)[None, :, :, None]
        f[:Z, :, :, Z] = (n == M)[None, :, :]
        f[sink, :, :, Z] = True
        f[sink, :, :, :Z] = (n == 0)[:, :, None]
    return f


def next_counters(instance: FleetInstance, s: int, n: int, b: int, a: int):
    """Shift counters after taking ``a`` from ``(s, n, b)``."""
    if a == instance.sink_action:
        return n, b
    if s == instance.sink:
        return n + 1, b if n == 0 else b + 1
    return n + 1, b


def uniform_start_policy(instance: FleetInstance, rigid: bool = False) -> Policy:
    """Equal probability over every feasible action, at every augmented state."""
    feas = feasible_actions(instance, rigid=rigid)
    counts = feas.sum(axis=-1, keepdims=True)
    base = np.where(feas, 1.0, 0.0) / counts
    prob = np.broadcast_to(base, policy_shape(instance)).copy()
    return Policy(prob)


def policy_from_occupancy(
    mass: np.ndarray,
    feasible: np.ndarray,
    clip_negative: bool = True,
    zero_row_fallback: bool = True,
) -> np.ndarray:
    """Renormalize occupancy mass into action distributions.

    Infeasible cells are zeroed before normalizing. Rows with no mass
    fall back to uniform over their feasible actions; with
    ``zero_row_fallback=False`` they stay all-zero instead (used when
    normalized matrices are averaged and empty rows must not vote).
    """
    m = np.clip(mass, 0.0, None) if clip_negative else np.array(mass, dtype=float)
    m *= feasible  # bool broadcast zeroes infeasible cells
    totals = m.sum(axis=-1, keepdims=True)
    np.divide(m, totals, out=m, where=totals > 0)  # all-zero rows stay zero
    if zero_row_fallback:
        counts = feasible.sum(axis=-1, keepdims=True)
        m += (totals == 0.0) * (feasible / counts)
    return m


def validate_policy(
    policy: Policy, instance: FleetInstance, rigid: bool = False, atol: float = 1e-9
) -> list[str]:
    """Row sums must be 1 and infeasible actions must carry zero mass."""
    v: list[str] = []
    expected = policy_shape(instance)
    if policy.prob.shape != expected:
        return [f"policy tensor must have shape {expected}, got {policy.prob.shape}"]
    sums = policy.prob.sum(axis=-1)
    bad = np.argwhere(np.abs(sums - 1.0) > atol)
    if bad.size:
        t, s, n, b = bad[0]
        v.append(f"action probabilities at (t={t}, s={s}, n={n}, b={b}) "
                 f"sum to {sums[t, s, n, b]:.12g}")
    feas = feasible_actions(instance, rigid=rigid)
    stray = np.argwhere((policy.prob > atol) & ~feas[None, ...])
    if stray.size:
        t, s, n, b, a = stray[0]
        v.append(f"probability mass on infeasible action a={a} at "
                 f"(t={t}, s={s}, n={n}, b={b})")
    return v

"""Core definition of the taxi-fleet zone-congestion game.

A fleet of selfish taxis moves between zones over a finite day horizon.
Customer flows between zones drive both where a taxi ends up and what it
earns: when a zone holds fewer taxis than departing customers every taxi
is hired and destinations follow the normalized flows; when taxis
outnumber customers each customer picks a taxi uniformly, so a taxi is
hired with probability proportional to the flow and otherwise drives to
its intended zone for free.

A special sink state represents a taxi that is off duty (not yet started,
on a break, or done for the day). Entering and leaving the sink is
deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "FleetInstance",
    "AugmentedState",
    "transition_row",
    "expected_reward",
    "sample_transition",
    "validate_instance",
]


@dataclass(frozen=True, eq=False)
class FleetInstance:
    """One day of the fleet game.

    Zones are indexed ``0 .. num_zones-1``; index ``num_zones`` is the sink
    (off-duty) state, which is also the only extra action ("go off duty").
    Tensors are indexed ``[t, src, dst]`` and include the sink row/column;
    customer flow into or out of the sink must be zero, while the cost
    tensor may carry nonzero sink entries (cost of signing off / driving
    back out; zero by default).

    Attributes:
        num_zones: Z, number of serviceable zones.
        horizon: H, number of decision steps in the day.
        flow: customers departing per ``(t, src, dst)``, shape (H, Z+1, Z+1).
        fare: money earned for a hired trip ``(t, src, dst)``, same shape.
        cost: money spent moving ``(t, src, dst)``, same shape.
        num_agents: N, taxis in the fleet.
        max_hours: cap on time steps a taxi may spend in zones during the day.
        max_breaks: cap on how many times a taxi may resume work after
            leaving for the sink mid-day.
        metadata: free-form extras carried through serialization (e.g. an
            initial distribution, which the solvers do not use).
    """

    num_zones: int
    horizon: int
    flow: np.ndarray
    fare: np.ndarray
    cost: np.ndarray
    num_agents: int
    max_hours: int
    max_breaks: int
    metadata: dict = field(default_factory=dict)

    @property
    def sink(self) -> int:
        return self.num_zones

    @property
    def sink_action(self) -> int:
        return self.num_zones

    @property
    def num_states(self) -> int:
        return self.num_zones + 1

    @property
    def num_actions(self) -> int:
        return self.num_zones + 1

    def outflow(self, t: int) -> np.ndarray:
        """Total customer demand leaving each zone at step t, shape (Z+1,)."""
        return self.flow[t].sum(axis=1)


@dataclass(frozen=True)
class AugmentedState:
    """Position plus shift bookkeeping: (zone-or-sink, hours served, breaks taken).

    ``zone == sink`` with ``hours == 0`` and ``breaks == 0`` means the taxi
    has not started its shift yet.
    """

    zone: int
    hours: int
    breaks: int


def _check_zone_query(instance: FleetInstance, t: int, s: int, d) -> float:
    ds = float(np.asarray(d)[s])
    if ds <= 0.0:
        raise ValueError(
            f"transition query from zone {s} at t={t} with no active agents "
            f"there (d[{s}]={ds}); occupied-state queries require d[s] > 0"
        )
    return ds


def transition_row(
    instance: FleetInstance, t: int, s: int, a: int, d
) -> np.ndarray:
    """Distribution over next states for a taxi in ``s`` taking ``a``.

    ``d`` is the state distribution of all active agents (length Z+1;
    only ``d[s]`` matters, and it counts the acting taxi itself). The
    off-duty action and the sink state are deterministic. For a zone
    query the three demand regimes apply:

    * demand covers taxis (``sum_j flow[t,s,j] >= d[s]``, ties included):
      every taxi is hired, destination ``j`` with probability
      ``flow[t,s,j] / sum_j flow[t,s,j]``;
    * taxis exceed demand, destination differs from the intended zone:
      hired there with probability ``flow[t,s,j] / d[s]``;
    * taxis exceed demand, destination equals the intended zone: the
      complement mass (free move, or hired toward the intended zone).
    """
    sink = instance.sink
    p = np.zeros(instance.num_states)
    if a == instance.sink_action:
        p[sink] = 1.0
        return p
    if s == sink:
        p[a] = 1.0
        return p
    ds = _check_zone_query(instance, t, s, d)
    out = instance.flow[t, s, : instance.num_zones]
    total = out.sum()
    if total >= ds:
        p[: instance.num_zones] = out / total
    else:
        p[: instance.num_zones] = out / ds
        stay = 1.0 - (total - out[a]) / ds
        assert stay >= -1e-12, "complement mass must be nonnegative when taxis exceed demand"
        p[a] = max(stay, 0.0)
    return p


def expected_reward(instance: FleetInstance, t: int, s: int, a: int, d) -> float:
    """Expected one-step money for a taxi in ``s`` taking ``a`` under ``d``.

    Hired trips earn ``fare - cost``; a free move to the intended zone
    (only possible when taxis exceed demand) pays ``-cost``. The off-duty
    action and moves out of the sink return the configured sink cost
    entries as-is (zero unless the instance overrides them).
    """
    sink = instance.sink
    Z = instance.num_zones
    if a == instance.sink_action:
        return float(instance.cost[t, s, sink])
    if s == sink:
        return float(instance.cost[t, sink, a])
    ds = _check_zone_query(instance, t, s, d)
    out = instance.flow[t, s, :Z]
    total = out.sum()
    net = instance.fare[t, s, :Z] - instance.cost[t, s, :Z]
    if total >= ds:
        return float(out @ net / total)
    hired = out / ds
    stay = 1.0 - (total - out[a]) / ds
    value = hired @ net - hired[a] * net[a]  # hired toward zones other than a
    value += out[a] / ds * instance.fare[t, s, a] - stay * instance.cost[t, s, a]
    return float(value)


def sample_transition(
    instance: FleetInstance,
    t: int,
    s: int,
    a: int,
    d,
    rng: np.random.Generator,
    size: int | None = None,
):
    """Draw (next state, realized reward) for a taxi in ``s`` taking ``a``.

    With ``size=None`` returns a ``(int, float)`` pair; otherwise two
    arrays of length ``size``. Realized rewards are ``fare - cost`` when
    the move was a hired trip and ``-cost`` for a free move; landing in
    the intended zone when taxis exceed demand resolves hired-vs-free by
    an auxiliary draw.
    """
    scalar = size is None
    n = 1 if scalar else int(size)
    sink = instance.sink
    Z = instance.num_zones

    if a == instance.sink_action:
        nxt = np.full(n, sink)
        rew = np.full(n, float(instance.cost[t, s, sink]))
    elif s == sink:
        nxt = np.full(n, a)
        rew = np.full(n, float(instance.cost[t, sink, a]))
    else:
        ds = _check_zone_query(instance, t, s, d)
        row = transition_row(instance, t, s, a, d)
        out = instance.flow[t, s, :Z]
        total = out.sum()
        nxt = rng.choice(instance.num_states, size=n, p=row)
        hired = np.ones(n, dtype=bool)
        if total < ds:
            land_intended = nxt == a
            if land_intended.any():
                p_hired = (out[a] / ds) / row[a] if row[a] > 0 else 0.0
                hired[land_intended] = rng.random(land_intended.sum()) < p_hired
        gross = instance.fare[t, s, nxt]
        spent = instance.cost[t, s, nxt]
        rew = np.where(hired, gross - spent, -spent)

    if scalar:
        return int(nxt[0]), float(rew[0])
    return nxt, rew.astype(float)


def validate_instance(instance: FleetInstance) -> list[str]:
    """Check structural invariants; returns one message per violation."""
    v: list[str] = []
    Z, H = instance.num_zones, instance.horizon
    if Z < 1:
        v.append(f"num_zones must be >= 1, got {Z}")
    if H < 1:
        v.append(f"horizon must be >= 1, got {H}")
    if instance.max_hours < 1:
        v.append(f"max_hours must be >= 1, got {instance.max_hours}")
    if instance.max_breaks < 0:
        v.append(f"max_breaks must be >= 0, got {instance.max_breaks}")
    if instance.num_agents < 1:
        v.append(f"num_agents must be >= 1, got {instance.num_agents}")

    expected = (H, Z + 1, Z + 1)
    for name in ("flow", "fare", "cost"):
        arr = getattr(instance, name)
        if not isinstance(arr, np.ndarray) or arr.shape != expected:
            v.append(f"{name} tensor must have shape {expected}, got "
                     f"{getattr(arr, 'shape', type(arr).__name__)}")
            return v  # index checks below assume correct shapes
        if not np.isfinite(arr).all():
            t, i, j = np.argwhere(~np.isfinite(arr))[0]
            v.append(f"non-finite {name} entry at (t={t}, src={i}, dst={j})")

    neg = np.argwhere(instance.flow < 0)
    if neg.size:
        t, i, j = neg[0]
        v.append(f"negative flow at (t={t}, src={i}, dst={j})")
    into_sink = np.argwhere(instance.flow[:, :, Z] != 0)
    if into_sink.size:
        t, i = into_sink[0]
        v.append(f"customer flow into sink at (t={t}, src={i})")
    out_of_sink = np.argwhere(instance.flow[:, Z, :] != 0)
    if out_of_sink.size:
        t, j = out_of_sink[0]
        v.append(f"customer flow out of sink at (t={t}, dst={j})")
    neg_fare = np.argwhere(instance.fare < 0)
    if neg_fare.size:
        t, i, j = neg_fare[0]
        v.append(f"negative fare at (t={t}, src={i}, dst={j})")
    return v

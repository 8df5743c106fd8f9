"""Train/test experiment harness and occupancy diagnostics.

The protocol mirrors a month of operations: policies are trained on each
day of the first week and evaluated on the matching day class (weekday
or weekend) of the remaining weeks. Since the original fleet data is not
distributable, a synthetic month generator produces 28 day instances
from weekday/weekend demand archetypes with per-day noise. Result tables
carry raw revenues alongside the derived improvement percentages so
every number can be recomputed.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from .exact import ConvergenceReport, FpConfig, run_fp
from .imputation import ImputerConfig
from .io import DemandPeak, SynthConfig, generate_synthetic
from .model import FleetInstance
from .policy import OccupancyMatrix, Policy, uniform_start_policy
from .simulation import SbrConfig, run_sbr, simulate, top_k_weighted_path, visitation_counts

__all__ = [
    "RevenueStats",
    "DayTask",
    "ExperimentPlan",
    "ResultTable",
    "evaluate_policy",
    "train_policy",
    "compare_methods",
    "best_policy_per_day",
    "occupancy_distance",
    "distance_vs_simulations",
    "synthetic_month",
    "build_day_tasks",
    "BASELINE_METHOD",
]

BASELINE_METHOD = "rigid"


@dataclass
class RevenueStats:
    """Per-agent revenue over repeated simulations of one policy."""

    mean: float
    std: float
    stderr: float
    rep_means: np.ndarray
    revenues: np.ndarray
    reps: int
    num_agents: int


def evaluate_policy(
    policy: Policy, instance: FleetInstance, reps: int, seed
) -> RevenueStats:
    """Simulate ``reps`` independent days and summarize per-agent revenue.

    Repetitions use distinct substreams of ``seed``. The standard error
    treats each repetition as one observation (agents within a day share
    congestion, so they are not independent).
    """
    if reps < 1:
        raise ValueError("reps must be >= 1")
    rep_means = np.empty(reps)
    all_revenues = []
    for r in range(reps):
        sub = np.random.SeedSequence(entropy=seed, spawn_key=(r,))
        trajectories, _ = simulate(policy, instance, sub)
        revs = np.array([tr.total_revenue for tr in trajectories])
        rep_means[r] = revs.mean()
        all_revenues.append(revs)
    pooled = np.concatenate(all_revenues)
    stderr = (
        float(rep_means.std(ddof=1) / np.sqrt(reps))
        if reps > 1
        else float(pooled.std(ddof=1) / np.sqrt(len(pooled)))
    )
    return RevenueStats(
        mean=float(pooled.mean()),
        std=float(pooled.std(ddof=1)) if len(pooled) > 1 else 0.0,
        stderr=stderr,
        rep_means=rep_means,
        revenues=pooled,
        reps=reps,
        num_agents=instance.num_agents,
    )


def train_policy(
    instance: FleetInstance,
    method: str,
    *,
    k: int = 500,
    epsilon: float = 1e-3,
    max_iters: int = 100,
    seed: int = 0,
    n_jobs: int = 1,
) -> tuple[Policy, ConvergenceReport]:
    """Train one policy by method name.

    ``rigid`` and ``exact`` run exact fictitious play (rigid-shift and
    flexible feasibility respectively); ``sbr:<imputer>`` runs the
    simulation-based loop with that completion method.
    """
    if method in (BASELINE_METHOD, "exact"):
        config = FpConfig(
            epsilon=epsilon,
            max_iters=max_iters,
            mode="rigid" if method == BASELINE_METHOD else "flexible",
        )
        return run_fp(instance, config)
    if method.startswith("sbr:"):
        imputer = ImputerConfig(method=method.split(":", 1)[1], seed=seed, n_jobs=n_jobs)
        config = SbrConfig(
            k=k, imputer=imputer, epsilon=epsilon, max_iters=max_iters, seed=seed
        )
        return run_sbr(instance, config)
    raise ValueError(f"unknown training method {method!r}")


@dataclass(frozen=True)
class DayTask:
    """One named day instance with its weekday/weekend class."""

    name: str
    day_class: str
    instance: FleetInstance


@dataclass
class ExperimentPlan:
    """Which policies to train and where to test them."""

    train_days: list[DayTask]
    test_days: list[DayTask]
    methods: list[str]
    reps: int = 5
    seed: int = 0
    k: int = 500
    epsilon: float = 1e-3
    max_iters: int = 25

    def __post_init__(self):
        train_names = {d.name for d in self.train_days}
        test_names = {d.name for d in self.test_days}
        clashes = train_names & test_names
        if clashes:
            raise ValueError(f"train and test days must be disjoint, shared: {sorted(clashes)}")


@dataclass
class ResultTable:
    """Raw per-cell revenues plus per-method aggregates.

    ``cells`` columns: method, train_day, test_day, test_class, mean,
    std, stderr, baseline_mean, improvement_pct (NaN and ``flagged`` when
    the baseline mean is not positive), train_seconds.
    """

    cells: pd.DataFrame
    aggregates: pd.DataFrame

    def to_csv(self, cells_path, aggregates_path) -> None:
        self.cells.to_csv(cells_path, index=False)
        self.aggregates.to_csv(aggregates_path, index=False)


def compare_methods(plan: ExperimentPlan) -> ResultTable:
    """Train every method on every training day, evaluate on matching test days.

    The baseline is the rigid-shift policy trained on the same day; it is
    trained even when absent from the plan's method list. Improvement
    percentages divide by the baseline mean and are flagged rather than
    divided when that mean is not positive.
    """
    methods = list(plan.methods)
    if BASELINE_METHOD not in methods:
        methods = [BASELINE_METHOD] + methods

    rows = []
    for train_day in plan.train_days:
        trained: dict[str, tuple[Policy, float]] = {}
        for method in methods:
            t0 = time.perf_counter()
            policy, _ = train_policy(
                train_day.instance,
                method,
                k=plan.k,
                epsilon=plan.epsilon,
                max_iters=plan.max_iters,
                seed=plan.seed,
            )
            trained[method] = (policy, time.perf_counter() - t0)
        for test_day in plan.test_days:
            if test_day.day_class != train_day.day_class:
                continue
            baseline_stats = None
            for method in methods:
                policy, train_secs = trained[method]
                stats = evaluate_policy(
                    policy, test_day.instance, plan.reps,
                    np.random.SeedSequence(entropy=plan.seed,
                                           spawn_key=_cell_key(train_day.name, test_day.name)),
                )
                if method == BASELINE_METHOD:
                    baseline_stats = stats
                base_mean = baseline_stats.mean
                flagged = base_mean <= 0
                improvement = (
                    float("nan") if flagged else 100.0 * (stats.mean - base_mean) / base_mean
                )
                rows.append(
                    {
                        "method": method,
                        "train_day": train_day.name,
                        "test_day": test_day.name,
                        "test_class": test_day.day_class,
                        "mean": stats.mean,
                        "std": stats.std,
                        "stderr": stats.stderr,
                        "baseline_mean": base_mean,
                        "improvement_pct": improvement,
                        "flagged": flagged,
                        "train_seconds": train_secs,
                    }
                )
    cells = pd.DataFrame(rows)
    aggregates = (
        cells.groupby("method")
        .agg(
            average_case=("improvement_pct", "mean"),
            best_case=("improvement_pct", "max"),
            worst_case=("improvement_pct", "min"),
            mean_revenue=("mean", "mean"),
            train_seconds=("train_seconds", "mean"),
        )
        .reset_index()
    )
    return ResultTable(cells=cells, aggregates=aggregates)


def _cell_key(train_name: str, test_name: str) -> tuple[int, ...]:
    # stable across processes (no built-in hash randomization)
    def enc(s: str) -> int:
        h = 0
        for ch in s:
            h = (h * 131 + ord(ch)) % (2**31 - 1)
        return h

    return (enc(train_name), enc(test_name))


def best_policy_per_day(table: ResultTable) -> dict[str, str]:
    """For each test day, the training day whose policies do best on average.

    Averages mean revenue over methods; ties go to the training day that
    appears first in the table.
    """
    cells = table.cells
    mapping: dict[str, str] = {}
    train_order = list(dict.fromkeys(cells["train_day"]))
    for test_day, group in cells.groupby("test_day", sort=False):
        perf = group.groupby("train_day")["mean"].mean()
        best = max(
            (day for day in train_order if day in perf.index),
            key=lambda day: (perf[day], -train_order.index(day)),
        )
        mapping[str(test_day)] = str(best)
    return mapping


def _as_mass(occ) -> np.ndarray:
    if isinstance(occ, OccupancyMatrix):
        mass = occ.mass if occ.mask is None else np.where(occ.mask, occ.mass, 0.0)
    else:
        mass = np.asarray(occ, dtype=float)
    return mass.reshape(-1)


def occupancy_distance(occ_a, occ_b, metric: str = "js") -> float:
    """Distance between two visitation measures normalized to unit mass.

    ``mad`` is the mean absolute cell difference; ``js`` is the
    Jensen-Shannon divergence in natural log (maximum ln 2), with
    0·log 0 = 0.
    """
    a, b = _as_mass(occ_a), _as_mass(occ_b)
    ta, tb = a.sum(), b.sum()
    if ta <= 0 or tb <= 0:
        raise ValueError("occupancy distance needs matrices with positive total mass")
    p, q = a / ta, b / tb
    if metric == "mad":
        return float(np.abs(p - q).mean())
    if metric == "js":
        m = 0.5 * (p + q)
        with np.errstate(divide="ignore", invalid="ignore"):
            kl_p = np.where(p > 0, p * np.log(p / m), 0.0).sum()
            kl_q = np.where(q > 0, q * np.log(q / m), 0.0).sum()
        return float(0.5 * (kl_p + kl_q))
    raise ValueError(f"unknown metric {metric!r}; use 'mad' or 'js'")


def distance_vs_simulations(
    policy: Policy,
    instance: FleetInstance,
    reference_trajectories,
    budgets: list[int],
    k: int,
    seed: int = 0,
) -> pd.DataFrame:
    """Occupancy distance to the top-k reference as simulation budget grows.

    For each budget (number of full-fleet simulations pooled into the
    empirical occupancy), reports both metrics for ``policy`` and, for
    comparison, for the fully random (uniform) policy.
    """
    reference = top_k_weighted_path(reference_trajectories, k, instance)
    random_policy = uniform_start_policy(instance)
    budgets = sorted(budgets)

    rows = []
    acc = {"policy": np.zeros(policy.prob.shape), "random": np.zeros(policy.prob.shape)}
    runs_done = 0
    for budget in budgets:
        for run in range(runs_done, budget):
            for label, pol in (("policy", policy), ("random", random_policy)):
                sub = np.random.SeedSequence(entropy=seed, spawn_key=(run, label == "random"))
                trajectories, _ = simulate(pol, instance, sub)
                acc[label] += visitation_counts(trajectories, instance)
        runs_done = budget
        rows.append(
            {
                "budget": budget,
                "policy_mad": occupancy_distance(acc["policy"], reference, "mad"),
                "policy_js": occupancy_distance(acc["policy"], reference, "js"),
                "random_mad": occupancy_distance(acc["random"], reference, "mad"),
                "random_js": occupancy_distance(acc["random"], reference, "js"),
            }
        )
    return pd.DataFrame(rows)


# ---------------------------------------------------------------------------
# synthetic month
# ---------------------------------------------------------------------------

_DAY_NAMES = ("mon", "tue", "wed", "thu", "fri", "sat", "sun")


def _archetype(base: SynthConfig, weekend: bool) -> SynthConfig:
    """Weekdays get commute peaks; weekends one broad midday bump."""
    Z, H = base.num_zones, base.horizon
    hub = Z // 3
    fringe = (2 * Z) // 3
    if weekend:
        peaks = (
            DemandPeak(time=H * 0.55, zone=hub, intensity=3.0,
                       time_width=H * 0.16, zone_radius=3.0),
        )
    else:
        peaks = (
            DemandPeak(time=H * 0.2, zone=hub, intensity=4.0,
                       time_width=H * 0.07, zone_radius=2.0),
            DemandPeak(time=H * 0.75, zone=fringe, intensity=3.5,
                       time_width=H * 0.08, zone_radius=2.5),
        )
    return replace(base, peaks=peaks)


def synthetic_month(
    base: SynthConfig, num_days: int = 28
) -> list[tuple[str, str, SynthConfig]]:
    """Day configs for a month: (name, class, config) per day.

    Days cycle mon..sun; Saturdays and Sundays use the weekend demand
    archetype. Per-day noise enters through the seed and a mild intensity
    wobble, so connected weekdays are similar but not identical.
    """
    rng = np.random.default_rng(base.seed)
    days = []
    for d in range(num_days):
        dow = d % 7
        weekend = dow >= 5
        name = f"week{d // 7 + 1}_{_DAY_NAMES[dow]}"
        cfg = _archetype(base, weekend)
        wobble = float(rng.uniform(0.9, 1.1))
        cfg = replace(
            cfg,
            base_intensity=base.base_intensity * wobble,
            seed=base.seed + 1009 * (d + 1),
        )
        days.append((name, "weekend" if weekend else "weekday", cfg))
    return days


def build_day_tasks(configs: list[tuple[str, str, SynthConfig]]) -> list[DayTask]:
    """Materialize instances for (name, class, config) triples."""
    return [
        DayTask(name=name, day_class=klass, instance=generate_synthetic(cfg)[0])
        for name, klass, cfg in configs
    ]

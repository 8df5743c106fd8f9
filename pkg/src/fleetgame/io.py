"""Loading, saving and generating fleet-game instances.

Instance files are a self-describing text container: a JSON header line
with dimensions and row counts, a CSV column line, then sparse
``tensor,t,src,dst,value`` rows for the flow/fare/cost tensors (absent
cells are zero). A ``.gz`` suffix selects transparent gzip compression.
Values are written with 17 significant digits so round trips are
bit-exact.

Policies and occupancy matrices use the same header-plus-indexed-values
idea with ``t,s,n,b,a,value`` rows; a ``.npz`` suffix stores the tensors
in binary instead, which is the sensible choice at fleet scale. Masked
occupancy cells are encoded as explicit NaN either way.
"""

from __future__ import annotations

import gzip
import json
import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .model import FleetInstance, validate_instance
from .policy import OccupancyMatrix, Policy

__all__ = [
    "TripRecord",
    "SynthConfig",
    "DemandPeak",
    "FileFormatError",
    "UnsupportedVersionError",
    "build_flows",
    "generate_synthetic",
    "save_instance",
    "load_instance",
    "save_policy",
    "load_policy",
    "save_occupancy",
    "load_occupancy",
    "zone_grid_distance",
]

FORMAT_VERSION = 1


class FileFormatError(ValueError):
    """Malformed container file (bad header, truncated or unparsable rows)."""


class UnsupportedVersionError(FileFormatError):
    """Container carries a version this code does not read."""


@dataclass(frozen=True)
class TripRecord:
    """One customer trip; times are minutes from the start of the day."""

    pickup_time: float
    dropoff_time: float
    pickup_zone: int
    dropoff_zone: int
    fare: float


@dataclass(frozen=True)
class DemandPeak:
    """A demand bump centered at (time step, zone), in step/grid-hop units."""

    time: float
    zone: int
    intensity: float
    time_width: float = 4.0
    zone_radius: float = 2.0


@dataclass(frozen=True)
class SynthConfig:
    """Reproducible synthetic day; same seed gives a byte-identical instance."""

    num_zones: int = 100
    horizon: int = 48
    num_agents: int = 20000
    step_minutes: float = 30.0
    peaks: tuple = ()
    base_intensity: float = 1.0
    trips_per_day: float | None = None
    dest_spread: float = 3.0
    fare_base: float = 4.0
    fare_per_hop: float = 1.5
    cost_per_hop: float = 0.4
    speed_minutes_per_hop: float = 6.0
    max_hours: int = 20
    max_breaks: int = 2
    seed: int = 0


def zone_grid_distance(num_zones: int) -> np.ndarray:
    """Manhattan distances between zones laid out on a near-square grid."""
    side = math.ceil(math.sqrt(num_zones))
    idx = np.arange(num_zones)
    x, y = idx % side, idx // side
    return np.abs(x[:, None] - x[None, :]) + np.abs(y[:, None] - y[None, :])


def build_flows(
    trips: list[TripRecord],
    num_zones: int,
    horizon: int,
    step_minutes: float,
    *,
    num_agents: int = 1,
    max_hours: int | None = None,
    max_breaks: int = 0,
    cost: np.ndarray | None = None,
) -> FleetInstance:
    """Aggregate raw trips into a game instance.

    A trip lands in the time bucket of its pickup (trips are not split
    across buckets); fares are averaged per ``(t, src, dst)``. Trips with
    out-of-range zones or times, or with dropoff before pickup, are
    rejected; accepted/rejected counts are reported in the instance
    metadata.
    """
    Z, H = num_zones, horizon
    flow = np.zeros((H, Z + 1, Z + 1))
    fare_sum = np.zeros((H, Z + 1, Z + 1))
    rejected = 0
    span = H * step_minutes
    for trip in trips:
        ok = (
            0 <= trip.pickup_zone < Z
            and 0 <= trip.dropoff_zone < Z
            and 0.0 <= trip.pickup_time < span
            and trip.dropoff_time >= trip.pickup_time
        )
        if not ok:
            rejected += 1
            continue
        t = int(trip.pickup_time // step_minutes)
        flow[t, trip.pickup_zone, trip.dropoff_zone] += 1.0
        fare_sum[t, trip.pickup_zone, trip.dropoff_zone] += trip.fare
    with np.errstate(invalid="ignore", divide="ignore"):
        fare = np.where(flow > 0, fare_sum / np.where(flow > 0, flow, 1.0), 0.0)
    if cost is None:
        cost = np.zeros((H, Z + 1, Z + 1))
    accepted = int(flow.sum())
    return FleetInstance(
        num_zones=Z,
        horizon=H,
        flow=flow,
        fare=fare,
        cost=cost,
        num_agents=num_agents,
        max_hours=H if max_hours is None else max_hours,
        max_breaks=max_breaks,
        metadata={
            "step_minutes": step_minutes,
            "accepted_trips": accepted,
            "rejected_trips": rejected,
        },
    )


def _demand_rates(config: SynthConfig) -> np.ndarray:
    """Poisson rates per (t, src, dst) implied by the config's peaks."""
    Z, H = config.num_zones, config.horizon
    dist = zone_grid_distance(Z)
    t = np.arange(H, dtype=float)
    origin = np.full((H, Z), float(config.base_intensity))
    for peak in config.peaks:
        t_bump = np.exp(-0.5 * ((t - peak.time) / max(peak.time_width, 1e-9)) ** 2)
        z_bump = np.exp(-0.5 * (dist[peak.zone] / max(peak.zone_radius, 1e-9)) ** 2)
        origin += peak.intensity * t_bump[:, None] * z_bump[None, :]
    dest = np.exp(-dist / max(config.dest_spread, 1e-9))
    np.fill_diagonal(dest, 0.0)  # customers travel between distinct zones
    row_tot = dest.sum(axis=1, keepdims=True)
    dest = np.divide(dest, row_tot, out=np.zeros_like(dest), where=row_tot > 0)
    rates = origin[:, :, None] * dest[None, :, :]
    if config.trips_per_day is not None and rates.sum() > 0:
        rates *= config.trips_per_day / rates.sum()
    return rates


def generate_synthetic(config: SynthConfig) -> tuple[FleetInstance, list[TripRecord]]:
    """Draw a synthetic day of trips and the instance they aggregate to.

    Deterministic in ``config.seed``; re-aggregating the returned trips
    with :func:`build_flows` reproduces the returned instance exactly.
    """
    Z, H = config.num_zones, config.horizon
    rng = np.random.default_rng(config.seed)
    rates = _demand_rates(config)
    counts = rng.poisson(rates)

    dist = zone_grid_distance(Z)
    occupied = np.argwhere(counts > 0)
    trips: list[TripRecord] = []
    for t, i, j in occupied:
        c = int(counts[t, i, j])
        offsets = np.sort(rng.random(c)) * config.step_minutes
        hop = float(dist[i, j])
        fare = config.fare_base + config.fare_per_hop * hop
        travel = config.speed_minutes_per_hop * hop
        for off in offsets:
            pickup = t * config.step_minutes + float(off)
            trips.append(TripRecord(pickup, pickup + travel, int(i), int(j), fare))

    cost = np.zeros((H, Z + 1, Z + 1))
    cost[:, :Z, :Z] = config.cost_per_hop * dist[None, :, :]
    instance = build_flows(
        trips,
        Z,
        H,
        config.step_minutes,
        num_agents=config.num_agents,
        max_hours=config.max_hours,
        max_breaks=config.max_breaks,
        cost=cost,
    )
    instance.metadata["seed"] = config.seed
    return instance, trips


# ---------------------------------------------------------------------------
# container files
# ---------------------------------------------------------------------------

_TENSOR_NAMES = ("flow", "fare", "cost")


def _open_text(path, mode: str):
    path = str(path)
    if path.endswith(".gz"):
        return gzip.open(path, mode + "t")
    return open(path, mode)


def _read_header(handle, expected_format: str) -> dict:
    line = handle.readline()
    try:
        header = json.loads(line)
    except json.JSONDecodeError as exc:
        raise FileFormatError(f"header line is not valid JSON: {exc}") from exc
    if header.get("format") != expected_format:
        raise FileFormatError(
            f"expected a {expected_format!r} file, got {header.get('format')!r}"
        )
    if header.get("version") != FORMAT_VERSION:
        raise UnsupportedVersionError(
            f"unsupported {expected_format} version {header.get('version')!r}; "
            f"this build reads version {FORMAT_VERSION}"
        )
    return header


def save_instance(instance: FleetInstance, path) -> None:
    """Write the instance container; ``.gz`` suffix compresses it."""
    frames = []
    for name in _TENSOR_NAMES:
        arr = getattr(instance, name)
        t, i, j = np.nonzero(arr)
        frames.append(
            pd.DataFrame(
                {"tensor": name, "t": t, "src": i, "dst": j, "value": arr[t, i, j]}
            )
        )
    rows = pd.concat(frames, ignore_index=True)
    header = {
        "format": "fleetgame-instance",
        "version": FORMAT_VERSION,
        "num_zones": instance.num_zones,
        "horizon": instance.horizon,
        "num_agents": instance.num_agents,
        "max_hours": instance.max_hours,
        "max_breaks": instance.max_breaks,
        "metadata": instance.metadata,
        "rows": {name: int((rows["tensor"] == name).sum()) for name in _TENSOR_NAMES},
    }
    with _open_text(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        rows.to_csv(fh, index=False, float_format="%.17g")


def load_instance(path) -> FleetInstance:
    """Read an instance container; raises :class:`FileFormatError` on damage."""
    with _open_text(path, "r") as fh:
        header = _read_header(fh, "fleetgame-instance")
        try:
            rows = pd.read_csv(fh)
        except Exception as exc:
            raise FileFormatError(f"could not parse tensor rows: {exc}") from exc
    try:
        Z = int(header["num_zones"])
        H = int(header["horizon"])
        counts = header["rows"]
    except KeyError as exc:
        raise FileFormatError(f"header is missing field {exc}") from exc
    expected_cols = ["tensor", "t", "src", "dst", "value"]
    if list(rows.columns) != expected_cols:
        raise FileFormatError(f"expected columns {expected_cols}, got {list(rows.columns)}")

    tensors = {}
    for name in _TENSOR_NAMES:
        block = rows[rows["tensor"] == name]
        if len(block) != counts.get(name, 0):
            raise FileFormatError(
                f"tensor {name!r}: header promises {counts.get(name, 0)} rows, "
                f"file holds {len(block)} (truncated or corrupt)"
            )
        arr = np.zeros((H, Z + 1, Z + 1))
        t = block["t"].to_numpy(dtype=int)
        i = block["src"].to_numpy(dtype=int)
        j = block["dst"].to_numpy(dtype=int)
        if len(block) and (
            (t < 0).any() or (t >= H).any()
            or (i < 0).any() or (i > Z).any()
            or (j < 0).any() or (j > Z).any()
        ):
            raise FileFormatError(f"tensor {name!r} has indices outside the header dimensions")
        arr[t, i, j] = block["value"].to_numpy(dtype=float)
        tensors[name] = arr

    instance = FleetInstance(
        num_zones=Z,
        horizon=H,
        flow=tensors["flow"],
        fare=tensors["fare"],
        cost=tensors["cost"],
        num_agents=int(header["num_agents"]),
        max_hours=int(header["max_hours"]),
        max_breaks=int(header["max_breaks"]),
        metadata=dict(header.get("metadata", {})),
    )
    problems = validate_instance(instance)
    if problems:
        raise FileFormatError(f"instance fails validation: {problems[0]}")
    return instance


def _save_cells(path, header: dict, values: np.ndarray, dense: bool) -> None:
    with _open_text(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        if dense:
            idx = np.indices(values.shape).reshape(5, -1)
            vals = values.reshape(-1)
        else:
            idx = np.array(np.nonzero(values))
            vals = values[tuple(idx)]
        frame = pd.DataFrame(
            {
                "t": idx[0],
                "s": idx[1],
                "n": idx[2],
                "b": idx[3],
                "a": idx[4],
                "value": vals,
            }
        )
        frame.to_csv(fh, index=False, float_format="%.17g")


def _load_cells(path, expected_format: str) -> tuple[dict, np.ndarray]:
    with _open_text(path, "r") as fh:
        header = _read_header(fh, expected_format)
        rows = pd.read_csv(fh)
    shape = tuple(int(x) for x in header["shape"])
    if len(rows) != int(header["rows"]):
        raise FileFormatError(
            f"header promises {header['rows']} rows, file holds {len(rows)}"
        )
    fill = math.nan if header.get("dense") else 0.0
    values = np.full(shape, fill)
    idx = tuple(rows[c].to_numpy(dtype=int) for c in ("t", "s", "n", "b", "a"))
    for axis, ind in enumerate(idx):
        if len(rows) and ((ind < 0).any() or (ind >= shape[axis]).any()):
            raise FileFormatError("cell indices outside the header shape")
    values[idx] = rows["value"].to_numpy(dtype=float)
    return header, values


def save_policy(policy: Policy, path) -> None:
    path = str(path)
    header = {
        "format": "fleetgame-policy",
        "version": FORMAT_VERSION,
        "shape": list(policy.prob.shape),
    }
    if path.endswith(".npz"):
        np.savez_compressed(path, header=json.dumps(header), prob=policy.prob)
        return
    header["rows"] = int(np.count_nonzero(policy.prob))
    _save_cells(path, header, policy.prob, dense=False)


def load_policy(path) -> Policy:
    path = str(path)
    if path.endswith(".npz"):
        with np.load(path, allow_pickle=False) as data:
            header = json.loads(str(data["header"]))
            if header.get("format") != "fleetgame-policy":
                raise FileFormatError(f"not a policy file: {header.get('format')!r}")
            if header.get("version") != FORMAT_VERSION:
                raise UnsupportedVersionError(
                    f"unsupported policy version {header.get('version')!r}"
                )
            return Policy(np.asarray(data["prob"], dtype=float))
    _, values = _load_cells(path, "fleetgame-policy")
    return Policy(values)


def save_occupancy(occ: OccupancyMatrix, path) -> None:
    """Masked (unvisited) cells are written as explicit NaN."""
    path = str(path)
    complete = occ.mask is None
    mass = occ.mass if complete else np.where(occ.mask, occ.mass, math.nan)
    header = {
        "format": "fleetgame-occupancy",
        "version": FORMAT_VERSION,
        "shape": list(occ.mass.shape),
        "complete": complete,
    }
    if path.endswith(".npz"):
        np.savez_compressed(path, header=json.dumps(header), mass=mass)
        return
    header["dense"] = not complete
    header["rows"] = int(mass.size if not complete else np.count_nonzero(mass))
    _save_cells(path, header, mass, dense=not complete)


def load_occupancy(path) -> OccupancyMatrix:
    path = str(path)
    if path.endswith(".npz"):
        with np.load(path, allow_pickle=False) as data:
            header = json.loads(str(data["header"]))
            if header.get("format") != "fleetgame-occupancy":
                raise FileFormatError(f"not an occupancy file: {header.get('format')!r}")
            if header.get("version") != FORMAT_VERSION:
                raise UnsupportedVersionError(
                    f"unsupported occupancy version {header.get('version')!r}"
                )
            mass = np.asarray(data["mass"], dtype=float)
            complete = bool(header.get("complete", True))
    else:
        header, mass = _load_cells(path, "fleetgame-occupancy")
        complete = bool(header.get("complete", True))
    if complete:
        return OccupancyMatrix(mass=mass, mask=None)
    mask = ~np.isnan(mass)
    return OccupancyMatrix(mass=np.where(mask, mass, 0.0), mask=mask)

"""Build city matrices from trip-record CSVs or from a seeded synthetic city.

CSV ingestion bins trips into hex zones and time slices, averages the observed
rewards and travel times per cell, and fills the unobserved cells with an
additive fixed-effects model (global mean + origin + destination + time-of-day
effects, fit by least squares on the observed cells).  The synthetic generator
replaces proprietary data at desk scale: Poisson demand around a base rate,
optionally modulated by Gaussian-in-time hotspots.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from datetime import datetime

import numpy as np

from .city import CityMatrices, HexGrid, Scenario
from .errors import DataError

MILES_PER_DEGREE = 69.172

# NYC TLC 2015 yellow-taxi column names; override via the mapping argument.
DEFAULT_COLUMNS = {
    "pickup_time": "tpep_pickup_datetime",
    "dropoff_time": "tpep_dropoff_datetime",
    "pickup_lon": "pickup_longitude",
    "pickup_lat": "pickup_latitude",
    "dropoff_lon": "dropoff_longitude",
    "dropoff_lat": "dropoff_latitude",
    "fare": "fare_amount",
    "distance": "trip_distance",
}


@dataclass
class TripRecord:
    pickup_time: datetime
    dropoff_time: datetime
    pickup_lon: float
    pickup_lat: float
    dropoff_lon: float
    dropoff_lat: float
    fare: float
    distance: float


@dataclass
class GeoConfig:
    """Bounding box and zone size used to map lon/lat onto the hex grid."""

    lon_min: float
    lat_min: float
    lon_max: float
    lat_max: float
    zone_radius_miles: float = 1.0  # center-to-vertex, per the usual binning
    cost_per_mile: float = 0.0

    @property
    def center(self):
        return (self.lon_min + self.lon_max) / 2, (self.lat_min + self.lat_max) / 2

    def contains(self, lon, lat):
        return self.lon_min <= lon <= self.lon_max and self.lat_min <= lat <= self.lat_max

    def project_miles(self, lon, lat):
        """Equirectangular projection around the bounding-box center."""
        lon0, lat0 = self.center
        x = (lon - lon0) * math.cos(math.radians(lat0)) * MILES_PER_DEGREE
        y = (lat - lat0) * MILES_PER_DEGREE
        return x, y

    def axial(self, lon, lat):
        """Nearest pointy-top hex center, in axial coordinates."""
        x, y = self.project_miles(lon, lat)
        size = self.zone_radius_miles
        qf = (math.sqrt(3) / 3 * x - y / 3) / size
        rf = (2 / 3 * y) / size
        return _axial_round(qf, rf)

    @property
    def hop_miles(self):
        """Center-to-center spacing of adjacent hexes."""
        return math.sqrt(3) * self.zone_radius_miles


def _axial_round(qf: float, rf: float) -> tuple[int, int]:
    sf = -qf - rf
    q, r, s = round(qf), round(rf), round(sf)
    dq, dr, ds = abs(q - qf), abs(r - rf), abs(s - sf)
    if dq > dr and dq > ds:
        q = -r - s
    elif dr > ds:
        r = -q - s
    return int(q), int(r)


def read_trip_csv(path, columns: dict | None = None) -> list[TripRecord]:
    """Parse a trip CSV with a header row; rows that fail to parse are dropped."""
    cols = dict(DEFAULT_COLUMNS)
    if columns:
        cols.update(columns)
    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataError(f"{path}: missing CSV header")
        missing = [c for c in cols.values() if c not in reader.fieldnames]
        if missing:
            raise DataError(f"{path}: missing columns {missing}")
        for row in reader:
            try:
                records.append(
                    TripRecord(
                        pickup_time=_parse_time(row[cols["pickup_time"]]),
                        dropoff_time=_parse_time(row[cols["dropoff_time"]]),
                        pickup_lon=float(row[cols["pickup_lon"]]),
                        pickup_lat=float(row[cols["pickup_lat"]]),
                        dropoff_lon=float(row[cols["dropoff_lon"]]),
                        dropoff_lat=float(row[cols["dropoff_lat"]]),
                        fare=float(row[cols["fare"]]),
                        distance=float(row[cols["distance"]]),
                    )
                )
            except (ValueError, KeyError):
                continue
    return records


def _parse_time(text: str) -> datetime:
    return datetime.fromisoformat(text.strip())


@dataclass
class BinStats:
    retained: int = 0
    dropped_same_zone: int = 0
    skipped_out_of_bounds: int = 0
    skipped_bad_time: int = 0


@dataclass
class BinnedMatrices:
    """Per-cell counts and observed means; travel/reward cells may be missing."""

    demand: np.ndarray          # (T, m, m) int
    travel_time: np.ndarray     # (T, m, m) int, valid only where observed
    reward: np.ndarray          # (T, m, m) float, valid only where observed
    relocation_cost: np.ndarray  # (T, m, m) float, dense (geometric)
    observed: np.ndarray        # (T, m, m) bool
    stats: BinStats = field(default_factory=BinStats)


def bin_trips(
    records: list[TripRecord],
    grid: HexGrid,
    slice_minutes: int,
    geo: GeoConfig,
) -> BinnedMatrices:
    """Count trips per (slice, origin, destination) and average reward/time.

    Same-zone trips are dropped (short hops below the zone size), out-of-box
    pickups or dropoffs are skipped and counted.  Travel time is the ceiling
    of the mean duration in whole slices, never below 1.
    """
    if 1440 % slice_minutes != 0:
        raise DataError("slice_minutes must divide 1440")
    T = 1440 // slice_minutes
    m = grid.m
    demand = np.zeros((T, m, m), dtype=np.int64)
    reward_sum = np.zeros((T, m, m))
    minutes_sum = np.zeros((T, m, m))
    count = np.zeros((T, m, m), dtype=np.int64)
    stats = BinStats()

    for rec in records:
        if not (
            geo.contains(rec.pickup_lon, rec.pickup_lat)
            and geo.contains(rec.dropoff_lon, rec.dropoff_lat)
        ):
            stats.skipped_out_of_bounds += 1
            continue
        origin = grid.zone_at(*geo.axial(rec.pickup_lon, rec.pickup_lat))
        dest = grid.zone_at(*geo.axial(rec.dropoff_lon, rec.dropoff_lat))
        if origin is None or dest is None:
            stats.skipped_out_of_bounds += 1
            continue
        duration_min = (rec.dropoff_time - rec.pickup_time).total_seconds() / 60.0
        if duration_min <= 0:
            stats.skipped_bad_time += 1
            continue
        if origin == dest:
            stats.dropped_same_zone += 1
            continue
        t = (rec.pickup_time.hour * 60 + rec.pickup_time.minute) // slice_minutes
        demand[t, origin, dest] += 1
        reward_sum[t, origin, dest] += rec.fare - geo.cost_per_mile * rec.distance
        minutes_sum[t, origin, dest] += duration_min
        count[t, origin, dest] += 1
        stats.retained += 1

    observed = count > 0
    reward = np.zeros((T, m, m))
    travel = np.zeros((T, m, m), dtype=np.int64)
    with np.errstate(invalid="ignore"):
        reward[observed] = reward_sum[observed] / count[observed]
        mean_minutes = minutes_sum[observed] / count[observed]
    travel[observed] = np.maximum(
        1, np.ceil(mean_minutes / slice_minutes).astype(np.int64)
    )

    cost = _geometric_cost(grid, geo, T)
    return BinnedMatrices(demand, travel, reward, cost, observed, stats)


def _geometric_cost(grid: HexGrid, geo: GeoConfig, T: int) -> np.ndarray:
    m = grid.m
    hops = np.zeros((m, m))
    for a in range(m):
        for b in range(m):
            hops[a, b] = grid.distance(a, b)
    per_step = geo.cost_per_mile * geo.hop_miles * hops
    return np.broadcast_to(per_step, (T, m, m)).copy()


def fit_additive_effects(values: np.ndarray, observed: np.ndarray, tol: float = 1e-9):
    """Least-squares additive model mean + time + origin + destination effects.

    Fit by iterative mean-centering (blockwise coordinate descent on the
    additive least-squares objective), which converges to the least-squares
    predictions; groups with no observations keep a zero effect, i.e. fall
    back to the global mean plus the remaining effects.
    """
    if not observed.any():
        raise DataError("cannot impute with zero observed cells")
    T, m, _ = values.shape
    y = np.where(observed, values.astype(np.float64), 0.0)
    w = observed.astype(np.float64)
    mu = y[observed].mean()
    at = np.zeros(T)
    bi = np.zeros(m)
    cj = np.zeros(m)
    t_counts = w.sum(axis=(1, 2))
    i_counts = w.sum(axis=(0, 2))
    j_counts = w.sum(axis=(0, 1))
    for _ in range(10_000):
        pred = mu + at[:, None, None] + bi[None, :, None] + cj[None, None, :]
        resid = (y - pred) * w
        shift = resid.sum() / w.sum()
        mu += shift
        resid -= shift * w
        dt = np.divide(
            resid.sum(axis=(1, 2)), t_counts, out=np.zeros(T), where=t_counts > 0
        )
        at += dt
        resid -= dt[:, None, None] * w
        di = np.divide(
            resid.sum(axis=(0, 2)), i_counts, out=np.zeros(m), where=i_counts > 0
        )
        bi += di
        resid -= di[None, :, None] * w
        dj = np.divide(
            resid.sum(axis=(0, 1)), j_counts, out=np.zeros(m), where=j_counts > 0
        )
        cj += dj
        moved = max(
            abs(shift), np.abs(dt).max(initial=0), np.abs(di).max(initial=0),
            np.abs(dj).max(initial=0),
        )
        if moved <= tol:
            break
    return mu + at[:, None, None] + bi[None, :, None] + cj[None, None, :]


def impute_fixed_effects(binned: BinnedMatrices) -> CityMatrices:
    """Fill every unobserved travel-time and reward cell; observed cells keep
    their measured values.  Travel-time predictions are rounded and clamped
    to at least one timestep."""
    observed = binned.observed
    reward_pred = fit_additive_effects(binned.reward, observed)
    travel_pred = fit_additive_effects(binned.travel_time.astype(np.float64), observed)

    reward = np.where(observed, binned.reward, reward_pred)
    travel = np.where(
        observed,
        binned.travel_time,
        np.maximum(1, np.rint(travel_pred)).astype(np.int64),
    )
    return CityMatrices(
        demand=binned.demand,
        travel_time=travel.astype(np.int64),
        reward=reward,
        relocation_cost=binned.relocation_cost,
    ).validate()


@dataclass(frozen=True)
class Hotspot:
    """Extra demand originating at one zone, peaking at one time of day."""

    zone: int
    peak_time: int
    amplitude: float     # extra expected rides per timestep at the peak
    width: float = 3.0   # Gaussian width in timesteps

    def rate(self, t: np.ndarray) -> np.ndarray:
        return self.amplitude * np.exp(-((t - self.peak_time) ** 2) / (2 * self.width**2))


@dataclass
class SyntheticCityParams:
    radius: int
    horizon: int
    base_rate: float = 0.1   # expected rides per (t, origin, destination) cell
    hotspots: tuple[Hotspot, ...] = ()
    fare_per_hop: float = 2.0
    cost_per_hop: float = 0.5
    slice_minutes: int = 5
    seed: int = 0

    def validate(self):
        if self.radius < 0 or self.horizon < 1:
            raise DataError("radius must be >= 0 and horizon >= 1")
        if self.base_rate < 0:
            raise DataError("base_rate must be >= 0")
        for hs in self.hotspots:
            if hs.amplitude < 0:
                raise DataError("hotspot amplitudes must be >= 0")
        return self


def generate_synthetic_city(params: SyntheticCityParams) -> Scenario:
    """Deterministic synthetic city: Poisson demand, hop-proportional economics.

    Demand per off-diagonal cell is Poisson around the base rate plus the
    origin's hotspot bump spread uniformly over destinations; travel time is
    the hex distance (at least 1); trip reward and relocation cost scale with
    hop count.
    """
    params.validate()
    grid = HexGrid.hexagon(params.radius)
    m, T = grid.m, params.horizon
    rng = np.random.default_rng(params.seed)

    hops = np.zeros((m, m))
    for a in range(m):
        for b in range(m):
            hops[a, b] = grid.distance(a, b)

    rates = np.full((T, m, m), params.base_rate, dtype=np.float64)
    t_axis = np.arange(T, dtype=np.float64)
    spread = max(m - 1, 1)
    for hs in params.hotspots:
        if not 0 <= hs.zone < m:
            raise DataError(f"hotspot zone {hs.zone} outside grid of {m} zones")
        rates[:, hs.zone, :] += (hs.rate(t_axis) / spread)[:, None]
    diag = np.arange(m)
    rates[:, diag, diag] = 0.0

    demand = rng.poisson(rates).astype(np.int64)
    demand[:, diag, diag] = 0

    travel = np.maximum(hops, 1).astype(np.int64)
    reward = (params.fare_per_hop - params.cost_per_hop) * hops
    cost = params.cost_per_hop * hops
    matrices = CityMatrices(
        demand=demand,
        travel_time=np.broadcast_to(travel, (T, m, m)).copy(),
        reward=np.broadcast_to(reward, (T, m, m)).copy(),
        relocation_cost=np.broadcast_to(cost, (T, m, m)).copy(),
    ).validate()
    return Scenario(grid, matrices, params.slice_minutes)

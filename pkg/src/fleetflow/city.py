"""Hex-gridded city model: zones, travel geometry, and time-varying city matrices.

Zones are hexagons addressed by axial coordinates (q, r); a zone id is the
index of its coordinate pair in the grid's coordinate list.  Time advances in
discrete steps; all arrays are indexed ``[t, origin, destination]`` with t in
``0..T-1``.  Everything here is immutable after construction and safe to share
across workers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError

SCENARIO_FORMAT_VERSION = 1

# Pointy-top axial neighbour offsets, clockwise from east.
AXIAL_DIRECTIONS = ((1, 0), (1, -1), (0, -1), (-1, 0), (-1, 1), (0, 1))

WAIT = "wait"
RELOCATE = "relocate"


@dataclass(frozen=True)
class Action:
    """A single driver decision: wait in place or relocate empty."""

    kind: str
    origin: int
    destination: int

    def __post_init__(self):
        if self.kind not in (WAIT, RELOCATE):
            raise DataError(f"unknown action kind {self.kind!r}")
        if self.kind == WAIT and self.origin != self.destination:
            raise DataError("wait action must keep origin == destination")
        if self.kind == RELOCATE and self.origin == self.destination:
            raise DataError("relocate action must change zones")

    @classmethod
    def to(cls, origin: int, destination: int) -> "Action":
        """Build the action implied by a destination choice (origin -> wait)."""
        kind = WAIT if origin == destination else RELOCATE
        return cls(kind, origin, destination)


class HexGrid:
    """A fixed set of hexagonal zones in axial coordinates.

    ``coords[i]`` is the (q, r) pair of zone ``i``; the grid also caches the
    rings around each zone (zones grouped by hex distance) because both the
    exploration kernel and the naive-driver heuristic sample from them.
    """

    def __init__(self, coords):
        coords = [(int(q), int(r)) for q, r in coords]
        if not coords:
            raise DataError("grid needs at least one zone")
        if len(set(coords)) != len(coords):
            raise DataError("grid coordinates must be distinct")
        self.coords = tuple(coords)
        self._index = {c: i for i, c in enumerate(self.coords)}
        self._rings: dict[int, tuple[tuple[int, ...], ...]] = {}

    @classmethod
    def hexagon(cls, radius: int) -> "HexGrid":
        """Filled hexagon of the given radius: m = 3*radius^2 + 3*radius + 1."""
        if radius < 0:
            raise DataError("radius must be >= 0")
        coords = [
            (q, r)
            for q in range(-radius, radius + 1)
            for r in range(-radius, radius + 1)
            if abs(q + r) <= radius
        ]
        return cls(sorted(coords))

    @property
    def m(self) -> int:
        return len(self.coords)

    def __len__(self) -> int:
        return len(self.coords)

    def zone_at(self, q: int, r: int):
        """Zone id for an axial coordinate, or None if outside the grid."""
        return self._index.get((q, r))

    def _check(self, zone: int) -> int:
        if not 0 <= zone < self.m:
            raise DataError(f"zone index {zone} outside [0, {self.m})")
        return zone

    def distance(self, a: int, b: int) -> int:
        """Hex distance between two zones (number of adjacent-hex hops)."""
        qa, ra = self.coords[self._check(a)]
        qb, rb = self.coords[self._check(b)]
        dq, dr = qa - qb, ra - rb
        return (abs(dq) + abs(dr) + abs(dq + dr)) // 2

    def rings(self, zone: int) -> tuple[tuple[int, ...], ...]:
        """Zones grouped by distance from ``zone``; entry k is the ring at k."""
        zone = self._check(zone)
        cached = self._rings.get(zone)
        if cached is None:
            by_dist: dict[int, list[int]] = {}
            for other in range(self.m):
                by_dist.setdefault(self.distance(zone, other), []).append(other)
            cached = tuple(
                tuple(by_dist.get(k, ())) for k in range(max(by_dist) + 1)
            )
            self._rings[zone] = cached
        return cached

    def zones_at_distance(self, zone: int, k: int) -> tuple[int, ...]:
        """The exact set of zones at hex distance k (possibly empty)."""
        if k < 0:
            raise DataError("distance must be >= 0")
        rings = self.rings(zone)
        return rings[k] if k < len(rings) else ()


@dataclass
class CityMatrices:
    """Time-varying city data: demand, travel time, trip reward, relocation cost.

    All arrays are (T, m, m).  ``demand[t, h, g]`` counts ride requests from h
    to g at step t (zero diagonal); ``travel_time`` is in whole timesteps, at
    least 1 off-diagonal; ``reward`` is the net payout for carrying a passenger;
    ``relocation_cost`` is what an empty relocation costs the driver.
    """

    demand: np.ndarray
    travel_time: np.ndarray
    reward: np.ndarray
    relocation_cost: np.ndarray

    @property
    def horizon(self) -> int:
        return self.demand.shape[0]

    @property
    def m(self) -> int:
        return self.demand.shape[1]

    def validate(self) -> "CityMatrices":
        shape = self.demand.shape
        if len(shape) != 3 or shape[1] != shape[2]:
            raise DataError(f"demand must be (T, m, m), got {shape}")
        for name in ("travel_time", "reward", "relocation_cost"):
            arr = getattr(self, name)
            if arr.shape != shape:
                raise DataError(f"{name} shape {arr.shape} != demand shape {shape}")
        T, m, _ = shape
        diag = np.arange(m)
        if np.any(self.demand < 0):
            raise DataError("demand must be nonnegative")
        if np.any(self.demand[:, diag, diag] != 0):
            raise DataError("demand diagonal must be zero (no same-zone rides)")
        off = ~np.eye(m, dtype=bool)
        if np.any(self.travel_time[:, off] < 1):
            raise DataError("off-diagonal travel times must be >= 1 timestep")
        if np.any(self.relocation_cost < 0):
            raise DataError("relocation costs must be nonnegative")
        if np.any(self.relocation_cost[:, diag, diag] != 0):
            raise DataError("relocation cost diagonal must be zero")
        if not np.all(np.isfinite(self.reward)):
            raise DataError("rewards must be finite")
        return self

    def demand_out(self) -> np.ndarray:
        """Total outgoing requests per (t, zone): sum over destinations."""
        return self.demand.sum(axis=2)


@dataclass
class Scenario:
    """A grid plus its matrices plus the wall-clock meaning of one timestep."""

    grid: HexGrid
    matrices: CityMatrices
    slice_minutes: int = 5

    def validate(self) -> "Scenario":
        self.matrices.validate()
        if self.matrices.m != self.grid.m:
            raise DataError(
                f"matrices cover {self.matrices.m} zones, grid has {self.grid.m}"
            )
        if self.slice_minutes < 1:
            raise DataError("slice_minutes must be >= 1")
        return self

    def save(self, path) -> None:
        mats = self.matrices
        doc = {
            "format_version": SCENARIO_FORMAT_VERSION,
            "slice_minutes": self.slice_minutes,
            "m": self.grid.m,
            "T": mats.horizon,
            "coords": [list(c) for c in self.grid.coords],
            "demand": mats.demand.tolist(),
            "travel_time": mats.travel_time.tolist(),
            "reward": mats.reward.tolist(),
            "relocation_cost": mats.relocation_cost.tolist(),
        }
        Path(path).write_text(json.dumps(doc))

    @classmethod
    def load(cls, path) -> "Scenario":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read scenario {path}: {exc}") from exc
        version = doc.get("format_version")
        if version != SCENARIO_FORMAT_VERSION:
            raise DataError(f"unsupported scenario format_version: {version!r}")
        try:
            grid = HexGrid(doc["coords"])
            matrices = CityMatrices(
                demand=np.asarray(doc["demand"], dtype=np.int64),
                travel_time=np.asarray(doc["travel_time"], dtype=np.int64),
                reward=np.asarray(doc["reward"], dtype=np.float64),
                relocation_cost=np.asarray(doc["relocation_cost"], dtype=np.float64),
            )
            scenario = cls(grid, matrices, int(doc.get("slice_minutes", 5)))
        except (KeyError, ValueError) as exc:
            raise DataError(f"malformed scenario {path}: {exc}") from exc
        if doc["m"] != grid.m or doc["T"] != matrices.horizon:
            raise DataError("scenario header disagrees with array shapes")
        return scenario.validate()

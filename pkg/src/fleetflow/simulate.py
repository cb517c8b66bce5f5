"""One-episode execution: driver state machine, stochastic matching, accounting.

Drivers are either idle in a zone or busy until an arrival timestep.  Within a
timestep, zones are processed in ascending index; each zone's policy queries
and its driver-passenger matching draw from RNG streams derived from
(seed, timestep, zone), so traces are byte-identical for a given seed no
matter how work is scheduled.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Protocol

import numpy as np

from .city import Action, CityMatrices
from .errors import ContractViolation

# Salts for the per-purpose RNG streams.
_INIT_STREAM = 0
_POLICY_STREAM = 1
_MATCH_STREAM = 2
_EPISODE_STREAM = 3

# Action-log kinds.
LOG_WAIT_SUCCESS = 0
LOG_WAIT_FAIL = 1
LOG_RELOCATE = 2


class ObjectiveMode(Enum):
    """What the platform optimizes; changes the learning reward, not payouts."""

    MAX_EARNINGS = "max_earnings"
    MAX_FULFILLMENT = "max_fulfillment"


def zone_stream(seed: int, t: int, h: int, salt: int) -> np.random.Generator:
    """Independent generator for one (timestep, zone, purpose) triple.

    Counter-based so streams depend only on their coordinates, which makes
    traces independent of scheduling order.
    """
    bits = np.random.Philox(
        key=np.uint64(seed & 0xFFFFFFFFFFFFFFFF),
        counter=[t, h, salt, 0],
    )
    return np.random.Generator(bits)


class ZoneStreamPool:
    """Reuses one generator per purpose, reseating its counter state; draws
    are bit-identical to fresh ``zone_stream`` generators."""

    def __init__(self, seed: int):
        self._bits = np.random.Philox(key=np.uint64(seed & 0xFFFFFFFFFFFFFFFF))
        self._gen = np.random.Generator(self._bits)
        self._template = self._bits.state

    def get(self, t: int, h: int, salt: int) -> np.random.Generator:
        state = self._template
        state["state"]["counter"][:] = (t, h, salt, 0)
        self._bits.state = state
        return self._gen


def episode_seed(base_seed: int, episode: int) -> int:
    """Stable per-episode seed derived from a base seed."""
    ss = np.random.SeedSequence((base_seed, _EPISODE_STREAM, episode))
    return int(ss.generate_state(1, np.uint64)[0])


@dataclass
class DriverState:
    """Idle in ``zone`` once the clock reaches ``available_from``; busy before
    that, already bound for ``zone``."""

    id: int
    zone: int
    available_from: int = 0

    def idle_at(self, t: int) -> bool:
        return self.available_from <= t


def apply_action(
    state: DriverState,
    action: Action,
    matrices: CityMatrices,
    t: int,
    ride_to: Optional[int] = None,
) -> tuple[DriverState, float]:
    """Resolve one driver decision into the next state and its net earnings.

    A wait with ``ride_to`` set is a successful pickup; without it the driver
    idles in place for one step at zero earnings.  A relocation pays its cost
    up front and occupies the driver for the travel time.
    """
    if not state.idle_at(t):
        raise ContractViolation(f"driver {state.id} is busy at t={t}")
    if action.origin != state.zone:
        raise ContractViolation(
            f"action origin {action.origin} != driver zone {state.zone}"
        )
    if action.kind == "wait":
        if ride_to is None:
            return DriverState(state.id, state.zone, t + 1), 0.0
        tau = int(matrices.travel_time[t, state.zone, ride_to])
        return (
            DriverState(state.id, ride_to, t + tau),
            float(matrices.reward[t, state.zone, ride_to]),
        )
    if ride_to is not None:
        raise ContractViolation("a relocation cannot carry a passenger")
    dest = action.destination
    tau = int(matrices.travel_time[t, state.zone, dest])
    return (
        DriverState(state.id, dest, t + tau),
        -float(matrices.relocation_cost[t, state.zone, dest]),
    )


@dataclass
class MatchResult:
    assignments: list[tuple[int, int]]  # (driver id, request index)
    unmatched_drivers: list[int]
    unmet_requests: list[int]


def match_waiting(
    waiting_drivers: list[int],
    requests: list[tuple[int, float, int]],
    rng: np.random.Generator,
) -> MatchResult:
    """Uniformly random injective assignment of min(#drivers, #requests).

    Permutes both sides and pairs the prefixes, so every driver/request pair
    is equally likely to be matched.
    """
    drivers = np.asarray(waiting_drivers, dtype=np.int64)
    order_d = rng.permutation(len(drivers))
    order_r = rng.permutation(len(requests))
    k = min(len(drivers), len(requests))
    assignments = [
        (int(drivers[order_d[i]]), int(order_r[i])) for i in range(k)
    ]
    return MatchResult(
        assignments=assignments,
        unmatched_drivers=[int(d) for d in drivers[order_d[k:]]],
        unmet_requests=[int(r) for r in order_r[k:]],
    )


class PolicyOracle(Protocol):
    """Recommends a destination per idle driver; destination == zone is a wait.

    The recommendation distribution may depend only on (t, zone); driver ids
    are provided so mixed populations can route by cohort, never so that
    co-located drivers of one cohort can be told apart.
    """

    def destinations(
        self, t: int, zone: int, driver_ids: np.ndarray, rng: np.random.Generator
    ) -> np.ndarray: ...


@dataclass
class EpisodeTrace:
    """Everything an episode produced, enough to audit every credited cent."""

    supply: np.ndarray        # (T, m) idle drivers at decision time
    busy: np.ndarray          # (T,) drivers mid-trip at decision time
    fulfilled: np.ndarray     # (T, m) successful pickups
    wait_outcomes: np.ndarray  # (T, m, m); diagonal = unsuccessful waits
    relocations: np.ndarray   # (T, m, m)
    unmet: np.ndarray         # (T, m) requests nobody served
    earnings: np.ndarray      # (n,) cumulative per-driver net earnings
    # flat per-action log, aligned arrays
    log_t: np.ndarray
    log_driver: np.ndarray
    log_origin: np.ndarray
    log_dest: np.ndarray
    log_kind: np.ndarray
    log_earnings: np.ndarray

    @property
    def n_drivers(self) -> int:
        return len(self.earnings)

    def total_earnings(self) -> float:
        return float(self.earnings.sum())

    def total_fulfilled(self) -> int:
        return int(self.fulfilled.sum())

    def digest(self) -> str:
        """Byte-level fingerprint used by determinism checks."""
        h = hashlib.sha256()
        for arr in (
            self.supply, self.busy, self.fulfilled, self.wait_outcomes,
            self.relocations, self.unmet, self.earnings, self.log_t,
            self.log_driver, self.log_origin, self.log_dest, self.log_kind,
            self.log_earnings,
        ):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


class Simulation:
    """Stepwise engine over one scenario; reusable across episodes via reset."""

    def __init__(self, matrices: CityMatrices, n_drivers: int,
                 mode: ObjectiveMode = ObjectiveMode.MAX_EARNINGS,
                 collect_log: bool = True):
        if n_drivers < 1:
            raise ContractViolation("need at least one driver")
        self.matrices = matrices
        self.n = n_drivers
        self.mode = mode
        self.collect_log = collect_log
        self.T = matrices.horizon
        self.m = matrices.m
        self._seed: Optional[int] = None

    def reset(self, seed: int) -> None:
        self._seed = seed
        self._streams = ZoneStreamPool(seed)
        rng = zone_stream(seed, 0, 0, _INIT_STREAM)
        self.zone = rng.integers(0, self.m, size=self.n)
        self.available_from = np.zeros(self.n, dtype=np.int64)
        self.earnings = np.zeros(self.n)
        self.t = 0
        T, m = self.T, self.m
        self.supply = np.zeros((T, m), dtype=np.int32)
        self.busy = np.zeros(T, dtype=np.int32)
        self.fulfilled = np.zeros((T, m), dtype=np.int32)
        self.wait_outcomes = np.zeros((T, m, m), dtype=np.int32)
        self.relocations = np.zeros((T, m, m), dtype=np.int32)
        self.unmet = np.zeros((T, m), dtype=np.int32)
        self._log: list[tuple[np.ndarray, ...]] = []  # batched action records

    @property
    def done(self) -> bool:
        return self.t >= self.T

    def observation(self) -> dict:
        """Idle supply per zone, outgoing demand per zone, 1-based timestep."""
        idle = self.available_from <= self.t
        supply = np.bincount(self.zone[idle], minlength=self.m)
        if self.done:
            demand = np.zeros(self.m, dtype=np.int64)
        else:
            demand = self.matrices.demand[self.t].sum(axis=1)
        return {
            "t": int(self.t) + 1,
            "supply": supply.astype(int).tolist(),
            "demand": demand.astype(int).tolist(),
        }

    def step(self, oracle: PolicyOracle) -> np.ndarray:
        """Advance one timestep; returns net earnings credited per zone."""
        if self.done:
            raise ContractViolation("episode is over")
        if self._seed is None:
            raise ContractViolation("reset() must run before step()")
        t = self.t
        zone_rewards = np.zeros(self.m)

        idle = self.available_from <= t
        zones_now = self.zone.copy()  # drivers acting this step move self.zone
        self.supply[t] = np.bincount(zones_now[idle], minlength=self.m)
        self.busy[t] = self.n - int(idle.sum())

        # Zones with no idle drivers still lose their requests this step.
        occupied = set(np.unique(zones_now[idle]).tolist())
        demand_out = self.matrices.demand[t].sum(axis=1)
        for h in range(self.m):
            if h not in occupied and demand_out[h] > 0:
                self.unmet[t, h] += int(demand_out[h])

        for h in sorted(occupied):
            ids = np.flatnonzero(idle & (zones_now == h))
            dests = np.asarray(
                oracle.destinations(
                    t, h, ids, self._streams.get(t, h, _POLICY_STREAM)
                ),
                dtype=np.int64,
            )
            if dests.shape != ids.shape or np.any((dests < 0) | (dests >= self.m)):
                raise ContractViolation(
                    f"policy returned invalid destinations at (t={t}, h={h})"
                )
            self._apply_zone(t, h, ids, dests, zone_rewards)

        self.t += 1
        return zone_rewards

    def _apply_zone(self, t, h, ids, dests, zone_rewards):
        mats = self.matrices
        moving = dests != h
        if moving.any():
            movers = ids[moving]
            targets = dests[moving]
            tau = mats.travel_time[t, h, targets]
            paid = -mats.relocation_cost[t, h, targets].astype(np.float64)
            self.zone[movers] = targets
            self.available_from[movers] = t + tau
            self.earnings[movers] += paid
            zone_rewards[h] += paid.sum()
            np.add.at(self.relocations[t, h], targets, 1)
            self._log_batch(t, movers, h, targets, LOG_RELOCATE, paid)

        waiting = ids[~moving]
        if len(waiting) == 0:
            row = mats.demand[t, h]
            self.unmet[t, h] += int(row.sum())
            return
        request_dests = np.repeat(np.arange(self.m), mats.demand[t, h])
        rng = self._streams.get(t, h, _MATCH_STREAM)
        k = min(len(waiting), len(request_dests))
        order_d = rng.permutation(len(waiting))
        order_r = rng.permutation(len(request_dests))
        if k:
            matched = waiting[order_d[:k]]
            rides = request_dests[order_r[:k]]
            tau = mats.travel_time[t, h, rides]
            paid = mats.reward[t, h, rides].astype(np.float64)
            self.zone[matched] = rides
            self.available_from[matched] = t + tau
            self.earnings[matched] += paid
            zone_rewards[h] += paid.sum()
            np.add.at(self.wait_outcomes[t, h], rides, 1)
            self._log_batch(t, matched, h, rides, LOG_WAIT_SUCCESS, paid)
        self.fulfilled[t, h] = k
        unmatched = waiting[order_d[k:]]
        if len(unmatched):
            self.available_from[unmatched] = t + 1
            self.wait_outcomes[t, h, h] += len(unmatched)
            self._log_batch(
                t, unmatched, h, np.full(len(unmatched), h), LOG_WAIT_FAIL,
                np.zeros(len(unmatched)),
            )
        self.unmet[t, h] += len(request_dests) - k

    def _log_batch(self, t, drivers, origin, dests, kind, paid):
        if not self.collect_log:
            return
        self._log.append((
            np.full(len(drivers), t, dtype=np.int32),
            drivers.astype(np.int32),
            np.full(len(drivers), origin, dtype=np.int32),
            dests.astype(np.int32),
            np.full(len(drivers), kind, dtype=np.int8),
            paid.astype(np.float64),
        ))

    def trace(self) -> EpisodeTrace:
        if self._log:
            t_arr, d_arr, o_arr, g_arr, k_arr, e_arr = (
                np.concatenate(parts) for parts in zip(*self._log)
            )
        else:
            t_arr = np.zeros(0, dtype=np.int32)
            d_arr = np.zeros(0, dtype=np.int32)
            o_arr = np.zeros(0, dtype=np.int32)
            g_arr = np.zeros(0, dtype=np.int32)
            k_arr = np.zeros(0, dtype=np.int8)
            e_arr = np.zeros(0, dtype=np.float64)
        return EpisodeTrace(
            supply=self.supply.copy(),
            busy=self.busy.copy(),
            fulfilled=self.fulfilled.copy(),
            wait_outcomes=self.wait_outcomes.copy(),
            relocations=self.relocations.copy(),
            unmet=self.unmet.copy(),
            earnings=self.earnings.copy(),
            log_t=t_arr, log_driver=d_arr, log_origin=o_arr, log_dest=g_arr,
            log_kind=k_arr, log_earnings=e_arr,
        )


def run_episode(
    matrices: CityMatrices,
    n_drivers: int,
    policy: PolicyOracle,
    mode: ObjectiveMode,
    seed: int,
    collect_log: bool = True,
) -> EpisodeTrace:
    """Simulate a full horizon under one policy; deterministic given the seed."""
    sim = Simulation(matrices, n_drivers, mode, collect_log=collect_log)
    sim.reset(seed)
    while not sim.done:
        sim.step(policy)
    return sim.trace()


def export_trace_csv(trace: EpisodeTrace, cells_path, earnings_path) -> None:
    """Columnar exports: per-(t, zone) counts and per-driver earnings."""
    T, m = trace.supply.shape
    with open(cells_path, "w") as fh:
        fh.write("t,zone,supply,fulfilled,unmet\n")
        for t in range(T):
            for h in range(m):
                fh.write(
                    f"{t},{h},{trace.supply[t, h]},"
                    f"{trace.fulfilled[t, h]},{trace.unmet[t, h]}\n"
                )
    with open(earnings_path, "w") as fh:
        fh.write("driver,earnings\n")
        for i, e in enumerate(trace.earnings):
            fh.write(f"{i},{e!r}\n")

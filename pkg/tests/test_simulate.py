import numpy as np
import pytest

from fleetflow.city import Action, CityMatrices
from fleetflow.errors import ContractViolation
from fleetflow.simulate import (
    LOG_RELOCATE,
    LOG_WAIT_FAIL,
    LOG_WAIT_SUCCESS,
    DriverState,
    ObjectiveMode,
    Simulation,
    ZoneStreamPool,
    apply_action,
    match_waiting,
    run_episode,
    zone_stream,
)


def test_stream_pool_matches_fresh_streams():
    pool = ZoneStreamPool(987654321)
    for t, h, salt in [(0, 0, 1), (5, 3, 2), (47, 36, 1), (5, 3, 2)]:
        fresh = zone_stream(987654321, t, h, salt)
        pooled = pool.get(t, h, salt)
        np.testing.assert_array_equal(pooled.random(8), fresh.random(8))
        fresh2 = zone_stream(987654321, t, h, salt)
        np.testing.assert_array_equal(
            pool.get(t, h, salt).permutation(17), fresh2.permutation(17)
        )


def matrices(T=4, m=3, demand_cells=(), reward=10.0, travel=1, cost=0.0):
    demand = np.zeros((T, m, m), dtype=np.int64)
    for t, a, b, c in demand_cells:
        demand[t, a, b] = c
    travel_arr = np.full((T, m, m), travel, dtype=np.int64)
    reward_arr = np.full((T, m, m), reward)
    cost_arr = np.full((T, m, m), cost)
    cost_arr[:, np.arange(m), np.arange(m)] = 0.0
    return CityMatrices(demand, travel_arr, reward_arr, cost_arr).validate()


class AlwaysWait:
    def destinations(self, t, zone, driver_ids, rng):
        return np.full(len(driver_ids), zone)


class FixedPlan:
    """dests[t][zone] -> destination for every driver there (default wait)."""

    def __init__(self, plan):
        self.plan = plan

    def destinations(self, t, zone, driver_ids, rng):
        return np.full(len(driver_ids), self.plan.get((t, zone), zone))


class TestApplyAction:
    def test_unsuccessful_wait(self):
        mats = matrices()
        state = DriverState(id=0, zone=1)
        nxt, earned = apply_action(state, Action.to(1, 1), mats, t=0)
        assert (nxt.zone, nxt.available_from, earned) == (1, 1, 0.0)

    def test_relocation_charges_cost(self):
        mats = matrices(cost=3.5, travel=2)
        state = DriverState(id=0, zone=0)
        nxt, earned = apply_action(state, Action.to(0, 2), mats, t=1)
        assert earned == -3.5
        assert (nxt.zone, nxt.available_from) == (2, 3)

    def test_successful_wait(self):
        mats = matrices(reward=12.0, travel=4)
        state = DriverState(id=3, zone=0)
        nxt, earned = apply_action(state, Action.to(0, 0), mats, t=2, ride_to=1)
        assert earned == 12.0
        assert (nxt.zone, nxt.available_from) == (1, 6)

    def test_origin_mismatch_rejected(self):
        mats = matrices()
        with pytest.raises(ContractViolation):
            apply_action(DriverState(0, 2), Action.to(1, 1), mats, t=0)

    def test_busy_driver_rejected(self):
        mats = matrices()
        with pytest.raises(ContractViolation):
            apply_action(DriverState(0, 1, available_from=5), Action.to(1, 1), mats, t=0)


class TestMatchWaiting:
    def test_no_drivers(self):
        res = match_waiting([], [(1, 5.0, 1)] * 5, np.random.default_rng(0))
        assert res.assignments == []
        assert len(res.unmet_requests) == 5

    def test_exact_balance_is_bijection(self):
        res = match_waiting([7, 8, 9], [(1, 5.0, 1)] * 3, np.random.default_rng(0))
        assert sorted(d for d, _ in res.assignments) == [7, 8, 9]
        assert sorted(r for _, r in res.assignments) == [0, 1, 2]
        assert res.unmatched_drivers == [] and res.unmet_requests == []

    def test_uniform_over_drivers(self):
        # 2 drivers, 1 request: each should win about half the time
        wins = {4: 0, 5: 0}
        for trial in range(10_000):
            rng = np.random.default_rng(trial)
            res = match_waiting([4, 5], [(1, 5.0, 1)], rng)
            wins[res.assignments[0][0]] += 1
        assert abs(wins[4] / 10_000 - 0.5) < 0.02


class TestRunEpisode:
    def test_zero_demand_always_wait(self):
        mats = matrices(T=6, m=2)
        trace = run_episode(mats, 1, AlwaysWait(), ObjectiveMode.MAX_EARNINGS, seed=1)
        assert trace.total_earnings() == 0.0
        assert trace.wait_outcomes.sum() == 6  # one unsuccessful wait per step
        assert np.all(trace.log_kind == LOG_WAIT_FAIL)

    def test_single_ride_hand_simulation(self):
        # one ride 0 -> 1 at t=1 paying 10; one driver pinned at zone 0
        mats = matrices(T=4, m=2, demand_cells=[(1, 0, 1, 1)], reward=10.0)
        # place the driver deterministically by searching a seed landing in zone 0
        seed = next(
            s for s in range(100)
            if zone_stream(s, 0, 0, 0).integers(0, 2, size=1)[0] == 0
        )
        trace = run_episode(mats, 1, AlwaysWait(), ObjectiveMode.MAX_EARNINGS, seed=seed)
        assert trace.total_earnings() == 10.0
        assert trace.total_fulfilled() == 1
        assert trace.fulfilled[1, 0] == 1

    def test_driver_conservation_any_policy(self):
        mats = matrices(T=8, m=4, demand_cells=[(t, 0, 1, 2) for t in range(8)],
                        travel=2)

        class RandomPolicy:
            def destinations(self, t, zone, ids, rng):
                return rng.integers(0, 4, size=len(ids))

        for seed in (0, 1, 2):
            trace = run_episode(mats, 10, RandomPolicy(), ObjectiveMode.MAX_EARNINGS, seed)
            for t in range(8):
                assert trace.supply[t].sum() + trace.busy[t] == 10

    def test_determinism_same_seed(self):
        mats = matrices(T=8, m=4, demand_cells=[(t, 0, 1, 2) for t in range(8)])

        class RandomPolicy:
            def destinations(self, t, zone, ids, rng):
                return rng.integers(0, 4, size=len(ids))

        a = run_episode(mats, 12, RandomPolicy(), ObjectiveMode.MAX_EARNINGS, seed=9)
        b = run_episode(mats, 12, RandomPolicy(), ObjectiveMode.MAX_EARNINGS, seed=9)
        assert a.digest() == b.digest()
        c = run_episode(mats, 12, RandomPolicy(), ObjectiveMode.MAX_EARNINGS, seed=10)
        assert a.digest() != c.digest()

    def test_fulfillment_dominance(self):
        # every waiting driver eligible: fulfilled == min(waiting, requests)
        mats = matrices(T=3, m=2, demand_cells=[(0, 0, 1, 3), (1, 0, 1, 1)])
        trace = run_episode(mats, 2, AlwaysWait(), ObjectiveMode.MAX_EARNINGS, seed=3)
        for t in range(3):
            for h in range(2):
                waiting = trace.wait_outcomes[t, h].sum() + 0  # choosers
                requests = mats.demand[t, h].sum()
                if waiting or requests:
                    assert trace.fulfilled[t, h] == min(waiting, requests)

    def test_earnings_audit_replay(self):
        # replaying the action log through apply_action reproduces earnings
        mats = matrices(T=6, m=3, demand_cells=[(t, h, (h + 1) % 3, 2)
                                                for t in range(6) for h in range(3)],
                        reward=7.5, cost=1.25, travel=2)

        class Mixed:
            def destinations(self, t, zone, ids, rng):
                return np.where(rng.random(len(ids)) < 0.5, zone,
                                rng.integers(0, 3, size=len(ids)))

        trace = run_episode(mats, 8, Mixed(), ObjectiveMode.MAX_EARNINGS, seed=17)
        replay = np.zeros(8)
        states = {}
        for i in range(len(trace.log_t)):
            t = int(trace.log_t[i])
            d = int(trace.log_driver[i])
            origin = int(trace.log_origin[i])
            dest = int(trace.log_dest[i])
            kind = int(trace.log_kind[i])
            state = states.get(d, DriverState(d, origin, 0))
            state = DriverState(d, origin, state.available_from)
            if kind == LOG_WAIT_SUCCESS:
                state, earned = apply_action(state, Action.to(origin, origin), mats, t,
                                             ride_to=dest)
            elif kind == LOG_WAIT_FAIL:
                state, earned = apply_action(state, Action.to(origin, origin), mats, t)
            else:
                state, earned = apply_action(state, Action.to(origin, dest), mats, t)
            states[d] = state
            replay[d] += earned
        np.testing.assert_allclose(replay, trace.earnings)
        kinds = set(trace.log_kind.tolist())
        assert {LOG_WAIT_SUCCESS, LOG_WAIT_FAIL, LOG_RELOCATE} <= kinds

    def test_unmet_demand_counts_everything(self):
        mats = matrices(T=2, m=3, demand_cells=[(0, 2, 1, 4)])
        # single driver; wherever it starts, zone 2's demand is mostly unmet
        trace = run_episode(mats, 1, AlwaysWait(), ObjectiveMode.MAX_EARNINGS, seed=0)
        assert trace.unmet.sum() + trace.total_fulfilled() == mats.demand.sum()

    def test_busy_drivers_unavailable_until_arrival(self):
        mats = matrices(T=5, m=2, travel=3)
        plan = FixedPlan({(0, 0): 1, (0, 1): 0})  # everyone swaps zones at t=0
        trace = run_episode(mats, 4, plan, ObjectiveMode.MAX_EARNINGS, seed=2)
        # all drivers leave at t=0 (travel 3): idle again only at t=3
        assert trace.supply[1].sum() == 0
        assert trace.supply[2].sum() == 0
        assert trace.supply[3].sum() == 4

    def test_invalid_policy_output_rejected(self):
        mats = matrices(T=2, m=2)

        class Broken:
            def destinations(self, t, zone, ids, rng):
                return np.full(len(ids), 99)

        sim = Simulation(mats, 2)
        sim.reset(0)
        with pytest.raises(ContractViolation):
            sim.step(Broken())


def test_export_trace_csv(tmp_path):
    from fleetflow.simulate import export_trace_csv

    mats = matrices(T=2, m=2, demand_cells=[(0, 0, 1, 1)])
    trace = run_episode(mats, 2, AlwaysWait(), ObjectiveMode.MAX_EARNINGS, seed=1)
    cells = tmp_path / "cells.csv"
    earn = tmp_path / "earnings.csv"
    export_trace_csv(trace, cells, earn)
    lines = cells.read_text().strip().splitlines()
    assert lines[0] == "t,zone,supply,fulfilled,unmet"
    assert len(lines) == 1 + 2 * 2
    assert len(earn.read_text().strip().splitlines()) == 3

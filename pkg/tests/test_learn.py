import math

import numpy as np
import pytest

from fleetflow.city import CityMatrices, HexGrid, Scenario
from fleetflow.errors import ConfigError, ContractViolation
from fleetflow.ingest import Hotspot, SyntheticCityParams, generate_synthetic_city
from fleetflow.learn import (
    ExplorationKernel,
    PolicyTables,
    TrainConfig,
    TrainingPolicy,
    batch_update_q_independent,
    best_independent_action,
    greedy_destinations,
    load_checkpoint,
    sample_coordinated_action,
    sample_exploration,
    save_checkpoint,
    train,
    update_coordination,
    update_q_coordinated,
    update_q_relocate,
    update_q_wait,
)
from fleetflow.simulate import ObjectiveMode, run_episode


def plain_matrices(T=6, m=7, reward=5.0, cost=1.0, travel=1):
    demand = np.zeros((T, m, m), dtype=np.int64)
    travel_arr = np.full((T, m, m), travel, dtype=np.int64)
    reward_arr = np.full((T, m, m), reward)
    cost_arr = np.full((T, m, m), cost)
    cost_arr[:, np.arange(m), np.arange(m)] = 0.0
    return CityMatrices(demand, travel_arr, reward_arr, cost_arr)


class TestExplorationKernel:
    def test_normalized_weights_match_formula(self):
        grid = HexGrid.hexagon(3)
        kernel = ExplorationKernel(grid, peak=0.7, width=1.0, reach=3)
        center = grid.zone_at(0, 0)
        ks, probs = kernel.ring_probabilities(center)
        assert list(ks) == [0, 1, 2, 3]
        np.testing.assert_allclose(
            probs, [0.5704, 0.3460, 0.0772, 0.0063], atol=1e-3
        )

    def test_reach_zero_always_waits(self):
        grid = HexGrid.hexagon(2)
        rng = np.random.default_rng(0)
        kernel = ExplorationKernel(grid, 0.7, 1.0, reach=0)
        assert np.all(kernel.sample(3, rng, 50) == 3)

    def test_boundary_zone_renormalizes_over_existing_rings(self):
        grid = HexGrid.hexagon(1)  # corner zones have no ring 3
        corner = grid.zone_at(1, 0)
        kernel = ExplorationKernel(grid, 0.7, 1.0, reach=3)
        ks, probs = kernel.ring_probabilities(corner)
        assert max(ks) <= 2
        assert probs.sum() == pytest.approx(1.0)
        rng = np.random.default_rng(1)
        dests = kernel.sample(corner, rng, 500)
        assert np.all((0 <= dests) & (dests < grid.m))

    def test_empirical_frequencies_match_kernel(self):
        # chi-square against the normalized kernel, df=3 critical value 7.815
        grid = HexGrid.hexagon(3)
        center = grid.zone_at(0, 0)
        kernel = ExplorationKernel(grid, 0.7, 1.0, 3)
        ks, probs = kernel.ring_probabilities(center)
        rng = np.random.default_rng(123)
        draws = kernel.sample(center, rng, 10_000)
        dist = np.array([grid.distance(center, d) for d in draws])
        observed = np.array([(dist == k).sum() for k in ks])
        expected = probs * 10_000
        chi2 = ((observed - expected) ** 2 / expected).sum()
        assert chi2 < 7.815

    def test_sample_exploration_returns_valid_action(self):
        grid = HexGrid.hexagon(2)
        rng = np.random.default_rng(5)
        for _ in range(20):
            action = sample_exploration(grid, 4, 0.7, 1.0, 3, rng)
            assert action.origin == 4
            assert 0 <= action.destination < grid.m


class TestActionChoice:
    def test_all_zero_row_prefers_wait(self):
        q = np.zeros((2, 5, 5))
        assert best_independent_action(q, 1, 3) == 3

    def test_unique_max(self):
        q = np.zeros((1, 6, 6))
        q[0, 2, 4] = 1.5
        assert best_independent_action(q, 0, 2) == 4

    def test_tie_prefers_wait(self):
        q = np.zeros((1, 6, 6))
        q[0, 2, 2] = 2.0
        q[0, 2, 5] = 2.0
        assert best_independent_action(q, 0, 2) == 2

    def test_tie_without_wait_prefers_lowest_index(self):
        q = np.zeros((1, 6, 6))
        q[0, 2, 4] = 2.0
        q[0, 2, 1] = 2.0
        assert best_independent_action(q, 0, 2) == 1

    def test_batch_greedy_matches_scalar(self):
        rng = np.random.default_rng(7)
        q = rng.integers(0, 3, size=(4, 8, 8)).astype(float)  # many ties
        table = greedy_destinations(q)
        for t in range(4):
            for h in range(8):
                assert table[t, h] == best_independent_action(q, t, h)

    def test_coordinated_zero_row_falls_back(self):
        tables = PolicyTables.zeros(2, 4)
        tables.q_independent[1, 2, 3] = 9.0
        rng = np.random.default_rng(0)
        assert sample_coordinated_action(tables, 1, 2, rng) == 3

    def test_coordinated_one_hot_is_deterministic(self):
        tables = PolicyTables.zeros(1, 4)
        tables.q_coordinated[0, 1, 1] = 1.0
        rng = np.random.default_rng(0)
        for _ in range(20):
            assert sample_coordinated_action(tables, 0, 1, rng) == 1

    def test_coordinated_sampling_frequencies(self):
        tables = PolicyTables.zeros(1, 4)
        tables.q_coordinated[0, 0, 0] = 0.5
        tables.q_coordinated[0, 0, 2] = 0.5
        rng = np.random.default_rng(11)
        draws = [sample_coordinated_action(tables, 0, 0, rng) for _ in range(10_000)]
        freq = np.mean(np.array(draws) == 0)
        assert abs(freq - 0.5) < 0.02

    def test_negative_entries_rejected(self):
        tables = PolicyTables.zeros(1, 3)
        tables.q_coordinated[0, 0, 1] = -0.2
        with pytest.raises(ContractViolation):
            sample_coordinated_action(tables, 0, 0, np.random.default_rng(0))


class TestWaitUpdate:
    def test_single_successful_wait(self):
        mats = plain_matrices(reward=10.0)
        q = np.zeros((6, 7, 7))
        counts = np.zeros(7)
        counts[2] = 1  # one wait at zone 0 became a ride to zone 2
        value = update_q_wait(q, 0, 0, counts, mats, alpha=0.5, gamma=1.0)
        assert value == 5.0  # (1 - 0.5) * 0 + 0.5 / 1 * 10

    def test_all_unsuccessful_stays_zero(self):
        mats = plain_matrices()
        q = np.zeros((6, 7, 7))
        counts = np.zeros(7)
        counts[0] = 4
        assert update_q_wait(q, 0, 0, counts, mats, 0.5, 1.0) == 0.0

    def test_alpha_zero_is_identity(self):
        mats = plain_matrices()
        q = np.full((6, 7, 7), 3.3)
        counts = np.zeros(7)
        counts[1] = 2
        assert update_q_wait(q, 2, 0, counts, mats, 0.0, 0.9) == 3.3

    def test_terminal_future_is_zero(self):
        mats = plain_matrices(T=3, reward=4.0, travel=5)
        q = np.full((3, 7, 7), 100.0)  # future values must not leak in
        counts = np.zeros(7)
        counts[1] = 1
        value = update_q_wait(q, 2, 0, counts, mats, 1.0, 1.0)
        assert value == 4.0

    def test_empty_cohort_rejected(self):
        mats = plain_matrices()
        with pytest.raises(ContractViolation):
            update_q_wait(np.zeros((6, 7, 7)), 0, 0, np.zeros(7), mats, 0.5, 1.0)


class TestRelocateUpdate:
    def test_pure_cost(self):
        mats = plain_matrices(cost=2.0)
        q = np.zeros((6, 7, 7))
        assert update_q_relocate(q, 0, 0, 1, 1, mats, 0.5, 1.0) == -1.0

    def test_future_value_bootstrap(self):
        mats = plain_matrices(cost=2.0, travel=1)
        q = np.zeros((6, 7, 7))
        q[1, 1, 4] = 10.0  # best action value at the destination cell
        value = update_q_relocate(q, 0, 0, 1, 3, mats, alpha=1.0, gamma=0.5)
        assert value == 3.0  # -2 + 0.5 * 10

    def test_alpha_zero_is_identity(self):
        mats = plain_matrices(cost=2.0)
        q = np.full((6, 7, 7), -1.7)
        assert update_q_relocate(q, 0, 0, 1, 2, mats, 0.0, 0.9) == pytest.approx(-1.7)

    def test_same_zone_rejected(self):
        mats = plain_matrices()
        with pytest.raises(ContractViolation):
            update_q_relocate(np.zeros((6, 7, 7)), 0, 2, 2, 1, mats, 0.5, 1.0)


class TestBatchUpdateMatchesScalarOps:
    @pytest.mark.parametrize("mode", list(ObjectiveMode))
    def test_random_traces(self, mode):
        rng = np.random.default_rng(31)
        grid = HexGrid.hexagon(1)
        m, T = grid.m, 5
        demand = rng.integers(0, 3, size=(T, m, m))
        demand[:, np.arange(m), np.arange(m)] = 0
        mats = CityMatrices(
            demand=demand,
            travel_time=rng.integers(1, 4, size=(T, m, m)),
            reward=rng.normal(5, 2, size=(T, m, m)),
            relocation_cost=np.abs(rng.normal(1, 0.5, size=(T, m, m))),
        )
        mats.relocation_cost[:, np.arange(m), np.arange(m)] = 0.0

        class Jitter:
            def destinations(self, t, zone, ids, rng_):
                return np.where(
                    rng_.random(len(ids)) < 0.6, zone, rng_.integers(0, m, len(ids))
                )

        for seed in range(4):
            trace = run_episode(mats, 15, Jitter(), mode, seed)
            q = rng.normal(size=(T, m, m))
            alpha, gamma = 0.3, 0.9
            batch = batch_update_q_independent(q, trace, mats, alpha, gamma, mode)
            expected = q.copy()
            for t in range(T):
                for h in range(m):
                    counts = trace.wait_outcomes[t, h]
                    if counts.sum() >= 1:
                        expected[t, h, h] = update_q_wait(
                            q, t, h, counts, mats, alpha, gamma, mode
                        )
                    for g in range(m):
                        c = trace.relocations[t, h, g]
                        if c >= 1 and g != h:
                            expected[t, h, g] = update_q_relocate(
                                q, t, h, g, int(c), mats, alpha, gamma, mode
                            )
            np.testing.assert_allclose(batch, expected, rtol=1e-12, atol=1e-12)


class TestCoordinatedUpdate:
    def test_alpha_one_copies(self):
        q_c = np.zeros((1, 2, 2))
        zeta = np.array([[[1 / 3, 2 / 3], [0.0, 0.0]]])
        out = update_q_coordinated(q_c, zeta, alpha=1.0)
        np.testing.assert_allclose(out[0, 0], [1 / 3, 2 / 3])

    def test_zero_plan_decays(self):
        q_c = np.full((1, 2, 2), 0.8)
        out = update_q_coordinated(q_c, np.zeros((1, 2, 2)), alpha=0.25)
        np.testing.assert_allclose(out, 0.6)

    def test_alpha_zero_identity(self):
        q_c = np.full((1, 2, 2), 0.8)
        out = update_q_coordinated(q_c, np.ones((1, 2, 2)), alpha=0.0)
        np.testing.assert_allclose(out, 0.8)

    def test_out_of_range_plan_rejected(self):
        with pytest.raises(ContractViolation):
            update_q_coordinated(np.zeros((1, 1, 1)), np.full((1, 1, 1), 1.5), 0.5)


class TestCoordinationUpdate:
    def test_excess_case(self):
        xi = np.zeros((1, 1))
        delta = np.array([[5.0]])
        supply = np.array([[50.0]])
        demand_out = np.array([[45.0]])
        out = update_coordination(xi, delta, supply, demand_out, alpha=0.01)
        assert out[0, 0] == pytest.approx(0.001)  # mu = 0.1

    def test_balanced_decays(self):
        xi = np.full((2, 2), 0.4)
        out = update_coordination(
            xi, np.zeros((2, 2)), np.ones((2, 2)), np.ones((2, 2)), alpha=0.1
        )
        np.testing.assert_allclose(out, 0.36)

    def test_deficit_requires_prior_coordination(self):
        delta = np.array([[-4.0]])
        supply = np.array([[1.0]])
        demand_out = np.array([[5.0]])
        cold = update_coordination(np.zeros((1, 1)), delta, supply, demand_out, 0.5)
        assert cold[0, 0] == 0.0
        warm = update_coordination(np.array([[0.2]]), delta, supply, demand_out, 0.5)
        assert warm[0, 0] == pytest.approx(0.5 * 0.2 + 0.5 * 0.8)

    def test_stays_in_unit_interval(self):
        rng = np.random.default_rng(9)
        xi = np.zeros((3, 4))
        for _ in range(500):
            delta = rng.normal(0, 5, size=(3, 4))
            supply = np.abs(delta) + rng.uniform(0.5, 10, size=(3, 4))
            demand_out = np.abs(delta) + rng.uniform(0.5, 10, size=(3, 4))
            xi = update_coordination(xi, delta, supply, demand_out, 0.3)
            assert np.all(xi >= 0) and np.all(xi <= 1)


class TestEpsilonSchedule:
    def test_endpoints(self):
        cfg = TrainConfig(episodes=100, independent_episodes=80,
                          coordinated_episodes=40)
        assert cfg.epsilon_at(0) == 1.0
        assert cfg.epsilon_at(99) == pytest.approx(0.01)
        eps = [cfg.epsilon_at(e) for e in range(100)]
        assert all(a >= b for a, b in zip(eps, eps[1:]))

    def test_single_episode(self):
        cfg = TrainConfig(episodes=1, independent_episodes=1, coordinated_episodes=0)
        assert cfg.epsilon_at(0) == 1.0

    def test_validation(self):
        with pytest.raises(ConfigError):
            TrainConfig(episodes=0, independent_episodes=0,
                        coordinated_episodes=0).validate()
        with pytest.raises(ConfigError):
            TrainConfig(episodes=5, independent_episodes=5, coordinated_episodes=0,
                        learning_rate=0.0).validate()


class TestTrain:
    def test_smoke_single_episode_pure_exploration(self):
        scenario = generate_synthetic_city(
            SyntheticCityParams(radius=1, horizon=6, base_rate=0.5, seed=3)
        )
        cfg = TrainConfig(episodes=1, independent_episodes=1, coordinated_episodes=0,
                          epsilon_initial=1.0, epsilon_final=1.0, seed=5)
        result = train(scenario, 5, cfg)
        assert len(result.metrics) == 1
        assert result.tables.q_independent.shape == (6, scenario.grid.m,
                                                     scenario.grid.m)

    def test_single_zone_city_geometric_recursion(self):
        # no demand is possible in a 1-zone city, so under the fulfillment
        # objective every wait fails and the fixed point of the wait value is
        # v(t) = -(1 - gamma^(T - t)) / (1 - gamma)
        grid = HexGrid.hexagon(0)
        T, gamma = 5, 0.5
        mats = CityMatrices(
            demand=np.zeros((T, 1, 1), dtype=np.int64),
            travel_time=np.ones((T, 1, 1), dtype=np.int64),
            reward=np.zeros((T, 1, 1)),
            relocation_cost=np.zeros((T, 1, 1)),
        )
        scenario = Scenario(grid, mats)
        cfg = TrainConfig(
            episodes=80, independent_episodes=80, coordinated_episodes=0,
            learning_rate=0.5, discount=gamma, epsilon_initial=0.0,
            epsilon_final=0.0, mode=ObjectiveMode.MAX_FULFILLMENT, seed=0,
        )
        result = train(scenario, 3, cfg)
        expected = [-(1 - gamma ** (T - t)) / (1 - gamma) for t in range(T)]
        got = result.tables.q_independent[:, 0, 0]
        np.testing.assert_allclose(got, expected, atol=1e-6)

    def test_two_zone_rush_hour_learns_to_relocate(self):
        # all demand sits in zone 1 at t=5; a trained policy moves zone-0
        # drivers there beforehand and beats the random policy's fulfillment
        grid = HexGrid([(0, 0), (1, 0)])
        T, m = 10, 2
        demand = np.zeros((T, m, m), dtype=np.int64)
        demand[5, 1, 0] = 6
        mats = CityMatrices(
            demand=demand,
            travel_time=np.ones((T, m, m), dtype=np.int64),
            reward=np.full((T, m, m), 10.0),
            relocation_cost=np.full((T, m, m), 0.5)
            * (1 - np.eye(m))[None, :, :],
        )
        scenario = Scenario(grid, mats)
        cfg = TrainConfig(episodes=60, independent_episodes=60,
                          coordinated_episodes=0, learning_rate=0.2,
                          discount=0.99, exploration_reach=1, seed=2)
        result = train(scenario, 6, cfg)
        greedy = greedy_destinations(result.tables.q_independent)
        # some step before the rush recommends moving 0 -> 1
        assert np.any(greedy[:5, 0] == 1)

        class Greedy:
            def destinations(self, t, zone, ids, rng):
                return np.full(len(ids), greedy[t, zone])

        class Uniform:
            def destinations(self, t, zone, ids, rng):
                return rng.integers(0, m, size=len(ids))

        trained_f = np.mean([
            run_episode(mats, 6, Greedy(), ObjectiveMode.MAX_EARNINGS, s)
            .total_fulfilled() for s in range(5)
        ])
        random_f = np.mean([
            run_episode(mats, 6, Uniform(), ObjectiveMode.MAX_EARNINGS, s)
            .total_fulfilled() for s in range(5)
        ])
        assert trained_f > random_f

    def test_earnings_trend_improves(self):
        scenario = generate_synthetic_city(SyntheticCityParams(
            radius=1, horizon=24, base_rate=0.1,
            hotspots=(Hotspot(zone=2, peak_time=12, amplitude=12.0, width=3.0),),
            fare_per_hop=4.0, cost_per_hop=0.5, seed=8,
        ))
        cfg = TrainConfig(episodes=50, independent_episodes=50,
                          coordinated_episodes=0, learning_rate=0.1, seed=4)
        result = train(scenario, 10, cfg)
        first = np.mean([r.mean_earnings for r in result.metrics[:10]])
        last = np.mean([r.mean_earnings for r in result.metrics[-10:]])
        assert last > first

    def test_coordination_phase_populates_tables(self):
        scenario = generate_synthetic_city(SyntheticCityParams(
            radius=1, horizon=16, base_rate=0.2,
            hotspots=(Hotspot(zone=0, peak_time=8, amplitude=10.0),),
            seed=6,
        ))
        cfg = TrainConfig(episodes=20, independent_episodes=10,
                          coordinated_episodes=10, learning_rate=0.2,
                          imbalance_threshold=1.0, seed=7)
        result = train(scenario, 25, cfg)
        assert result.metrics[9].coordination_cells == 0
        assert result.metrics[-1].coordination_cells > 0
        assert np.all(result.tables.coordination >= 0)
        assert np.all(result.tables.coordination <= 1)
        assert result.last_rebalance is not None

    def test_envy_free_recommendation_distribution(self):
        # two co-located drivers must face identical decision distributions;
        # TrainingPolicy ignores driver identity entirely
        tables = PolicyTables.zeros(4, 7)
        rng = np.random.default_rng(12)
        tables.q_independent = rng.normal(size=(4, 7, 7))
        tables.q_coordinated = rng.uniform(0, 1, size=(4, 7, 7))
        tables.coordination = rng.uniform(0, 1, size=(4, 7))
        grid = HexGrid.hexagon(1)
        kernel = ExplorationKernel(grid, 0.7, 1.0, 2)
        policy = TrainingPolicy(tables, kernel, epsilon=0.3, coordination_active=True)
        a_counts = np.zeros(7)
        b_counts = np.zeros(7)
        for trial in range(4000):
            out = policy.destinations(2, 3, np.array([10, 99]),
                                      np.random.default_rng(trial))
            a_counts[out[0]] += 1
            b_counts[out[1]] += 1
        np.testing.assert_allclose(a_counts / 4000, b_counts / 4000, atol=0.05)


def test_checkpoint_roundtrip(tmp_path):
    tables = PolicyTables.zeros(3, 4)
    tables.q_independent[1, 2, 3] = 1.25
    tables.coordination[2, 1] = 0.5
    cfg = TrainConfig(episodes=10, independent_episodes=8, coordinated_episodes=4,
                      mode=ObjectiveMode.MAX_FULFILLMENT, seed=99)
    path = tmp_path / "checkpoint.json"
    save_checkpoint(path, tables, cfg, episodes_completed=10)
    loaded_tables, loaded_cfg, episodes = load_checkpoint(path)
    np.testing.assert_array_equal(loaded_tables.q_independent, tables.q_independent)
    np.testing.assert_array_equal(loaded_tables.coordination, tables.coordination)
    assert loaded_cfg.mode is ObjectiveMode.MAX_FULFILLMENT
    assert loaded_cfg.seed == 99
    assert episodes == 10

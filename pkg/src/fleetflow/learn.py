"""Training: distance-kernel exploration, independent Q updates, coordinated
probability updates, and the degree-of-coordination loop.

Three tables drive everything, all indexed by (timestep, zone, ...):

* ``q_independent`` holds action values; the diagonal is the wait action.
* ``q_coordinated`` holds relocation probabilities learned from rebalancing
  plans; rows are normalized at sampling time, and an all-zero row falls back
  to the independent argmax.
* ``coordination`` is the per-cell probability that a driver's recommendation
  comes from the coordinated table instead of the independent argmax.

Each episode runs under a frozen snapshot of the tables; cell updates are
applied once per episode from the trace's cohort counts (synchronous batch),
so update order cannot matter.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .city import Action, HexGrid, Scenario
from .errors import ConfigError, ContractViolation, DataError
from .rebalance import (
    MAX_UTILITY,
    MAX_VOLUME,
    build_graph,
    compute_imbalance,
    flow_to_rebalance_matrix,
    rebalance_report,
    solve_rebalance,
)
from .simulate import EpisodeTrace, ObjectiveMode, episode_seed, run_episode

CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class PolicyTables:
    q_independent: np.ndarray  # (T, m, m) action values, wait on the diagonal
    q_coordinated: np.ndarray  # (T, m, m) relocation probabilities
    coordination: np.ndarray   # (T, m) probability of using the coordinated table

    @classmethod
    def zeros(cls, T: int, m: int) -> "PolicyTables":
        return cls(
            q_independent=np.zeros((T, m, m)),
            q_coordinated=np.zeros((T, m, m)),
            coordination=np.zeros((T, m)),
        )

    @property
    def horizon(self) -> int:
        return self.q_independent.shape[0]

    @property
    def m(self) -> int:
        return self.q_independent.shape[1]

    def copy(self) -> "PolicyTables":
        return PolicyTables(
            self.q_independent.copy(),
            self.q_coordinated.copy(),
            self.coordination.copy(),
        )


@dataclass
class TrainConfig:
    episodes: int
    independent_episodes: int   # length of the opening independent-only phase
    coordinated_episodes: int   # length of the closing coordinated phase
    learning_rate: float = 0.01
    discount: float = 0.99
    epsilon_initial: float = 1.0
    epsilon_final: float = 0.01
    kernel_peak: float = 0.7        # scale of the exploration distance kernel
    kernel_width: float = 1.0       # Gaussian width of the kernel
    exploration_reach: int = 3      # farthest ring a random relocation may hit
    imbalance_threshold: float = 2.0
    mode: ObjectiveMode = ObjectiveMode.MAX_EARNINGS
    seed: int = 0

    def validate(self) -> "TrainConfig":
        if self.episodes < 1:
            raise ConfigError("episodes must be >= 1")
        if not 0 < self.learning_rate <= 1:
            raise ConfigError("learning_rate must be in (0, 1]")
        if not 0 < self.discount <= 1:
            raise ConfigError("discount must be in (0, 1]")
        if not 0 < self.kernel_peak <= 1:
            raise ConfigError("kernel_peak must be in (0, 1]")
        if self.kernel_width <= 0:
            raise ConfigError("kernel_width must be > 0")
        if self.exploration_reach < 0:
            raise ConfigError("exploration_reach must be >= 0")
        if not 0 <= self.epsilon_final <= self.epsilon_initial <= 1:
            raise ConfigError("need 0 <= epsilon_final <= epsilon_initial <= 1")
        if self.coordinated_episodes < 0 or self.independent_episodes < 0:
            raise ConfigError("phase lengths must be >= 0")
        if self.imbalance_threshold < 0:
            raise ConfigError("imbalance_threshold must be >= 0")
        return self

    def epsilon_at(self, episode: int) -> float:
        """Exponential anneal hitting epsilon_final exactly at the last episode."""
        if self.episodes == 1 or self.epsilon_initial == 0:
            return self.epsilon_initial
        floor = max(self.epsilon_final, 1e-12)
        lam = math.log(self.epsilon_initial / floor) / (self.episodes - 1)
        return max(self.epsilon_final, self.epsilon_initial * math.exp(-lam * episode))

    def coordination_active(self, episode: int) -> bool:
        return episode >= self.episodes - self.coordinated_episodes


# ---------------------------------------------------------------------------
# Exploration
# ---------------------------------------------------------------------------

class ExplorationKernel:
    """Gaussian ride-distance kernel, normalized over the rings that exist.

    The ring distance k is drawn with weight peak * exp(-k^2 / (2 width^2))
    restricted to nonempty rings within reach, then the destination is uniform
    on that ring; k = 0 is the wait action.
    """

    def __init__(self, grid: HexGrid, peak: float, width: float, reach: int):
        self.grid = grid
        self._ks: list[np.ndarray] = []
        self._probs: list[np.ndarray] = []
        for h in range(grid.m):
            rings = grid.rings(h)
            ks = [k for k in range(min(reach, len(rings) - 1) + 1) if rings[k]]
            weights = np.array(
                [peak * math.exp(-(k**2) / (2 * width**2)) for k in ks]
            )
            self._ks.append(np.array(ks))
            self._probs.append(weights / weights.sum())

    def ring_probabilities(self, zone: int) -> tuple[np.ndarray, np.ndarray]:
        return self._ks[zone], self._probs[zone]

    def sample(self, zone: int, rng: np.random.Generator, size: int) -> np.ndarray:
        ks, probs = self._ks[zone], self._probs[zone]
        cumulative = np.cumsum(probs)
        idx = np.searchsorted(cumulative, rng.random(size), side="right")
        drawn = ks[np.minimum(idx, len(ks) - 1)]
        out = np.full(size, zone, dtype=np.int64)
        for k in np.unique(drawn):
            if k == 0:
                continue
            ring = np.asarray(self.grid.zones_at_distance(zone, int(k)))
            sel = drawn == k
            out[sel] = ring[rng.integers(0, len(ring), size=int(sel.sum()))]
        return out


def sample_exploration(
    grid: HexGrid, zone: int, peak: float, width: float, reach: int,
    rng: np.random.Generator,
) -> Action:
    """One exploratory action drawn from the distance kernel."""
    kernel = ExplorationKernel(grid, peak, width, reach)
    dest = int(kernel.sample(zone, rng, 1)[0])
    return Action.to(zone, dest)


# ---------------------------------------------------------------------------
# Action choice from the tables
# ---------------------------------------------------------------------------

def best_independent_action(q_independent: np.ndarray, t: int, h: int) -> int:
    """Argmax destination for (t, h); ties prefer waiting, then lowest index."""
    row = q_independent[t, h]
    best = row.max()
    if row[h] == best:
        return h
    return int(np.flatnonzero(row == best)[0])


def greedy_destinations(q_independent: np.ndarray) -> np.ndarray:
    """Vectorized best_independent_action over every (t, h) cell."""
    T, m, _ = q_independent.shape
    best = q_independent.max(axis=2, keepdims=True)
    is_max = q_independent == best
    first = is_max.argmax(axis=2)
    diag = np.arange(m)
    wait_is_max = is_max[:, diag, diag]
    return np.where(wait_is_max, diag[None, :], first)


def coordinated_distribution(tables: PolicyTables, t: int, h: int):
    """Normalized coordinated row, or None when it carries no mass."""
    row = tables.q_coordinated[t, h]
    if np.any(row < 0):
        raise ContractViolation(f"negative coordinated probability at (t={t}, h={h})")
    total = row.sum()
    if total <= 0:
        return None
    return row / total


def sample_coordinated_action(
    tables: PolicyTables, t: int, h: int, rng: np.random.Generator
) -> int:
    """Sample a destination from the coordinated row; zero rows fall back to
    the independent argmax."""
    probs = coordinated_distribution(tables, t, h)
    if probs is None:
        return best_independent_action(tables.q_independent, t, h)
    return int(rng.choice(tables.m, p=probs))


# ---------------------------------------------------------------------------
# Table updates
# ---------------------------------------------------------------------------

def _immediate_rewards(matrices, t: int, h: int, mode: ObjectiveMode):
    """(success reward per destination, failure reward, relocation reward per
    destination) under the active objective."""
    if mode is ObjectiveMode.MAX_EARNINGS:
        return (
            matrices.reward[t, h].astype(np.float64),
            0.0,
            -matrices.relocation_cost[t, h].astype(np.float64),
        )
    m = matrices.m
    return np.ones(m), -1.0, np.zeros(m)


def _best_value(q_independent: np.ndarray, t: int, h: int) -> float:
    """Value of the best action at (t, h); zero beyond the horizon."""
    if t >= q_independent.shape[0]:
        return 0.0
    return float(q_independent[t, h].max())


def update_q_wait(
    q_independent: np.ndarray,
    t: int,
    h: int,
    wait_counts: np.ndarray,
    matrices,
    alpha: float,
    gamma: float,
    mode: ObjectiveMode = ObjectiveMode.MAX_EARNINGS,
) -> float:
    """New value for the wait cell (t, h, h) given the wait cohort's outcomes.

    ``wait_counts[g]`` is how many waiting drivers ended up in zone g; the
    diagonal entry counts the unsuccessful waits.  The update averages the
    cohort's realized utility.
    """
    total = wait_counts.sum()
    if total < 1:
        raise ContractViolation("wait update needs at least one waiting driver")
    success_reward, failure_reward, _ = _immediate_rewards(matrices, t, h, mode)
    utility = 0.0
    for g in np.flatnonzero(wait_counts):
        g = int(g)
        if g == h:
            reward = failure_reward
            t_next = t + 1
        else:
            reward = float(success_reward[g])
            t_next = t + int(matrices.travel_time[t, h, g])
        utility += wait_counts[g] * (
            reward + gamma * _best_value(q_independent, t_next, g)
        )
    old = q_independent[t, h, h]
    return float((1 - alpha) * old + (alpha / total) * utility)


def update_q_relocate(
    q_independent: np.ndarray,
    t: int,
    h: int,
    dest: int,
    count: int,
    matrices,
    alpha: float,
    gamma: float,
    mode: ObjectiveMode = ObjectiveMode.MAX_EARNINGS,
) -> float:
    """New value for the relocate cell (t, h, dest); the cohort-size
    normalization cancels, leaving the per-driver utility."""
    if count < 1:
        raise ContractViolation("relocate update needs at least one relocator")
    if dest == h:
        raise ContractViolation("relocation must change zones")
    _, _, relocation_reward = _immediate_rewards(matrices, t, h, mode)
    t_next = t + int(matrices.travel_time[t, h, dest])
    per_driver = float(relocation_reward[dest]) + gamma * _best_value(
        q_independent, t_next, dest
    )
    old = q_independent[t, h, dest]
    return float((1 - alpha) * old + alpha * per_driver)


def batch_update_q_independent(
    q_independent: np.ndarray,
    trace: EpisodeTrace,
    matrices,
    alpha: float,
    gamma: float,
    mode: ObjectiveMode = ObjectiveMode.MAX_EARNINGS,
) -> np.ndarray:
    """Apply the wait and relocate updates for every visited cell at once,
    reading only the pre-episode snapshot (synchronous batch update)."""
    T, m, _ = q_independent.shape
    values = q_independent.max(axis=2)
    values_pad = np.vstack([values, np.zeros((1, m))])

    t_next = np.minimum(
        np.arange(T)[:, None, None] + matrices.travel_time, T
    ).astype(np.int64)
    dest_idx = np.broadcast_to(np.arange(m)[None, None, :], (T, m, m))
    future = values_pad[t_next, dest_idx]

    if mode is ObjectiveMode.MAX_EARNINGS:
        success = matrices.reward.astype(np.float64)
        failure = 0.0
        relocation = -matrices.relocation_cost.astype(np.float64)
    else:
        success = np.ones((T, m, m))
        failure = -1.0
        relocation = np.zeros((T, m, m))

    contrib = success + gamma * future
    diag = np.arange(m)
    step_next = np.minimum(np.arange(T) + 1, T)
    contrib[:, diag, diag] = failure + gamma * values_pad[step_next][:, diag]

    waits = trace.wait_outcomes.astype(np.float64)
    wait_totals = waits.sum(axis=2)
    wait_utility = (waits * contrib).sum(axis=2)

    new_q = q_independent.copy()
    visited = wait_totals >= 1
    old_diag = q_independent[:, diag, diag]
    updated_diag = (1 - alpha) * old_diag + alpha * np.divide(
        wait_utility, wait_totals, out=np.zeros_like(wait_utility),
        where=wait_totals > 0,
    )
    new_q[:, diag, diag] = np.where(visited, updated_diag, old_diag)

    per_driver = relocation + gamma * future
    relocated = trace.relocations >= 1
    relocated[:, diag, diag] = False
    new_q = np.where(
        relocated, (1 - alpha) * q_independent + alpha * per_driver, new_q
    )
    return new_q


def update_q_coordinated(
    q_coordinated: np.ndarray, rebalance_probs: np.ndarray, alpha: float
) -> np.ndarray:
    """Elementwise convex step toward the episode's rebalance matrix."""
    if np.any(rebalance_probs < 0) or np.any(rebalance_probs > 1):
        raise ContractViolation("rebalance probabilities must lie in [0, 1]")
    return (1 - alpha) * q_coordinated + alpha * rebalance_probs


def update_coordination(
    coordination: np.ndarray,
    masked_delta: np.ndarray,
    supply: np.ndarray,
    demand_out: np.ndarray,
    alpha: float,
) -> np.ndarray:
    """Move each cell toward its rebalancing ratio.

    Excess cells target the surplus share of their supply; deficit cells that
    already coordinate target the unmet share of their demand (damping
    relocations away from them); balanced cells decay toward zero.
    """
    mu = np.zeros_like(coordination)
    pos = masked_delta > 0
    np.divide(masked_delta, supply, out=mu, where=pos & (supply > 0))
    neg = (masked_delta < 0) & (coordination > 0)
    np.divide(-masked_delta, demand_out, out=mu, where=neg & (demand_out > 0))
    return np.clip((1 - alpha) * coordination + alpha * mu, 0.0, 1.0)


# ---------------------------------------------------------------------------
# The per-episode policy and the training loop
# ---------------------------------------------------------------------------

class TrainingPolicy:
    """Frozen-tables policy for one training episode.

    Per driver: explore with probability epsilon; otherwise use the
    coordinated table with probability coordination[t, h] (when the
    coordinated phase is active), else the independent argmax.
    """

    def __init__(self, tables: PolicyTables, kernel: ExplorationKernel,
                 epsilon: float, coordination_active: bool):
        self.tables = tables
        self.kernel = kernel
        self.epsilon = epsilon
        self.coordination_active = coordination_active
        self._greedy = greedy_destinations(tables.q_independent)

    def destinations(self, t, zone, driver_ids, rng):
        k = len(driver_ids)
        out = np.full(k, self._greedy[t, zone], dtype=np.int64)
        explore = rng.random(k) <= self.epsilon if self.epsilon > 0 else np.zeros(k, bool)
        exploit = ~explore
        n_exploit = int(exploit.sum())
        if self.coordination_active and n_exploit:
            xi = self.tables.coordination[t, zone]
            if xi > 0:
                coordinated = np.zeros(k, dtype=bool)
                coordinated[exploit] = rng.random(n_exploit) <= xi
                probs = coordinated_distribution(self.tables, t, zone)
                n_coord = int(coordinated.sum())
                if probs is not None and n_coord:
                    out[coordinated] = rng.choice(
                        self.tables.m, size=n_coord, p=probs
                    )
        if explore.any():
            out[explore] = self.kernel.sample(zone, rng, int(explore.sum()))
        return out


@dataclass
class EpisodeMetrics:
    episode: int
    epsilon: float
    mean_earnings: float
    fulfillment_pct: float
    coordination_cells: int


@dataclass
class TrainResult:
    tables: PolicyTables
    metrics: list[EpisodeMetrics]
    config: TrainConfig
    last_rebalance: dict | None = None  # audit trail of the final episode's plan


def train(scenario: Scenario, n_drivers: int, config: TrainConfig) -> TrainResult:
    """Run the full learning loop over one scenario."""
    config.validate()
    matrices = scenario.matrices
    T, m = matrices.horizon, matrices.m
    tables = PolicyTables.zeros(T, m)
    kernel = ExplorationKernel(
        scenario.grid, config.kernel_peak, config.kernel_width,
        config.exploration_reach,
    )
    demand_out = matrices.demand_out()
    total_demand = int(matrices.demand.sum())
    metrics: list[EpisodeMetrics] = []
    last_plan = None

    for episode in range(config.episodes):
        epsilon = config.epsilon_at(episode)
        coordinating = config.coordination_active(episode)
        policy = TrainingPolicy(tables, kernel, epsilon, coordinating)
        trace = run_episode(
            matrices, n_drivers, policy, config.mode,
            episode_seed(config.seed, episode),
            collect_log=False,  # learning only consumes the cohort counts
        )

        new_q = batch_update_q_independent(
            tables.q_independent, trace, matrices,
            config.learning_rate, config.discount, config.mode,
        )
        if coordinating:
            imbalance = compute_imbalance(
                trace, matrices.demand, config.imbalance_threshold
            )
            graph = build_graph(imbalance, matrices, tables.q_independent)
            objective = (
                MAX_UTILITY if config.mode is ObjectiveMode.MAX_EARNINGS
                else MAX_VOLUME
            )
            solution = solve_rebalance(graph, objective)
            zeta = flow_to_rebalance_matrix(solution, graph, imbalance, m)
            tables.q_coordinated = update_q_coordinated(
                tables.q_coordinated, zeta, config.learning_rate
            )
            tables.coordination = update_coordination(
                tables.coordination, imbalance.delta,
                trace.supply.astype(np.float64), demand_out,
                config.learning_rate,
            )
            last_plan = (graph, solution)
        tables.q_independent = new_q

        fulfillment = (
            100.0 * trace.total_fulfilled() / total_demand if total_demand else 100.0
        )
        metrics.append(
            EpisodeMetrics(
                episode=episode,
                epsilon=epsilon,
                mean_earnings=float(trace.earnings.mean()),
                fulfillment_pct=fulfillment,
                coordination_cells=int((tables.coordination > 0).sum()),
            )
        )
    last_report = rebalance_report(*last_plan) if last_plan else None
    return TrainResult(tables=tables, metrics=metrics, config=config,
                       last_rebalance=last_report)


# ---------------------------------------------------------------------------
# Checkpoints and training logs
# ---------------------------------------------------------------------------

def save_checkpoint(path, tables: PolicyTables, config: TrainConfig,
                    episodes_completed: int) -> None:
    doc = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "episodes_completed": episodes_completed,
        "config": {
            "episodes": config.episodes,
            "independent_episodes": config.independent_episodes,
            "coordinated_episodes": config.coordinated_episodes,
            "learning_rate": config.learning_rate,
            "discount": config.discount,
            "epsilon_initial": config.epsilon_initial,
            "epsilon_final": config.epsilon_final,
            "kernel_peak": config.kernel_peak,
            "kernel_width": config.kernel_width,
            "exploration_reach": config.exploration_reach,
            "imbalance_threshold": config.imbalance_threshold,
            "mode": config.mode.value,
            "seed": config.seed,
        },
        "q_independent": tables.q_independent.tolist(),
        "q_coordinated": tables.q_coordinated.tolist(),
        "coordination": tables.coordination.tolist(),
    }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path) -> tuple[PolicyTables, TrainConfig, int]:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if doc.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise DataError(
            f"unsupported checkpoint format_version: {doc.get('format_version')!r}"
        )
    cfg = doc["config"]
    config = TrainConfig(
        episodes=cfg["episodes"],
        independent_episodes=cfg["independent_episodes"],
        coordinated_episodes=cfg["coordinated_episodes"],
        learning_rate=cfg["learning_rate"],
        discount=cfg["discount"],
        epsilon_initial=cfg["epsilon_initial"],
        epsilon_final=cfg["epsilon_final"],
        kernel_peak=cfg["kernel_peak"],
        kernel_width=cfg["kernel_width"],
        exploration_reach=cfg["exploration_reach"],
        imbalance_threshold=cfg["imbalance_threshold"],
        mode=ObjectiveMode(cfg["mode"]),
        seed=cfg["seed"],
    )
    tables = PolicyTables(
        q_independent=np.asarray(doc["q_independent"], dtype=np.float64),
        q_coordinated=np.asarray(doc["q_coordinated"], dtype=np.float64),
        coordination=np.asarray(doc["coordination"], dtype=np.float64),
    )
    return tables, config, int(doc["episodes_completed"])


def write_training_log(path, metrics: list[EpisodeMetrics]) -> None:
    with open(path, "w") as fh:
        fh.write("episode,epsilon,mean_earnings,fulfillment_pct,coordination_cells\n")
        for row in metrics:
            fh.write(
                f"{row.episode},{row.epsilon!r},{row.mean_earnings!r},"
                f"{row.fulfillment_pct!r},{row.coordination_cells}\n"
            )

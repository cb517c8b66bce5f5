"""Policy evaluation, baselines, mixed populations, and the experiment suite.

Evaluation runs episodes in pure exploitation (no exploration) and reports
earnings statistics, demand fulfillment with and without the warm-up window,
the success-to-failure wait ratio, and how long unmet requests would have had
to wait for an idle driver to show up in their zone.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .city import HexGrid, Scenario
from .errors import ConfigError, ContractViolation, DataError
from .learn import (
    PolicyTables,
    TrainConfig,
    coordinated_distribution,
    greedy_destinations,
    train,
)
from .simulate import EpisodeTrace, ObjectiveMode, run_episode

WAIT_BUCKETS_MINUTES = (5, 10, 15)


class GreedyPolicy:
    """Pure-exploitation policy: coordinated row with probability
    coordination[t, h], independent argmax otherwise.

    ``distribution(t, h)`` is the exact per-driver recommendation law; it
    depends on nothing but (t, h) and the tables, which is what makes the
    recommendations envy-free for co-located drivers.
    """

    def __init__(self, tables: PolicyTables):
        self.tables = tables
        self._greedy = greedy_destinations(tables.q_independent)

    def distribution(self, t: int, zone: int) -> np.ndarray:
        m = self.tables.m
        out = np.zeros(m)
        xi = float(self.tables.coordination[t, zone])
        probs = coordinated_distribution(self.tables, t, zone)
        if probs is None or xi == 0.0:
            out[self._greedy[t, zone]] = 1.0
            return out
        out += xi * probs
        out[self._greedy[t, zone]] += 1.0 - xi
        return out

    def destinations(self, t, zone, driver_ids, rng):
        probs = self.distribution(t, zone)
        return rng.choice(self.tables.m, size=len(driver_ids), p=probs)


@dataclass
class NaivePolicyParams:
    """Heuristic drivers: mostly wait, sometimes head for a popular zone."""

    popular_zone_count: int = 15
    relocation_probability: float = 0.25

    def validate(self):
        if not 0 <= self.relocation_probability <= 1:
            raise ConfigError("relocation_probability must be in [0, 1]")
        if self.popular_zone_count < 1:
            raise ConfigError("popular_zone_count must be >= 1")
        return self


class NaivePolicy:
    """Waits with probability 1 - p; otherwise relocates to a popular zone
    chosen with probability inversely proportional to its hex distance.

    Popular zones are the heaviest origins in the historical demand.  The
    current zone is never a relocation target.
    """

    def __init__(self, params: NaivePolicyParams, grid: HexGrid,
                 historical_demand: np.ndarray):
        params.validate()
        self.params = params
        self.grid = grid
        totals = np.asarray(historical_demand).sum(axis=(0, 2))
        count = min(params.popular_zone_count, grid.m)
        order = np.lexsort((np.arange(grid.m), -totals))
        self.popular = np.sort(order[:count])
        self._target_probs: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        for h in range(grid.m):
            targets = np.array([z for z in self.popular if z != h])
            if len(targets) == 0:
                self._target_probs[h] = (targets, np.zeros(0))
                continue
            weights = np.array(
                [1.0 / self.grid.distance(h, z) for z in targets]
            )
            self._target_probs[h] = (targets, weights / weights.sum())

    def relocation_distribution(self, zone: int):
        return self._target_probs[zone]

    def destinations(self, t, zone, driver_ids, rng):
        k = len(driver_ids)
        out = np.full(k, zone, dtype=np.int64)
        targets, probs = self._target_probs[zone]
        if len(targets) == 0:
            return out
        move = rng.random(k) < self.params.relocation_probability
        n_move = int(move.sum())
        if n_move:
            out[move] = rng.choice(targets, size=n_move, p=probs)
        return out


class MixedPolicy:
    """First ``n_strategic`` driver ids follow the trained policy, the rest
    act naively; within a cohort, co-located drivers stay interchangeable."""

    def __init__(self, strategic: GreedyPolicy, naive: NaivePolicy, n_strategic: int):
        self.strategic = strategic
        self.naive = naive
        self.n_strategic = n_strategic

    def destinations(self, t, zone, driver_ids, rng):
        ids = np.asarray(driver_ids)
        out = np.empty(len(ids), dtype=np.int64)
        strategic = ids < self.n_strategic
        if strategic.any():
            out[strategic] = self.strategic.destinations(
                t, zone, ids[strategic], rng
            )
        if (~strategic).any():
            out[~strategic] = self.naive.destinations(t, zone, ids[~strategic], rng)
        return out


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def wait_time_fractions(trace: EpisodeTrace, slice_minutes: int) -> dict[str, float]:
    """How long each unmet request would have waited for an idle driver in its
    zone; fractions over the four buckets sum to 1 when any demand went unmet.
    """
    T, _ = trace.supply.shape
    horizon_steps = math.ceil(WAIT_BUCKETS_MINUTES[-1] / slice_minutes)
    labels = [f"<={w}" for w in WAIT_BUCKETS_MINUTES] + [f">{WAIT_BUCKETS_MINUTES[-1]}"]
    counts = dict.fromkeys(labels, 0)
    total = 0
    for t, h in zip(*np.nonzero(trace.unmet)):
        n = int(trace.unmet[t, h])
        total += n
        waited = None
        for t2 in range(t + 1, min(t + horizon_steps, T - 1) + 1):
            if trace.supply[t2, h] > 0:
                waited = (t2 - t) * slice_minutes
                break
        if waited is None:
            counts[labels[-1]] += n
        else:
            for w, label in zip(WAIT_BUCKETS_MINUTES, labels):
                if waited <= w:
                    counts[label] += n
                    break
            else:
                counts[labels[-1]] += n
    if total == 0:
        return dict.fromkeys(labels, 0.0)
    return {k: v / total for k, v in counts.items()}


@dataclass
class EvalReport:
    mean_earnings: float
    median_earnings: float
    q1_earnings: float
    q3_earnings: float
    fulfillment_pct: float
    fulfillment_pct_after_warmup: float
    wait_success_ratio: float  # successful waits per unsuccessful wait
    wait_times: dict[str, float]
    zero_demand: bool
    seeds: list[int] = field(default_factory=list)
    per_seed_fulfillment: list[float] = field(default_factory=list)
    per_seed_mean_earnings: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "mean_earnings": self.mean_earnings,
            "median_earnings": self.median_earnings,
            "q1_earnings": self.q1_earnings,
            "q3_earnings": self.q3_earnings,
            "fulfillment_pct": self.fulfillment_pct,
            "fulfillment_pct_after_warmup": self.fulfillment_pct_after_warmup,
            "wait_success_ratio": self.wait_success_ratio,
            "wait_times": self.wait_times,
            "zero_demand": self.zero_demand,
            "seeds": self.seeds,
            "per_seed_fulfillment": self.per_seed_fulfillment,
            "per_seed_mean_earnings": self.per_seed_mean_earnings,
        }


def _episode_job(args):
    matrices, n_drivers, tables, mode, seed = args
    policy = GreedyPolicy(tables)
    return run_episode(matrices, n_drivers, policy, mode, seed)


def run_policy_episodes(
    scenario: Scenario,
    tables: PolicyTables,
    n_drivers: int,
    seeds: list[int],
    mode: ObjectiveMode = ObjectiveMode.MAX_EARNINGS,
    workers: int = 1,
) -> list[EpisodeTrace]:
    """One greedy episode per seed; a worker pool never changes the traces
    because each episode's randomness is derived from its own seed."""
    jobs = [(scenario.matrices, n_drivers, tables, mode, s) for s in seeds]
    if workers <= 1 or len(jobs) <= 1:
        return [_episode_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_episode_job, jobs))


def evaluate(
    tables: PolicyTables,
    scenario: Scenario,
    n_drivers: int,
    seeds: list[int],
    warmup_minutes: int = 60,
    workers: int = 1,
    mode: ObjectiveMode = ObjectiveMode.MAX_EARNINGS,
) -> EvalReport:
    """Average pure-exploitation performance over the given seeds."""
    if tables.horizon != scenario.matrices.horizon or tables.m != scenario.matrices.m:
        raise ConfigError(
            f"tables cover (T={tables.horizon}, m={tables.m}) but scenario is "
            f"(T={scenario.matrices.horizon}, m={scenario.matrices.m})"
        )
    if not seeds:
        raise ConfigError("need at least one evaluation seed")
    traces = run_policy_episodes(scenario, tables, n_drivers, seeds, mode, workers)

    demand_total = int(scenario.matrices.demand.sum())
    warmup_steps = min(
        warmup_minutes // scenario.slice_minutes, scenario.matrices.horizon
    )
    late_demand = int(scenario.matrices.demand[warmup_steps:].sum())

    earnings = np.concatenate([tr.earnings for tr in traces])
    fulfillment = [
        100.0 * tr.total_fulfilled() / demand_total if demand_total else 100.0
        for tr in traces
    ]
    late_fulfillment = [
        100.0 * int(tr.fulfilled[warmup_steps:].sum()) / late_demand
        if late_demand else 100.0
        for tr in traces
    ]
    diag = np.arange(scenario.matrices.m)
    successes = sum(
        int(tr.wait_outcomes.sum() - tr.wait_outcomes[:, diag, diag].sum())
        for tr in traces
    )
    failures = sum(int(tr.wait_outcomes[:, diag, diag].sum()) for tr in traces)
    ratio = successes / failures if failures else float("inf")

    merged_waits = dict.fromkeys(
        wait_time_fractions(traces[0], scenario.slice_minutes), 0.0
    )
    unmet_totals = [int(tr.unmet.sum()) for tr in traces]
    if sum(unmet_totals) > 0:
        for tr, u in zip(traces, unmet_totals):
            fractions = wait_time_fractions(tr, scenario.slice_minutes)
            for k, v in fractions.items():
                merged_waits[k] += v * u
        merged_waits = {k: v / sum(unmet_totals) for k, v in merged_waits.items()}

    q1, q2, q3 = np.percentile(earnings, [25, 50, 75])
    return EvalReport(
        mean_earnings=float(earnings.mean()),
        median_earnings=float(q2),
        q1_earnings=float(q1),
        q3_earnings=float(q3),
        fulfillment_pct=float(np.mean(fulfillment)),
        fulfillment_pct_after_warmup=float(np.mean(late_fulfillment)),
        wait_success_ratio=ratio,
        wait_times=merged_waits,
        zero_demand=demand_total == 0,
        seeds=list(seeds),
        per_seed_fulfillment=[float(f) for f in fulfillment],
        per_seed_mean_earnings=[float(tr.earnings.mean()) for tr in traces],
    )


@dataclass
class CohortStats:
    mean: float
    q1: float
    q3: float
    whisker_low: float
    whisker_high: float

    @property
    def iqr(self) -> float:
        return self.q3 - self.q1


def cohort_stats(earnings: np.ndarray) -> CohortStats:
    q1, q3 = np.percentile(earnings, [25, 75])
    iqr = q3 - q1
    return CohortStats(
        mean=float(earnings.mean()),
        q1=float(q1),
        q3=float(q3),
        whisker_low=float(q1 - 1.5 * iqr),
        whisker_high=float(q3 + 1.5 * iqr),
    )


def mixed_population_eval(
    strategic_fraction: float,
    tables: PolicyTables,
    naive_params: NaivePolicyParams,
    scenario: Scenario,
    n_drivers: int,
    seeds: list[int],
) -> dict[str, CohortStats]:
    """Split the fleet into strategic and naive cohorts and compare earnings."""
    if not 0 <= strategic_fraction <= 1:
        raise ConfigError("strategic_fraction must be in [0, 1]")
    n_strategic = math.ceil(strategic_fraction * n_drivers)
    policy = MixedPolicy(
        GreedyPolicy(tables),
        NaivePolicy(naive_params, scenario.grid, scenario.matrices.demand),
        n_strategic,
    )
    strategic_earnings, naive_earnings = [], []
    for seed in seeds:
        trace = run_episode(
            scenario.matrices, n_drivers, policy, ObjectiveMode.MAX_EARNINGS, seed
        )
        strategic_earnings.append(trace.earnings[:n_strategic])
        naive_earnings.append(trace.earnings[n_strategic:])
    out = {}
    strategic_all = np.concatenate(strategic_earnings)
    naive_all = np.concatenate(naive_earnings)
    if len(strategic_all):
        out["strategic"] = cohort_stats(strategic_all)
    if len(naive_all):
        out["naive"] = cohort_stats(naive_all)
    return out


def generalization_error(
    base_tables: PolicyTables,
    test_scenario: Scenario,
    n_test: int,
    reference_tables: PolicyTables,
    seeds: list[int],
) -> float:
    """Signed percentage shortfall of the base policy against a policy trained
    for the test conditions; negative when the base policy wins."""
    base = evaluate(base_tables, test_scenario, n_test, seeds)
    reference = evaluate(reference_tables, test_scenario, n_test, seeds)
    if reference.fulfillment_pct == 0:
        raise DataError("reference fulfillment is zero; error undefined")
    return 100.0 * (
        (reference.fulfillment_pct - base.fulfillment_pct)
        / reference.fulfillment_pct
    )


def sign_test_pvalue(wins: int, losses: int) -> float:
    """One-sided sign test: P[X >= wins] for X ~ Binomial(wins+losses, 1/2)."""
    n = wins + losses
    if n == 0:
        return 1.0
    return sum(math.comb(n, k) for k in range(wins, n + 1)) / 2**n


def heatmap_rows(
    tables: PolicyTables, grid: HexGrid, t: int
) -> list[tuple[int, int, int, float]]:
    """(zone, q, r, coordinated-wait probability) rows for one timestep."""
    if not 0 <= t < tables.horizon:
        raise ConfigError(f"snapshot time {t} outside horizon {tables.horizon}")
    diag = tables.q_coordinated[t, np.arange(tables.m), np.arange(tables.m)]
    return [
        (h, grid.coords[h][0], grid.coords[h][1], float(diag[h]))
        for h in range(grid.m)
    ]


def export_heatmap_csv(path, tables: PolicyTables, grid: HexGrid, t: int) -> None:
    rows = heatmap_rows(tables, grid, t)
    with open(path, "w") as fh:
        fh.write("zone,q,r,coordinated_wait_probability\n")
        for zone, q, r, value in rows:
            fh.write(f"{zone},{q},{r},{value!r}\n")


# ---------------------------------------------------------------------------
# Experiment suite
# ---------------------------------------------------------------------------

@dataclass
class SuiteConfig:
    scenario: Scenario
    base_train: TrainConfig
    n_drivers: int
    eval_seeds: list[int]
    supply_values: list[int] = field(default_factory=list)
    overlap_grid: list[tuple[int, int]] = field(default_factory=list)  # (IL, CL)
    compare_objectives: bool = False
    snapshot_times: list[int] = field(default_factory=list)
    workers: int = 1


def _suite_train_eval(args):
    scenario, cfg, n_drivers, eval_seeds = args
    result = train(scenario, n_drivers, cfg)
    report = evaluate(result.tables, scenario, n_drivers, eval_seeds, mode=cfg.mode)
    return result, report


def _clone_config(base: TrainConfig, **overrides) -> TrainConfig:
    fields = dict(
        episodes=base.episodes,
        independent_episodes=base.independent_episodes,
        coordinated_episodes=base.coordinated_episodes,
        learning_rate=base.learning_rate,
        discount=base.discount,
        epsilon_initial=base.epsilon_initial,
        epsilon_final=base.epsilon_final,
        kernel_peak=base.kernel_peak,
        kernel_width=base.kernel_width,
        exploration_reach=base.exploration_reach,
        imbalance_threshold=base.imbalance_threshold,
        mode=base.mode,
        seed=base.seed,
    )
    fields.update(overrides)
    return TrainConfig(**fields)


def experiment_suite(config: SuiteConfig, outdir) -> dict:
    """Run the configured sweeps, one metrics file per point; failures are
    recorded and the suite keeps going."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    jobs: list[tuple[str, tuple]] = []
    for n in config.supply_values:
        jobs.append((
            f"supply_{n}",
            (config.scenario, config.base_train, n, config.eval_seeds),
        ))
    for il, cl in config.overlap_grid:
        cfg = _clone_config(config.base_train, independent_episodes=il,
                            coordinated_episodes=cl)
        jobs.append((
            f"overlap_il{il}_cl{cl}",
            (config.scenario, cfg, config.n_drivers, config.eval_seeds),
        ))
    if config.compare_objectives:
        for mode in ObjectiveMode:
            cfg = _clone_config(config.base_train, mode=mode)
            jobs.append((
                f"objective_{mode.value}",
                (config.scenario, cfg, config.n_drivers, config.eval_seeds),
            ))
    if not jobs:
        jobs.append((
            "single",
            (config.scenario, config.base_train, config.n_drivers,
             config.eval_seeds),
        ))

    summary = {"points": [], "failures": []}
    if config.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            outcomes = list(pool.map(_suite_job_safe, [(n, a) for n, a in jobs]))
    else:
        outcomes = [_suite_job_safe(job) for job in jobs]

    for name, outcome in zip((n for n, _ in jobs), outcomes):
        error, result, report = outcome
        if error is not None:
            summary["failures"].append({"point": name, "error": error})
            continue
        point_path = outdir / f"{name}.csv"
        with open(point_path, "w") as fh:
            fh.write(
                "point,mean_earnings,fulfillment_pct,"
                "fulfillment_pct_after_warmup,wait_success_ratio\n"
            )
            fh.write(
                f"{name},{report.mean_earnings!r},{report.fulfillment_pct!r},"
                f"{report.fulfillment_pct_after_warmup!r},"
                f"{report.wait_success_ratio!r}\n"
            )
        for t in config.snapshot_times:
            export_heatmap_csv(
                outdir / f"{name}_heatmap_t{t}.csv",
                result.tables, config.scenario.grid, t,
            )
        summary["points"].append({"point": name, "file": point_path.name,
                                  "fulfillment_pct": report.fulfillment_pct})
    if summary["failures"]:
        with open(outdir / "failures.csv", "w") as fh:
            fh.write("point,error\n")
            for row in summary["failures"]:
                fh.write(f"{row['point']},{row['error']}\n")
    (outdir / "summary.json").write_text(json.dumps(summary, indent=2))
    return summary


def _suite_job_safe(job):
    name, args = job
    try:
        result, report = _suite_train_eval(args)
        return None, result, report
    except Exception as exc:  # partial failures must not kill the sweep
        return f"{type(exc).__name__}: {exc}", None, None

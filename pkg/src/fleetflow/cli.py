"""Command-line entry points: scenario construction, training, evaluation,
sweeps, heatmap export, and the environment protocol server.

Every flag can also live in a JSON config file (--config); explicit flags win.
Exit codes: 0 success, 2 configuration error, 3 data error, 4 internal
contract violation.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .city import HexGrid, Scenario
from .envserver import serve
from .errors import ConfigError, ContractViolation, DataError
from .evaluate import (
    SuiteConfig,
    evaluate,
    experiment_suite,
    export_heatmap_csv,
    generalization_error,
    run_policy_episodes,
)
from .ingest import (
    GeoConfig,
    Hotspot,
    SyntheticCityParams,
    bin_trips,
    generate_synthetic_city,
    impute_fixed_effects,
    read_trip_csv,
)
from .learn import (
    TrainConfig,
    load_checkpoint,
    save_checkpoint,
    train,
    write_training_log,
)
from .simulate import ObjectiveMode, export_trace_csv

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_CONTRACT = 4


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return doc


def _setting(args, config: dict, name: str, default=None, required: bool = False):
    """Flag value if given, else config value, else default."""
    value = getattr(args, name.replace("-", "_"), None)
    if value is None:
        value = config.get(name, default)
    if value is None and required:
        raise ConfigError(f"missing required setting --{name}")
    return value


def _parse_seeds(text) -> list[int]:
    if isinstance(text, list):
        return [int(s) for s in text]
    try:
        return [int(s) for s in str(text).split(",") if s.strip() != ""]
    except ValueError as exc:
        raise ConfigError(f"bad seed list {text!r}") from exc


def _parse_hotspot(text) -> Hotspot:
    parts = text.split(":")
    if len(parts) not in (3, 4):
        raise ConfigError(
            f"hotspot {text!r} must be zone:peak:amplitude[:width]"
        )
    width = float(parts[3]) if len(parts) == 4 else 3.0
    return Hotspot(zone=int(parts[0]), peak_time=int(parts[1]),
                   amplitude=float(parts[2]), width=width)


def _train_config(args, config: dict) -> TrainConfig:
    mode_name = str(_setting(args, config, "mode", "max_earnings"))
    try:
        mode = ObjectiveMode(mode_name)
    except ValueError as exc:
        raise ConfigError(f"unknown mode {mode_name!r}") from exc
    episodes = int(_setting(args, config, "episodes", required=True))
    return TrainConfig(
        episodes=episodes,
        independent_episodes=int(
            _setting(args, config, "independent-episodes", episodes)
        ),
        coordinated_episodes=int(
            _setting(args, config, "coordinated-episodes", 0)
        ),
        learning_rate=float(_setting(args, config, "learning-rate", 0.01)),
        discount=float(_setting(args, config, "discount", 0.99)),
        epsilon_initial=float(_setting(args, config, "epsilon-initial", 1.0)),
        epsilon_final=float(_setting(args, config, "epsilon-final", 0.01)),
        kernel_peak=float(_setting(args, config, "kernel-peak", 0.7)),
        kernel_width=float(_setting(args, config, "kernel-width", 1.0)),
        exploration_reach=int(_setting(args, config, "exploration-reach", 3)),
        imbalance_threshold=float(
            _setting(args, config, "imbalance-threshold", 2.0)
        ),
        mode=mode,
        seed=int(_setting(args, config, "seed", required=True)),
    ).validate()


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    config = _load_config(args.config)
    hotspots = tuple(
        _parse_hotspot(h) if isinstance(h, str) else Hotspot(**h)
        for h in (args.hotspot or config.get("hotspots", []))
    )
    params = SyntheticCityParams(
        radius=int(_setting(args, config, "radius", required=True)),
        horizon=int(_setting(args, config, "horizon", required=True)),
        base_rate=float(_setting(args, config, "base-rate", 0.1)),
        hotspots=hotspots,
        fare_per_hop=float(_setting(args, config, "fare-per-hop", 2.0)),
        cost_per_hop=float(_setting(args, config, "cost-per-hop", 0.5)),
        slice_minutes=int(_setting(args, config, "slice-min", 5)),
        seed=int(_setting(args, config, "seed", required=True)),
    )
    scenario = generate_synthetic_city(params)
    out = _setting(args, config, "out", required=True)
    scenario.save(out)
    print(f"wrote scenario with m={scenario.grid.m} T={params.horizon} to {out}")
    return EXIT_OK


def cmd_ingest(args) -> int:
    config = _load_config(args.config)
    bbox_text = _setting(args, config, "bbox", required=True)
    try:
        lon_min, lat_min, lon_max, lat_max = (
            float(v) for v in str(bbox_text).split(",")
        )
    except ValueError as exc:
        raise ConfigError("bbox must be lon_min,lat_min,lon_max,lat_max") from exc
    geo = GeoConfig(
        lon_min=lon_min, lat_min=lat_min, lon_max=lon_max, lat_max=lat_max,
        zone_radius_miles=float(
            _setting(args, config, "zone-radius-miles", 1.0)
        ),
        cost_per_mile=float(_setting(args, config, "cost-per-mile", 0.0)),
    )
    grid = HexGrid.hexagon(int(_setting(args, config, "grid-radius", required=True)))
    columns = config.get("columns")
    records = read_trip_csv(_setting(args, config, "csv", required=True), columns)
    slice_minutes = int(_setting(args, config, "slice-min", 5))
    binned = bin_trips(records, grid, slice_minutes, geo)
    matrices = impute_fixed_effects(binned)
    scenario = Scenario(grid, matrices, slice_minutes).validate()
    out = _setting(args, config, "out", required=True)
    scenario.save(out)
    stats = binned.stats
    print(
        f"retained {stats.retained} trips "
        f"(same-zone {stats.dropped_same_zone}, out-of-bounds "
        f"{stats.skipped_out_of_bounds}, bad-time {stats.skipped_bad_time}); "
        f"wrote {out}"
    )
    return EXIT_OK


def cmd_train(args) -> int:
    config = _load_config(args.config)
    scenario = Scenario.load(_setting(args, config, "scenario", required=True))
    cfg = _train_config(args, config)
    n_drivers = int(_setting(args, config, "drivers", required=True))
    result = train(scenario, n_drivers, cfg)
    out = _setting(args, config, "out", required=True)
    save_checkpoint(out, result.tables, cfg, cfg.episodes)
    log_path = _setting(args, config, "log")
    if log_path:
        write_training_log(log_path, result.metrics)
    rebalance_path = _setting(args, config, "export-rebalance")
    if rebalance_path and result.last_rebalance is not None:
        Path(rebalance_path).write_text(json.dumps(result.last_rebalance))
    final = result.metrics[-1]
    print(
        f"trained {cfg.episodes} episodes; final mean earnings "
        f"{final.mean_earnings:.2f}, fulfillment {final.fulfillment_pct:.1f}%; "
        f"checkpoint {out}"
    )
    return EXIT_OK


def cmd_evaluate(args) -> int:
    config = _load_config(args.config)
    scenario = Scenario.load(_setting(args, config, "scenario", required=True))
    tables, _, _ = load_checkpoint(_setting(args, config, "checkpoint", required=True))
    seeds = _parse_seeds(_setting(args, config, "seeds", required=True))
    n_drivers = int(_setting(args, config, "drivers", required=True))
    report = evaluate(
        tables, scenario, n_drivers, seeds,
        warmup_minutes=int(_setting(args, config, "warmup-minutes", 60)),
        workers=int(_setting(args, config, "workers", 1)),
    )
    out = _setting(args, config, "out")
    payload = json.dumps(report.to_dict(), indent=2)
    if out:
        Path(out).write_text(payload)
    print(payload)
    trace_dir = _setting(args, config, "trace-dir")
    if trace_dir:
        trace_dir = Path(trace_dir)
        trace_dir.mkdir(parents=True, exist_ok=True)
        traces = run_policy_episodes(scenario, tables, n_drivers, seeds)
        for seed, trace in zip(seeds, traces):
            export_trace_csv(
                trace,
                trace_dir / f"cells_seed{seed}.csv",
                trace_dir / f"earnings_seed{seed}.csv",
            )
    return EXIT_OK


def cmd_sweep(args) -> int:
    config = _load_config(args.config)
    if not config:
        raise ConfigError("sweep needs --config with the sweep definition")
    scenario = Scenario.load(_setting(args, config, "scenario", required=True))
    train_cfg = _train_config(args, config.get("train", {}))
    suite = SuiteConfig(
        scenario=scenario,
        base_train=train_cfg,
        n_drivers=int(_setting(args, config, "drivers", required=True)),
        eval_seeds=_parse_seeds(config.get("eval_seeds", [train_cfg.seed])),
        supply_values=[int(v) for v in config.get("supply_values", [])],
        overlap_grid=[tuple(p) for p in config.get("overlap_grid", [])],
        compare_objectives=bool(config.get("compare_objectives", False)),
        snapshot_times=[int(t) for t in config.get("snapshot_times", [])],
        workers=int(_setting(args, config, "workers", 1)),
    )
    out = _setting(args, config, "out", required=True)
    summary = experiment_suite(suite, out)
    print(
        f"sweep finished: {len(summary['points'])} points, "
        f"{len(summary['failures'])} failures; artifacts in {out}"
    )
    return EXIT_OK if not summary["failures"] else EXIT_OK


def cmd_generalize(args) -> int:
    config = _load_config(args.config)
    scenario = Scenario.load(_setting(args, config, "scenario", required=True))
    base_tables, _, _ = load_checkpoint(
        _setting(args, config, "base-checkpoint", required=True)
    )
    ref_tables, _, _ = load_checkpoint(
        _setting(args, config, "reference-checkpoint", required=True)
    )
    seeds = _parse_seeds(_setting(args, config, "seeds", required=True))
    n_drivers = int(_setting(args, config, "drivers", required=True))
    error = generalization_error(base_tables, scenario, n_drivers, ref_tables, seeds)
    print(f"generalization error: {error:.3f}%")
    return EXIT_OK


def cmd_export_heatmap(args) -> int:
    config = _load_config(args.config)
    tables, _, _ = load_checkpoint(_setting(args, config, "checkpoint", required=True))
    scenario = Scenario.load(_setting(args, config, "scenario", required=True))
    t = int(_setting(args, config, "time", required=True))
    out = _setting(args, config, "out", required=True)
    export_heatmap_csv(out, tables, scenario.grid, t)
    print(f"wrote heatmap for t={t} to {out}")
    return EXIT_OK


def cmd_serve_env(args) -> int:
    config = _load_config(args.config)
    scenario = Scenario.load(_setting(args, config, "scenario", required=True))
    n_drivers = int(_setting(args, config, "drivers", required=True))
    return serve(scenario, n_drivers)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fleetflow",
        description="Fleet repositioning: simulator, learner, and experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, flags):
        p = sub.add_parser(name)
        p.add_argument("--config", default=None,
                       help="JSON config file; explicit flags override it")
        for flag, kwargs in flags:
            p.add_argument(flag, **kwargs)
        p.set_defaults(fn=fn)
        return p

    add("synth", cmd_synth, [
        ("--seed", dict(type=int)),
        ("--radius", dict(type=int)),
        ("--horizon", dict(type=int)),
        ("--base-rate", dict(type=float)),
        ("--hotspot", dict(action="append", metavar="ZONE:PEAK:AMP[:WIDTH]")),
        ("--fare-per-hop", dict(type=float)),
        ("--cost-per-hop", dict(type=float)),
        ("--slice-min", dict(type=int)),
        ("--out", dict()),
    ])
    add("ingest", cmd_ingest, [
        ("--csv", dict()),
        ("--grid-radius", dict(type=int)),
        ("--slice-min", dict(type=int)),
        ("--bbox", dict(metavar="LONMIN,LATMIN,LONMAX,LATMAX")),
        ("--zone-radius-miles", dict(type=float)),
        ("--cost-per-mile", dict(type=float)),
        ("--out", dict()),
    ])
    add("train", cmd_train, [
        ("--scenario", dict()),
        ("--drivers", dict(type=int)),
        ("--episodes", dict(type=int)),
        ("--independent-episodes", dict(type=int)),
        ("--coordinated-episodes", dict(type=int)),
        ("--learning-rate", dict(type=float)),
        ("--discount", dict(type=float)),
        ("--epsilon-initial", dict(type=float)),
        ("--epsilon-final", dict(type=float)),
        ("--kernel-peak", dict(type=float)),
        ("--kernel-width", dict(type=float)),
        ("--exploration-reach", dict(type=int)),
        ("--imbalance-threshold", dict(type=float)),
        ("--mode", dict(choices=[m.value for m in ObjectiveMode])),
        ("--seed", dict(type=int)),
        ("--out", dict()),
        ("--log", dict()),
        ("--export-rebalance", dict()),
    ])
    add("evaluate", cmd_evaluate, [
        ("--scenario", dict()),
        ("--checkpoint", dict()),
        ("--drivers", dict(type=int)),
        ("--seeds", dict(metavar="S1,S2,...")),
        ("--warmup-minutes", dict(type=int)),
        ("--workers", dict(type=int)),
        ("--out", dict()),
        ("--trace-dir", dict()),
    ])
    add("sweep", cmd_sweep, [
        ("--drivers", dict(type=int)),
        ("--workers", dict(type=int)),
        ("--out", dict()),
    ])
    add("generalize", cmd_generalize, [
        ("--scenario", dict()),
        ("--base-checkpoint", dict()),
        ("--reference-checkpoint", dict()),
        ("--drivers", dict(type=int)),
        ("--seeds", dict(metavar="S1,S2,...")),
    ])
    add("export-heatmap", cmd_export_heatmap, [
        ("--checkpoint", dict()),
        ("--scenario", dict()),
        ("--time", dict(type=int)),
        ("--out", dict()),
    ])
    add("serve-env", cmd_serve_env, [
        ("--scenario", dict()),
        ("--drivers", dict(type=int)),
    ])
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ContractViolation as exc:
        print(f"internal contract violation: {exc}", file=sys.stderr)
        return EXIT_CONTRACT


def entrypoint() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    entrypoint()

"""Explainable fleet repositioning: hex-city simulator, tabular Q-learning,
and min-cost-flow coordination."""

from .city import Action, CityMatrices, HexGrid, Scenario
from .ingest import (
    GeoConfig,
    Hotspot,
    SyntheticCityParams,
    bin_trips,
    generate_synthetic_city,
    impute_fixed_effects,
    read_trip_csv,
)
from .learn import PolicyTables, TrainConfig, TrainResult, train
from .simulate import EpisodeTrace, ObjectiveMode, Simulation, run_episode
from .evaluate import (
    EvalReport,
    GreedyPolicy,
    NaivePolicy,
    NaivePolicyParams,
    evaluate,
    generalization_error,
    mixed_population_eval,
)

__all__ = [
    "Action", "CityMatrices", "HexGrid", "Scenario",
    "GeoConfig", "Hotspot", "SyntheticCityParams", "bin_trips",
    "generate_synthetic_city", "impute_fixed_effects", "read_trip_csv",
    "PolicyTables", "TrainConfig", "TrainResult", "train",
    "EpisodeTrace", "ObjectiveMode", "Simulation", "run_episode",
    "EvalReport", "GreedyPolicy", "NaivePolicy", "NaivePolicyParams",
    "evaluate", "generalization_error", "mixed_population_eval",
]

__version__ = "0.1.0"

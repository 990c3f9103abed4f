"""Multi-station, multi-pollutant air quality forecasting with meteorology-aware causal attention."""

__version__ = "0.1.0"

from .geo import Station, StationGraph, build_station_graph, haversine_km  # noqa: E402
from .data import (ObservationTable, SyntheticSpec, WindowSample, chronological_split,  # noqa: E402
                   generate_synthetic, load_observations, make_windows)
from .model import AirPCM, AirPCMConfig, CausalAttentionMap, forward  # noqa: E402
from .metrics import detect_sudden_changes, evaluate_metrics  # noqa: E402
from .train import TrainConfig, train  # noqa: E402
from .checkpoint import load_checkpoint, save_checkpoint  # noqa: E402
from .aqi import compute_aqi_mep2012, iaqi  # noqa: E402

__all__ = [
    "Station", "StationGraph", "build_station_graph", "haversine_km",
    "ObservationTable", "SyntheticSpec", "WindowSample", "chronological_split", "generate_synthetic",
    "load_observations", "make_windows",
    "AirPCM", "AirPCMConfig", "CausalAttentionMap", "forward",
    "detect_sudden_changes", "evaluate_metrics", "TrainConfig", "train",
    "load_checkpoint", "save_checkpoint", "compute_aqi_mep2012", "iaqi",
]

"""Cooperative federated contrastive learning simulator."""
from .config import PRESETS, SimConfig, build_config, parse_config
from .federation import RunResult, Simulation, build_rgg, run

__all__ = ["PRESETS", "SimConfig", "build_config", "parse_config", "RunResult", "Simulation",
           "build_rgg", "run"]
__version__ = "0.1.0"

"""Deterministic simulator of hybrid centralized/distributed control for
software-defined multi-hop wireless networks."""
from .config import ConfigError, Knobs, ScenarioConfig, config_from_dict, parse_config
from .kernel import MS, S, LatencyDist, Simulator
from .network import DelaySample, Network, RunReport
from .scenario import builtin, compare, detect_loops, run_trials

__all__ = [
    "ConfigError", "DelaySample", "Knobs", "LatencyDist", "MS", "Network", "RunReport", "S",
    "ScenarioConfig", "Simulator", "builtin", "compare", "config_from_dict", "detect_loops",
    "parse_config", "run_trials",
]
__version__ = "0.1.0"

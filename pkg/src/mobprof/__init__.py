"""Mobility profiling by imitation: a spatial knowledge graph, traffic-aware
state updates and a DQN/DDQN agent that learns to predict the next visit."""

from importlib import resources

from .errors import ConfigError, DataError, LookupFailure, MobprofError, NumericalError

__version__ = "0.1.0"


def smoke_config_path():
    """Path of the bundled smoke-run config (its data files sit next to it)."""
    return resources.files(__name__) / "data" / "smoke" / "config.yaml"


__all__ = [
    "ConfigError",
    "DataError",
    "LookupFailure",
    "MobprofError",
    "NumericalError",
    "smoke_config_path",
]

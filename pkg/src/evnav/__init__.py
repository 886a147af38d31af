"""Multi-agent EV charging navigation with a generative recommendation platform."""

from .config import EnvConfig, HyperParams, Method, RunConfig, load_config
from .graph import TrafficGraph, build_graph, load_graph, sample_velocities, shortest_path

__version__ = "0.1.0"

__all__ = [
    "EnvConfig", "HyperParams", "Method", "RunConfig", "load_config",
    "TrafficGraph", "build_graph", "load_graph", "sample_velocities", "shortest_path",
]

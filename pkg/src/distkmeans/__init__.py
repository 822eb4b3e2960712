"""Distributed k-means over a synchronous agent network, with a centralized reference."""

__version__ = "0.1.0"

from .dkmeans import AgentState, ClusteringResult, RunConfig, SubclusterInfo, run
from .errors import InputError, ProtocolError
from .graph import ClusterGraph, Graph, connected_components, induce_cluster_graph, is_connected, unit_disk

__all__ = [
    "AgentState", "ClusteringResult", "ClusterGraph", "Graph", "InputError", "ProtocolError",
    "RunConfig", "SubclusterInfo", "connected_components", "induce_cluster_graph",
    "is_connected", "run", "unit_disk",
]

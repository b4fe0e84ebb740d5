"""Self-organizing nest migration of ant colonies on segmented pathway graphs."""

from nestmigration.graph import (
    SegmentedGraph,
    SegmentRef,
    generate_graph,
    reachable_segments,
    segment_edges,
)
from nestmigration.pheromone import PheromoneParams, SpikeTrain

__all__ = [
    "PheromoneParams",
    "SegmentRef",
    "SegmentedGraph",
    "SpikeTrain",
    "generate_graph",
    "reachable_segments",
    "segment_edges",
]

__version__ = "0.1.0"

"""Planar pathway graphs whose edges are tiled by ordered segments.

Segment ordinals are always counted in the canonical ``u -> v`` direction of
an edge; a :class:`SegmentRef` carries a ``reverse`` flag that says whether an
ant on it travels ``v -> u``. Occupancy is tracked per physical segment, so
both orientations of ``(edge, j)`` share one slot.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components, dijkstra, minimum_spanning_tree

from nestmigration import rng as _rng


class ConfigurationError(ValueError):
    """A requested configuration cannot be realized."""


class SegmentRef(NamedTuple):
    edge: int
    j: int
    reverse: bool = False


@dataclass(frozen=True)
class PlanarNode:
    id: int
    x: float
    y: float

    @property
    def position(self) -> tuple[float, float]:
        return (self.x, self.y)

    def distance(self, other: PlanarNode) -> float:
        return math.hypot(other.x - self.x, other.y - self.y)


@dataclass(frozen=True)
class Edge:
    id: int
    u: int
    v: int
    length: float

    def other(self, node: int) -> int:
        if node == self.u:
            return self.v
        if node == self.v:
            return self.u
        raise ValueError(f"node {node} is not an endpoint of edge {self.id}")


@dataclass(frozen=True)
class Segment:
    ref: SegmentRef
    start: float
    end: float
    occupant: int | None

    @property
    def length(self) -> float:
        return self.end - self.start


class SegmentedGraph:
    """Nodes, edges and per-edge segment boundaries plus segment occupancy.

    Everything except ``occupant`` is fixed after construction.
    """

    def __init__(self, nodes: list[PlanarNode], edges: list[Edge], resolution: int = 1):
        self.nodes = list(nodes)
        self.edges = list(edges)
        self.resolution = max(int(resolution), 1)
        self.incident: list[list[int]] = [[] for _ in self.nodes]
        for e in self.edges:
            self.incident[e.u].append(e.id)
            self.incident[e.v].append(e.id)
        n = self.resolution
        self.boundaries: list[tuple[float, ...]] = []
        for e in self.edges:
            cuts = [e.length * j / n for j in range(n)]
            cuts.append(e.length)
            self.boundaries.append(tuple(cuts))
        self.occupant: list[list[int | None]] = [[None] * n for _ in self.edges]
        self._reach_cache: dict[tuple[int, float], list[SegmentRef]] = {}

    # -- basic queries -------------------------------------------------
    @property
    def node_count(self) -> int:
        return len(self.nodes)

    @property
    def edge_count(self) -> int:
        return len(self.edges)

    def positions(self) -> np.ndarray:
        return np.array([[p.x, p.y] for p in self.nodes], dtype=float)

    def segments(self, edge: int) -> list[Segment]:
        b = self.boundaries[edge]
        occ = self.occupant[edge]
        return [Segment(SegmentRef(edge, j), b[j], b[j + 1], occ[j]) for j in range(len(occ))]

    def segment_length(self, ref: SegmentRef) -> float:
        b = self.boundaries[ref.edge]
        return b[ref.j + 1] - b[ref.j]

    def entry_coord(self, ref: SegmentRef) -> float:
        """Canonical edge coordinate at which an ant enters ``ref``."""
        b = self.boundaries[ref.edge]
        return b[ref.j + 1] if ref.reverse else b[ref.j]

    def start_node(self, ref: SegmentRef) -> int:
        e = self.edges[ref.edge]
        return e.v if ref.reverse else e.u

    def end_node(self, ref: SegmentRef) -> int:
        e = self.edges[ref.edge]
        return e.u if ref.reverse else e.v

    def successor(self, ref: SegmentRef) -> SegmentRef | None:
        """Next segment in the direction of travel, or None at the edge end."""
        j = ref.j - 1 if ref.reverse else ref.j + 1
        if 0 <= j < self.resolution:
            return SegmentRef(ref.edge, j, ref.reverse)
        return None

    def coord_to_xy(self, edge: int, coord: float) -> tuple[float, float]:
        e = self.edges[edge]
        a, b = self.nodes[e.u], self.nodes[e.v]
        f = coord / e.length
        return (a.x + (b.x - a.x) * f, a.y + (b.y - a.y) * f)

    def node_distance(self, a: int, b: int) -> float:
        p, q = self.nodes[a], self.nodes[b]
        return math.hypot(p.x - q.x, p.y - q.y)

    def mean_edge_length(self) -> float:
        return float(np.mean([e.length for e in self.edges])) if self.edges else 0.0

    def clear_occupancy(self) -> None:
        for occ in self.occupant:
            for j in range(len(occ)):
                occ[j] = None

    def farthest_pair(self) -> tuple[int, int]:
        """The two nodes at maximum Euclidean distance, lower id first."""
        pos = self.positions()
        d = np.linalg.norm(pos[:, None, :] - pos[None, :, :], axis=-1)
        i, j = np.unravel_index(int(np.argmax(d)), d.shape)
        return (int(min(i, j)), int(max(i, j)))

    def path_distances(self, source: int) -> np.ndarray:
        """Shortest path length along edges from ``source`` to every node."""
        n = self.node_count
        if not self.edges:
            out = np.full(n, np.inf)
            out[source] = 0.0
            return out
        u = [e.u for e in self.edges]
        v = [e.v for e in self.edges]
        w = [e.length for e in self.edges]
        m = csr_matrix((w, (u, v)), shape=(n, n))
        return dijkstra(m, directed=False, indices=source)

    def is_connected(self) -> bool:
        n = self.node_count
        if n == 0:
            return True
        m = csr_matrix(
            ([1.0] * len(self.edges), ([e.u for e in self.edges], [e.v for e in self.edges])),
            shape=(n, n),
        )
        count, _ = connected_components(m, directed=False)
        return count == 1

    # -- serialization -------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "nodes": [{"id": p.id, "x": p.x, "y": p.y} for p in self.nodes],
            "edges": [{"id": e.id, "u": e.u, "v": e.v} for e in self.edges],
            "resolution": self.resolution,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> SegmentedGraph:
        nodes = [PlanarNode(int(n["id"]), float(n["x"]), float(n["y"])) for n in doc["nodes"]]
        for i, p in enumerate(nodes):
            if p.id != i:
                raise ValueError(f"node ids must be dense and ordered (got {p.id} at {i})")
        edges = []
        for i, e in enumerate(doc["edges"]):
            if int(e["id"]) != i:
                raise ValueError(f"edge ids must be dense and ordered (got {e['id']} at {i})")
            u, v = int(e["u"]), int(e["v"])
            a, b = nodes[u], nodes[v]
            edges.append(Edge(i, u, v, a.distance(b)))
        return cls(nodes, edges, int(doc.get("resolution", 1)))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> SegmentedGraph:
        return cls.from_dict(json.loads(text))


def generate_graph(
    node_count: int,
    edge_count: int,
    plane_bounds: tuple[float, float] = (1000.0, 1000.0),
    seed: int = 0,
) -> SegmentedGraph:
    """Random planar-embedded connected graph with exactly ``edge_count`` edges.

    Nodes are placed uniformly in ``[0, w] x [0, h]``. The Euclidean minimum
    spanning tree is laid down first; the remaining edges are the shortest
    node pairs not yet joined.
    """
    if node_count < 2:
        raise ConfigurationError(f"node_count must be >= 2, got {node_count}")
    max_edges = node_count * (node_count - 1) // 2
    if not node_count - 1 <= edge_count <= max_edges:
        raise ConfigurationError(
            f"edge_count must lie in [{node_count - 1}, {max_edges}] for {node_count} nodes, got {edge_count}"
        )
    w, h = plane_bounds
    if w <= 0 or h <= 0:
        raise ConfigurationError(f"plane bounds must be positive, got {plane_bounds}")

    gen = _rng.numpy_stream(seed, "graph")
    pos = gen.random((node_count, 2)) * np.array([w, h])
    while len({(float(x), float(y)) for x, y in pos}) < node_count:
        pos = gen.random((node_count, 2)) * np.array([w, h])

    d = np.linalg.norm(pos[:, None, :] - pos[None, :, :], axis=-1)
    mst = minimum_spanning_tree(csr_matrix(np.triu(d))).tocoo()
    tree = sorted((min(a, b), max(a, b)) for a, b in zip(mst.row.tolist(), mst.col.tolist()))
    if len(tree) != node_count - 1:
        raise RuntimeError("spanning tree construction failed to connect the graph")

    chosen = set(tree)
    pairs = list(tree)
    iu, ju = np.triu_indices(node_count, k=1)
    order = np.lexsort((ju, iu, d[iu, ju]))
    for k in order:
        if len(pairs) >= edge_count:
            break
        pair = (int(iu[k]), int(ju[k]))
        if pair not in chosen:
            chosen.add(pair)
            pairs.append(pair)

    nodes = [PlanarNode(i, float(pos[i, 0]), float(pos[i, 1])) for i in range(node_count)]
    # lengths via hypot so a JSON round trip reproduces them bit for bit
    edges = [Edge(i, u, v, nodes[u].distance(nodes[v])) for i, (u, v) in enumerate(pairs)]
    graph = SegmentedGraph(nodes, edges, 1)
    if not graph.is_connected():
        raise RuntimeError("generated graph is not connected")
    return graph


def segment_edges(graph: SegmentedGraph, resolution: int) -> SegmentedGraph:
    """Re-tile every edge into ``max(resolution, 1)`` equal segments.

    Resolution 0 is the classical monolithic edge. Occupancy starts empty.
    """
    if resolution < 0:
        raise ConfigurationError(f"resolution must be >= 0, got {resolution}")
    return SegmentedGraph(graph.nodes, graph.edges, max(resolution, 1))


def reachable_segments(graph: SegmentedGraph, node: int, reach_radius: float) -> list[SegmentRef]:
    """Unoccupied segments on edges incident to ``node`` within ``reach_radius``.

    Refs are oriented to lead away from ``node``; distance is measured along
    the edge to the segment's entry point. The first segment of each incident
    edge always qualifies (if free).
    """
    if not 0 <= node < graph.node_count:
        raise ValueError(f"unknown node id {node}")
    if reach_radius < 0:
        raise ValueError(f"reach_radius must be >= 0, got {reach_radius}")
    key = (node, reach_radius)
    refs = graph._reach_cache.get(key)
    if refs is None:
        refs = graph._reach_cache[key] = _segments_in_reach(graph, node, reach_radius)
    occ = graph.occupant
    return [r for r in refs if occ[r.edge][r.j] is None]


def _segments_in_reach(graph: SegmentedGraph, node: int, reach_radius: float) -> list[SegmentRef]:
    out: list[SegmentRef] = []
    for eid in graph.incident[node]:
        e = graph.edges[eid]
        b = graph.boundaries[eid]
        n = graph.resolution
        slack = 1e-12 * e.length
        if e.u == node:
            for j in range(n):
                if j > 0 and b[j] > reach_radius + slack:
                    break
                out.append(SegmentRef(eid, j, False))
        else:
            for j in range(n - 1, -1, -1):
                if j < n - 1 and e.length - b[j + 1] > reach_radius + slack:
                    break
                out.append(SegmentRef(eid, j, True))
    return out

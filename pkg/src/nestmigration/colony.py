"""Ants, spawning around the initial nest, and the per-ant motion rules."""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

from nestmigration import rng as _rng
from nestmigration.graph import SegmentedGraph, SegmentRef


@dataclass
class ColonyConfig:
    ant_count: int = 500
    initial_nest: int = 0
    r_I: float = 50.0
    eta: float = 0.1
    v0: float = 1.0
    top_k: int = 3
    # None means 10% of the mean edge length
    reach_radius: float | None = None

    def __post_init__(self):
        if self.ant_count < 1:
            raise ValueError(f"ant_count must be >= 1, got {self.ant_count}")
        if not 0 <= self.eta < 1:
            raise ValueError(f"eta must lie in [0, 1), got {self.eta}")
        if self.top_k < 1:
            raise ValueError(f"top_k must be >= 1, got {self.top_k}")
        if not self.v0 > 0:
            raise ValueError(f"v0 must be > 0, got {self.v0}")
        if self.r_I < 0:
            raise ValueError(f"r_I must be >= 0, got {self.r_I}")
        if self.reach_radius is not None and self.reach_radius < 0:
            raise ValueError(f"reach_radius must be >= 0, got {self.reach_radius}")

    def resolved_reach(self, graph: SegmentedGraph) -> float:
        if self.reach_radius is not None:
            return self.reach_radius
        return 0.1 * graph.mean_edge_length()


@dataclass
class Ant:
    """An ant is either at a node (``seg is None``) or on a segment.

    ``offset`` is the distance travelled from the segment's entry point;
    ``came_from`` is the edge an ant at a node arrived by.
    """

    id: int
    v0: float
    velocity: float
    node: int | None = None
    seg: SegmentRef | None = None
    offset: float = 0.0
    came_from: int | None = None
    rng: random.Random = field(default_factory=random.Random, repr=False, compare=False)

    @property
    def at_node(self) -> bool:
        return self.seg is None

    def state(self) -> dict:
        version, internal, gauss = self.rng.getstate()
        return {
            "id": self.id,
            "v0": self.v0,
            "velocity": self.velocity,
            "node": self.node,
            "seg": None if self.seg is None else [self.seg.edge, self.seg.j, int(self.seg.reverse)],
            "offset": self.offset,
            "came_from": self.came_from,
            "rng": [version, list(internal), gauss],
        }

    @classmethod
    def from_state(cls, doc: dict) -> Ant:
        seg = doc["seg"]
        r = random.Random()
        version, internal, gauss = doc["rng"]
        r.setstate((version, tuple(internal), gauss))
        return cls(
            id=int(doc["id"]),
            v0=float(doc["v0"]),
            velocity=float(doc["velocity"]),
            node=None if doc["node"] is None else int(doc["node"]),
            seg=None if seg is None else SegmentRef(int(seg[0]), int(seg[1]), bool(seg[2])),
            offset=float(doc["offset"]),
            came_from=None if doc["came_from"] is None else int(doc["came_from"]),
            rng=r,
        )


class Event(NamedTuple):
    kind: str  # "deposit" or "arrive"
    ant: int
    time: float
    edge: int | None = None
    j: int | None = None
    node: int | None = None


def ant_coord(ant: Ant, graph: SegmentedGraph) -> float:
    """Canonical coordinate of an on-segment ant along its edge."""
    seg = ant.seg
    b = graph.boundaries[seg.edge]
    return b[seg.j + 1] - ant.offset if seg.reverse else b[seg.j] + ant.offset


def ant_position(ant: Ant, graph: SegmentedGraph) -> tuple[float, float]:
    if ant.seg is None:
        p = graph.nodes[ant.node]
        return (p.x, p.y)
    return graph.coord_to_xy(ant.seg.edge, ant_coord(ant, graph))


def spawn_slots(graph: SegmentedGraph, nest: int, radius: float) -> list[SegmentRef]:
    """Segments whose entry point lies within path distance ``radius`` of ``nest``.

    Each physical segment appears once. All segments of an edge share one
    heading, away from the endpoint nearer the nest, so no edge starts with
    ants facing each other.
    """
    dist = graph.path_distances(nest)
    slots = []
    for e in graph.edges:
        b = graph.boundaries[e.id]
        du, dv = float(dist[e.u]), float(dist[e.v])
        reverse = dv < du
        for j in range(graph.resolution):
            x = b[j + 1] if reverse else b[j]
            if min(du + x, dv + e.length - x) <= radius * (1 + 1e-12):
                slots.append(SegmentRef(e.id, j, reverse))
    return slots


def spawn_colony(cfg: ColonyConfig, graph: SegmentedGraph, seed: int) -> list[Ant]:
    """Place ants uniformly on free segments near the initial nest.

    Ants that find no free slot wait at the nest node. Occupancy on ``graph``
    is updated in place.
    """
    if not 0 <= cfg.initial_nest < graph.node_count:
        raise ValueError(f"initial nest {cfg.initial_nest} not in graph")
    slots = [s for s in spawn_slots(graph, cfg.initial_nest, cfg.r_I) if graph.occupant[s.edge][s.j] is None]
    placer = _rng.python_stream(seed, "spawn")
    chosen = placer.sample(slots, min(cfg.ant_count, len(slots)))
    ants = []
    for i in range(cfg.ant_count):
        ant = Ant(i, cfg.v0, cfg.v0, rng=_rng.python_stream(seed, "ant", i))
        if i < len(chosen):
            ant.seg = chosen[i]
            graph.occupant[ant.seg.edge][ant.seg.j] = i
        else:
            ant.node = cfg.initial_nest
        ants.append(ant)
    return ants


def perturb_velocity(ant: Ant, eta: float, rng: random.Random | None = None) -> Ant:
    """Redraw ``velocity = v0 * (1 + u)``, ``u ~ U[-eta, eta]``."""
    if not 0 <= eta < 1:
        raise ValueError(f"eta must lie in [0, 1), got {eta}")
    r = ant.rng if rng is None else rng
    ant.velocity = ant.v0 * (1.0 + r.uniform(-eta, eta)) if eta else ant.v0
    return ant


def select_next_segment(
    ant: Ant,
    candidates: Sequence[SegmentRef],
    evaluate: Callable[[SegmentRef, float], float],
    t: float,
    top_k: int,
    rng: random.Random | None = None,
    values: Sequence[float] | None = None,
) -> SegmentRef | None:
    """Uniform pick among the ``top_k`` candidates by entry-point pheromone.

    Candidates are ranked by value, then by position in ``candidates``. When
    a run of equal values straddles the pool cutoff, the remaining pool slots
    go to a uniform sample of that run. With no pheromone anywhere the pick is
    uniform over all candidates. Precomputed ``values`` skip ``evaluate``.
    """
    if not candidates:
        return None
    r = ant.rng if rng is None else rng
    if len(candidates) == 1:
        return candidates[0]
    if values is None:
        values = [evaluate(c, t) for c in candidates]
    if not any(v > 0 for v in values):
        return candidates[r.randrange(len(candidates))]
    order = sorted(range(len(candidates)), key=values.__getitem__, reverse=True)
    k = min(top_k, len(order))
    cutoff = values[order[k - 1]]
    pool = [i for i in order if values[i] > cutoff]
    tied = [i for i in order if values[i] == cutoff]
    if len(pool) + len(tied) > k:
        tied = r.sample(tied, k - len(pool))
    pool += tied
    return candidates[pool[r.randrange(len(pool))]]


def oncoming(graph: SegmentedGraph, ants: Sequence[Ant], ref: SegmentRef) -> bool:
    """True if any ant on ``ref``'s edge travels against ``ref``'s direction."""
    for occupant in graph.occupant[ref.edge]:
        if occupant is not None and ants[occupant].seg.reverse != ref.reverse:
            return True
    return False


def enter_segment(ant: Ant, ref: SegmentRef, graph: SegmentedGraph, t: float) -> Event:
    graph.occupant[ref.edge][ref.j] = ant.id
    ant.seg = ref
    ant.node = None
    ant.offset = 0.0
    ant.came_from = None
    return Event("deposit", ant.id, t, ref.edge, ref.j)


def advance_ant(
    ant: Ant,
    dt: float,
    graph: SegmentedGraph,
    t: float = 0.0,
    vacated: dict | None = None,
) -> list[Event]:
    """Move an on-segment ant forward by ``velocity * dt`` starting at time ``t``.

    Crossing into a free successor emits a deposit at the crossing instant and
    carries the residual distance. An occupied successor holds the ant at the
    boundary. Leaving the last segment puts the ant on the far node.
    ``vacated`` maps ``(edge, j)`` to the time a segment was freed earlier in
    the same tick; an ant cannot enter before that time.
    """
    if ant.seg is None:
        raise ValueError(f"ant {ant.id} is at a node")
    events: list[Event] = []
    v = ant.velocity
    now = t
    end = t + dt
    occupant = graph.occupant
    resolution = graph.resolution
    while True:
        seg = ant.seg
        b = graph.boundaries[seg.edge]
        length = b[seg.j + 1] - b[seg.j]
        cross = now + (length - ant.offset) / v
        if cross > end:
            ant.offset += (end - now) * v
            break
        j = seg.j - 1 if seg.reverse else seg.j + 1
        if not 0 <= j < resolution:
            occupant[seg.edge][seg.j] = None
            if vacated is not None:
                vacated[(seg.edge, seg.j)] = cross
            ant.seg = None
            ant.offset = 0.0
            ant.node = graph.end_node(seg)
            ant.came_from = seg.edge
            events.append(Event("arrive", ant.id, cross, node=ant.node))
            break
        if occupant[seg.edge][j] is not None:
            ant.offset = length
            break
        if vacated is not None:
            freed = vacated.get((seg.edge, j))
            if freed is not None and freed > cross:
                cross = freed
            vacated[(seg.edge, seg.j)] = cross
        occupant[seg.edge][seg.j] = None
        events.append(enter_segment(ant, SegmentRef(seg.edge, j, seg.reverse), graph, cross))
        now = cross
        if now >= end:
            break
    return events


def in_bounds(ant: Ant, eta: float) -> bool:
    lo, hi = ant.v0 * (1 - eta), ant.v0 * (1 + eta)
    tol = 1e-12 * ant.v0
    return lo - tol <= ant.velocity <= hi + tol and ant.velocity > 0 and not math.isnan(ant.velocity)

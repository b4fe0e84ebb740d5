"""Tick-by-tick migration loop, target-site source, and field diagnostics."""

from __future__ import annotations

import bisect
import math
from dataclasses import asdict, dataclass, field
from functools import partial
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from nestmigration.colony import (
    Ant,
    ColonyConfig,
    Event,
    advance_ant,
    ant_position,
    enter_segment,
    select_next_segment,
    spawn_colony,
)
from nestmigration.graph import SegmentedGraph, SegmentRef, reachable_segments
from nestmigration.pheromone import (
    PheromoneParams,
    SpikeTrain,
    edge_profile_smooth,
    empty_trains,
)


@dataclass(frozen=True)
class ConvergenceTarget:
    target_node: int
    lam: float = 0.1

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError(f"lambda must be > 0, got {self.lam}")

    def sigma(self, rho_star: float) -> float:
        # offset fixed by the boundary value at the target (distance 0)
        return -math.log(rho_star)


@dataclass(frozen=True)
class EngineSettings:
    """Per-run knobs owned by the engine rather than by a sub-model."""

    r_n: float = 40.0
    threshold: float = 0.9
    max_ticks: int = 200_000
    source: bool = True
    # None means the colony's r_I
    source_radius: float | None = None
    # ants that reach the target node stay there
    settle: bool = True
    dt: float = 1.0

    def __post_init__(self):
        if not 0 < self.threshold <= 1:
            raise ValueError(f"threshold must lie in (0, 1], got {self.threshold}")
        if not self.r_n > 0:
            raise ValueError(f"r_n must be > 0, got {self.r_n}")
        if self.max_ticks < 0:
            raise ValueError(f"max_ticks must be >= 0, got {self.max_ticks}")


@dataclass
class EquilibriumReport:
    temporal_residual: float
    spatial_residual: float
    t: float


def radial_target(d, target: ConvergenceTarget, rho_star: float):
    """Desired profile ``rho_star * exp(-lambda * d)`` at distance ``d`` from the target."""
    d = np.asarray(d, dtype=float)
    if np.any(d < 0):
        raise ValueError("distance must be >= 0")
    out = rho_star * np.exp(-target.lam * d)
    return float(out) if out.ndim == 0 else out


@dataclass
class SimState:
    graph: SegmentedGraph
    trains: list[list[SpikeTrain]]
    ants: list[Ant]
    params: PheromoneParams
    target: ConvergenceTarget
    colony: ColonyConfig
    settings: EngineSettings
    clock: int = 0
    reach: float = 0.0
    source_segments: list[tuple[int, int, float]] = field(default_factory=list)
    deposit_log: list[tuple[int, int, int, float]] | None = None
    # per-ref (train, bracket) pairs and memoized values used by entry_value
    _entry_terms: dict = field(default_factory=dict, repr=False, compare=False)
    _entry_memo: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def target_node(self) -> int:
        return self.target.target_node

    # -- construction --------------------------------------------------
    @classmethod
    def create(
        cls,
        graph: SegmentedGraph,
        params: PheromoneParams,
        colony: ColonyConfig,
        target: ConvergenceTarget,
        settings: EngineSettings,
        seed: int,
        log_deposits: bool = False,
    ) -> SimState:
        graph.clear_occupancy()
        ants = spawn_colony(colony, graph, seed)
        state = cls(
            graph=graph,
            trains=empty_trains(graph),
            ants=ants,
            params=params,
            target=target,
            colony=colony,
            settings=settings,
            reach=colony.resolved_reach(graph),
            deposit_log=[] if log_deposits else None,
        )
        state.source_segments = source_segments(state)
        return state

    # -- snapshot ------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "clock": self.clock,
            "graph": self.graph.to_dict(),
            "params": self.params.to_dict(),
            "colony": asdict(self.colony),
            "target": {"target_node": self.target.target_node, "lambda": self.target.lam},
            "settings": asdict(self.settings),
            "reach": self.reach,
            "trains": [[tr.state() for tr in per_edge] for per_edge in self.trains],
            "ants": [a.state() for a in self.ants],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> SimState:
        graph = SegmentedGraph.from_dict(doc["graph"])
        trains = [[SpikeTrain.from_state(s) for s in per_edge] for per_edge in doc["trains"]]
        if len(trains) != graph.edge_count or any(len(t) != graph.resolution for t in trains):
            raise ValueError("spike trains do not match the graph's segmentation")
        ants = [Ant.from_state(a) for a in doc["ants"]]
        for a in ants:
            if a.seg is not None:
                if graph.occupant[a.seg.edge][a.seg.j] is not None:
                    raise ValueError(f"segment {a.seg} occupied twice in snapshot")
                graph.occupant[a.seg.edge][a.seg.j] = a.id
        state = cls(
            graph=graph,
            trains=trains,
            ants=ants,
            params=PheromoneParams(**doc["params"]),
            target=ConvergenceTarget(int(doc["target"]["target_node"]), float(doc["target"]["lambda"])),
            colony=ColonyConfig(**doc["colony"]),
            settings=EngineSettings(**doc["settings"]),
            clock=int(doc["clock"]),
            reach=float(doc["reach"]),
        )
        state.source_segments = source_segments(state)
        return state


def source_segments(state: SimState) -> list[tuple[int, int, float]]:
    """``(edge, j, log_target)`` for segments renewed by the target-site source.

    A segment qualifies when its boundary nearest the target lies within the
    source radius; the desired level is the radial target at that distance.
    """
    s = state.settings
    if not s.source:
        return []
    radius = state.colony.r_I if s.source_radius is None else s.source_radius
    g = state.graph
    tgt = g.nodes[state.target_node]
    log_rho = math.log(state.params.rho_star)
    out = []
    for e in g.edges:
        for j in range(g.resolution):
            d = min(
                math.hypot(x - tgt.x, y - tgt.y)
                for x, y in (g.coord_to_xy(e.id, g.boundaries[e.id][j]), g.coord_to_xy(e.id, g.boundaries[e.id][j + 1]))
            )
            if d <= radius:
                out.append((e.id, j, log_rho - state.target.lam * d))
    return out


def entry_value(state: SimState, ref: SegmentRef, t: float) -> float:
    """Smooth edge profile at ``ref``'s entry point, envelope-reduced.

    Only segments within 40/k_x of the point contribute above round-off, so
    the sum is restricted to them.
    """
    terms = state._entry_terms.get(ref)
    if terms is None:
        terms = state._entry_terms[ref] = _entry_terms(state, ref)
    p = state.params
    total = 0.0
    if p.per_spike_decay:
        for train, bracket in terms:
            if train.times:
                total += train.smooth_value(t, p, reduced=True) * bracket
        return max(total, 0.0)
    # literal form, reduced: once the newest spike is past the logistic window
    # (where the logistic rounds to exactly 1) the value is rho * live count.
    # That value holds until the next deposit on a term or the next prune.
    clock = 0
    for train, _ in terms:
        clock += train._count
    memo = state._entry_memo.get(ref)
    if memo is not None and memo[1] == clock and t >= memo[2] and t - memo[3] <= p.prune_age:
        return memo[0]
    age = p.prune_age
    k_t = p.k_t
    rho = p.rho_star
    steady = True
    oldest = math.inf
    for train, bracket in terms:
        times = train.times
        n = len(times)
        if not n:
            continue
        start = train._start
        if start < n and t - times[start] > age:
            train._refresh(t, p)
            start = train._start
            n = len(times)
        if start == n:
            continue
        if times[start] < oldest:
            oldest = times[start]
        if k_t * (t - times[-1]) >= 40.0:
            total += rho * float(n - start) * bracket
        else:
            steady = False
            total += train.smooth_value(t, p, reduced=True) * bracket
    value = total if total > 0.0 else 0.0
    if steady:
        state._entry_memo[ref] = (value, clock, t, oldest, terms)
    return value


def entry_values(state: SimState, refs: Sequence[SegmentRef], t: float) -> list[float]:
    """:func:`entry_value` for every ref in ``refs``, serving memo hits inline."""
    p = state.params
    if p.per_spike_decay:
        return [entry_value(state, ref, t) for ref in refs]
    memo_get = state._entry_memo.get
    age = p.prune_age
    out = []
    for ref in refs:
        memo = memo_get(ref)
        if memo is not None:
            clock = 0
            for train, _ in memo[4]:
                clock += train._count
            if memo[1] == clock and t >= memo[2] and t - memo[3] <= age:
                out.append(memo[0])
                continue
        out.append(entry_value(state, ref, t))
    return out


def _entry_terms(state: SimState, ref: SegmentRef) -> tuple[tuple[SpikeTrain, float], ...]:
    """Spike train and spatial bracket of every segment near ``ref``'s entry point."""
    g = state.graph
    k_x = state.params.k_x
    b = g.boundaries[ref.edge]
    x = g.entry_coord(ref)
    reach = 40.0 / k_x
    lo = max(bisect.bisect_left(b, x - reach) - 1, 0)
    hi = min(bisect.bisect_right(b, x + reach), g.resolution)
    per_edge = state.trains[ref.edge]
    return tuple((per_edge[i], _lg(k_x * (x - b[i])) - _lg(k_x * (x - b[i + 1]))) for i in range(lo, hi))


def _lg(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    ez = math.exp(z)
    return ez / (1.0 + ez)


def step(state: SimState) -> SimState:
    """Advance the simulation by one tick (in place) and return the state."""
    g = state.graph
    p = state.params
    ants = state.ants
    dt = state.settings.dt
    t = float(state.clock)
    log = state.deposit_log

    eta = state.colony.eta
    if not 0 <= eta < 1:
        raise ValueError(f"eta must lie in [0, 1), got {eta}")
    for ant in ants:
        # same draw as perturb_velocity, checked once per tick
        ant.velocity = ant.v0 * (1.0 + ant.rng.uniform(-eta, eta)) if eta else ant.v0

    evaluate = partial(entry_value, state)
    # ants per edge heading u -> v and v -> u; an edge is closed to entries
    # against an ant already on it
    heading = ([0] * g.edge_count, [0] * g.edge_count)
    for ant in ants:
        if ant.seg is not None:
            heading[ant.seg.reverse][ant.seg.edge] += 1

    settle_node = state.target_node if state.settings.settle else None
    reach_cache = g._reach_cache
    occupant = g.occupant
    just_entered = set()
    for ant in ants:
        if ant.seg is not None or ant.node == settle_node:
            continue
        back = ant.came_from if len(g.incident[ant.node]) > 1 else None
        refs = reach_cache.get((ant.node, state.reach))
        if refs is None:
            reachable_segments(g, ant.node, state.reach)
            refs = reach_cache[(ant.node, state.reach)]
        cands = [
            c
            for c in refs
            if c.edge != back and occupant[c.edge][c.j] is None and not heading[not c.reverse][c.edge]
        ]
        values = entry_values(state, cands, t) if len(cands) > 1 else None
        choice = select_next_segment(ant, cands, evaluate, t, state.colony.top_k, values=values)
        if choice is None:
            continue
        ev = enter_segment(ant, choice, g, t)
        heading[choice.reverse][choice.edge] += 1
        _record(state, ev, log)
        just_entered.add(ant.id)

    vacated: dict = {}
    for ant in ants:
        if ant.seg is None or ant.id in just_entered:
            continue
        for ev in advance_ant(ant, dt, g, t, vacated):
            if ev.kind == "deposit":
                _record(state, ev, log)

    t_end = t + dt
    for eid, j, log_target in state.source_segments:
        train = state.trains[eid][j]
        if train.log_value(t_end, p) < log_target:
            train.deposit(t_end)

    state.clock += 1
    return state


def _record(state: SimState, ev: Event, log) -> None:
    train = state.trains[ev.edge][ev.j]
    when = ev.time
    if train.times and when < train.times[-1]:
        when = train.times[-1]
    train.deposit(when)
    if log is not None:
        log.append((state.clock, ev.edge, ev.j, when))


def positions(state: SimState) -> np.ndarray:
    return np.array([ant_position(a, state.graph) for a in state.ants], dtype=float)


def target_distances(state: SimState) -> np.ndarray:
    from nestmigration.metrics import ant_distances

    return ant_distances(state.ants, state.graph, state.target_node)


def check_convergence(state: SimState, r_n: float | None = None, threshold: float | None = None) -> bool:
    from nestmigration.metrics import rn_convergence_rate

    r_n = state.settings.r_n if r_n is None else r_n
    threshold = state.settings.threshold if threshold is None else threshold
    if not 0 < threshold <= 1:
        raise ValueError(f"threshold must lie in (0, 1], got {threshold}")
    return rn_convergence_rate(state.ants, state.graph, state.target_node, r_n) >= threshold


# -- diagnostics --------------------------------------------------------
def field_on_grid(state: SimState, grid: Sequence[tuple[int, float]], t: float | None = None) -> np.ndarray:
    t = float(state.clock) if t is None else t
    g = state.graph
    out = np.zeros(len(grid))
    by_edge: dict[int, list[int]] = {}
    for k, (eid, _) in enumerate(grid):
        by_edge.setdefault(eid, []).append(k)
    for eid, ks in by_edge.items():
        xs = np.array([grid[k][1] for k in ks])
        out[ks] = edge_profile_smooth(g.boundaries[eid], state.trains[eid], xs, t, state.params)
    return out


def grid_distances(state: SimState, grid: Sequence[tuple[int, float]]) -> np.ndarray:
    g = state.graph
    tgt = g.nodes[state.target_node]
    pts = np.array([g.coord_to_xy(eid, x) for eid, x in grid], dtype=float)
    return np.hypot(pts[:, 0] - tgt.x, pts[:, 1] - tgt.y)


def normalized_l1(field_values, target_values) -> float:
    """Total-variation distance between two nonnegative profiles after unit-mass scaling.

    Lies in [0, 1]; an all-zero side counts as maximal mismatch.
    """
    f = np.asarray(field_values, dtype=float)
    c = np.asarray(target_values, dtype=float)
    if f.size == 0:
        raise ValueError("empty grid")
    fs, cs = f.sum(), c.sum()
    if not fs > 0 or not cs > 0:
        return 1.0
    return float(0.5 * np.abs(f / fs - c / cs).sum())


def distribution_mismatch(state: SimState, target: ConvergenceTarget | None, grid: Sequence[tuple[int, float]]) -> float:
    if not grid:
        raise ValueError("empty grid")
    target = state.target if target is None else target
    field_values = field_on_grid(state, grid)
    wanted = radial_target(grid_distances(state, grid), target, state.params.rho_star)
    return normalized_l1(field_values, wanted)


def temporal_equilibrium_residual(state: SimState, t: float | None = None) -> float:
    """``sum Hhat_t (1 - Hhat_t) - 1/delta`` over every live spike."""
    t = float(state.clock) if t is None else t
    k_t = state.params.k_t
    total = 0.0
    for per_edge in state.trains:
        for train in per_edge:
            if train.times:
                total += train.hhat_sums(t, k_t)[1]
    return total - 1.0 / state.params.delta


def saturation_sum(state: SimState, t: float | None = None) -> float:
    """``sum Hhat_t`` over every live spike (the no-evaporation condition's left side)."""
    t = float(state.clock) if t is None else t
    k_t = state.params.k_t
    return sum(tr.hhat_sums(t, k_t)[0] for per_edge in state.trains for tr in per_edge if tr.times)


def spatial_terms(boundaries: Sequence[float], x, k_x: float) -> np.ndarray:
    """Per-segment ``g(x - x_i) - g(x - x_{i+1})`` with ``g = Hhat (1 - Hhat)``."""
    b = np.asarray(boundaries, dtype=float)
    xs = np.asarray(x, dtype=float)[..., None]
    ha = expit(k_x * (xs - b[:-1]))
    hb = expit(k_x * (xs - b[1:]))
    terms = ha * (1.0 - ha) - hb * (1.0 - hb)
    # identical boundaries cancel exactly
    terms = np.where(b[:-1] == b[1:], 0.0, terms)
    return terms


def boundary_flags(boundaries: Sequence[float], tol: float = 1e-12) -> list[tuple[bool, bool]]:
    """Per segment: ``(x_i == x_{i+1}, x_i + x_{i+1} == 1)`` on unit-normalized coordinates."""
    b = list(boundaries)
    length = b[-1] if b[-1] else 1.0
    out = []
    for i in range(len(b) - 1):
        lo, hi = b[i] / length, b[i + 1] / length
        out.append((lo == hi, abs(lo + hi - 1.0) <= tol))
    return out


@dataclass
class SpatialResidual:
    value: float
    per_point: np.ndarray
    flags: dict


def spatial_equilibrium_residual(state: SimState, t: float | None = None, grid=None) -> SpatialResidual:
    """Spatial-stationarity residual over a sample grid.

    ``value`` is the mean absolute per-point residual; ``flags`` maps
    ``(edge, j)`` to the boundary-pair checks that came out true.
    """
    from nestmigration.pheromone import sample_grid

    g = state.graph
    grid = sample_grid(g, 11) if grid is None else grid
    k_x = state.params.k_x
    per_point = np.array([float(spatial_terms(g.boundaries[eid], x, k_x).sum()) for eid, x in grid])
    flags = {}
    for e in g.edges:
        for j, (degenerate, symmetric) in enumerate(boundary_flags(g.boundaries[e.id])):
            if degenerate or symmetric:
                flags[(e.id, j)] = (degenerate, symmetric)
    value = float(np.mean(np.abs(per_point))) if per_point.size else 0.0
    return SpatialResidual(value, per_point, flags)


def equilibrium_report(state: SimState, grid=None) -> EquilibriumReport:
    t = float(state.clock)
    return EquilibriumReport(
        temporal_equilibrium_residual(state, t),
        spatial_equilibrium_residual(state, t, grid).value,
        t,
    )


def invariant_violations(state: SimState) -> list[str]:
    """Occupancy and velocity checks; empty when everything holds."""
    problems = []
    seen: dict[tuple[int, int], int] = {}
    eta = state.colony.eta
    occupant = state.graph.occupant
    bounds = state.graph.boundaries
    for ant in state.ants:
        tol = 1e-12 * ant.v0
        if not ant.v0 * (1 - eta) - tol <= ant.velocity <= ant.v0 * (1 + eta) + tol or not ant.velocity > 0:
            problems.append(f"ant {ant.id} velocity {ant.velocity} out of bounds")
        seg = ant.seg
        if seg is None:
            continue
        key = (seg.edge, seg.j)
        if key in seen:
            problems.append(f"segment {key} hosts ants {seen[key]} and {ant.id}")
        seen[key] = ant.id
        if occupant[seg.edge][seg.j] != ant.id:
            problems.append(f"occupancy table disagrees for ant {ant.id} at {key}")
        length = bounds[seg.edge][seg.j + 1] - bounds[seg.edge][seg.j]
        if not -1e-9 <= ant.offset <= length + 1e-9:
            problems.append(f"ant {ant.id} offset {ant.offset} outside segment of length {length}")
    occupied = sum(len(occ) - occ.count(None) for occ in state.graph.occupant)
    if occupied != len(seen):
        problems.append(f"{occupied} occupied segments but {len(seen)} ants on segments")
    if len(state.ants) != state.colony.ant_count:
        problems.append(f"ant count {len(state.ants)} != {state.colony.ant_count}")
    return problems


@dataclass
class RunOutcome:
    converged: bool
    convergence_tick: int | None
    rn_rate: float
    ticks: int
    history: list[bool] = field(default_factory=list, repr=False)


def run(
    state: SimState,
    max_ticks: int | None = None,
    stop_on_convergence: bool = True,
    observer: Callable[[SimState], None] | None = None,
) -> RunOutcome:
    """Step until convergence (optionally) or ``max_ticks`` ticks have elapsed.

    Convergence is checked on the initial state and after every tick.
    """
    from nestmigration.metrics import rn_convergence_rate

    s = state.settings
    max_ticks = s.max_ticks if max_ticks is None else max_ticks
    history: list[bool] = []
    first = None

    def check() -> bool:
        nonlocal first
        ok = rn_convergence_rate(state.ants, state.graph, state.target_node, s.r_n) >= s.threshold
        history.append(ok)
        if ok and first is None:
            first = state.clock
        return ok

    if observer is not None:
        observer(state)
    start = state.clock
    done = check() and stop_on_convergence
    while not done and state.clock - start < max_ticks:
        step(state)
        if observer is not None:
            observer(state)
        done = check() and stop_on_convergence
    rate = rn_convergence_rate(state.ants, state.graph, state.target_node, s.r_n)
    return RunOutcome(first is not None, first, rate, state.clock - start, history)

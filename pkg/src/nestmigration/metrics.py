"""Convergence metrics and the radius x resolution x lambda sweep."""

from __future__ import annotations

import copy
import csv
import io
import math
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from nestmigration.colony import Ant, ant_position
from nestmigration.graph import SegmentedGraph


@dataclass
class RunMetrics:
    r_n: float
    resolution: int
    lam: float
    seed: int
    rn_rate: float
    convergence_time: int | None

    @property
    def converged(self) -> bool:
        return self.convergence_time is not None


@dataclass
class SweepGrid:
    radii: list[float]
    resolutions: list[int]
    lambdas: list[float]
    seeds: list[int]

    def __post_init__(self):
        for name in ("radii", "resolutions", "lambdas", "seeds"):
            if not getattr(self, name):
                raise ValueError(f"sweep grid needs at least one value in {name}")
        if any(r <= 0 for r in self.radii):
            raise ValueError("radii must be > 0")
        if any(n < 0 for n in self.resolutions):
            raise ValueError("resolutions must be >= 0")
        if any(lam <= 0 for lam in self.lambdas):
            raise ValueError("lambdas must be > 0")

    def cells(self) -> list[tuple[float, int, float, int]]:
        return [
            (r, n, lam, s)
            for r in self.radii
            for n in self.resolutions
            for lam in self.lambdas
            for s in self.seeds
        ]


def ant_distances(colony: Sequence[Ant], graph: SegmentedGraph, target_node: int) -> np.ndarray:
    tgt = graph.nodes[target_node]
    out = []
    for a in colony:
        x, y = ant_position(a, graph)
        out.append(math.hypot(x - tgt.x, y - tgt.y))
    return np.array(out, dtype=float)


def rn_convergence_rate(colony: Sequence[Ant], graph: SegmentedGraph, target_node: int, r_n: float) -> float:
    """Fraction of ants strictly closer than ``r_n`` (Euclidean) to the target node."""
    if not colony:
        raise ValueError("empty colony")
    if not r_n > 0:
        raise ValueError(f"r_n must be > 0, got {r_n}")
    tgt = graph.nodes[target_node]
    tx, ty = tgt.x, tgt.y
    nodes, edges, boundaries = graph.nodes, graph.edges, graph.boundaries
    inside = 0
    for a in colony:
        seg = a.seg
        if seg is None:
            q = nodes[a.node]
            x, y = q.x, q.y
        else:
            # same arithmetic as ant_position, inlined for the per-tick check
            b = boundaries[seg.edge]
            coord = b[seg.j + 1] - a.offset if seg.reverse else b[seg.j] + a.offset
            e = edges[seg.edge]
            u, w = nodes[e.u], nodes[e.v]
            f = coord / e.length
            x, y = u.x + (w.x - u.x) * f, u.y + (w.y - u.y) * f
        inside += math.hypot(x - tx, y - ty) < r_n
    return inside / len(colony)


def convergence_time(history: Iterable) -> int | None:
    """First tick whose convergence check passed.

    ``history`` is either a sequence of booleans indexed by tick or of
    ``(tick, passed)`` pairs.
    """
    for i, item in enumerate(history):
        if isinstance(item, tuple):
            tick, ok = item
        else:
            tick, ok = i, item
        if ok:
            return int(tick)
    return None


def distance_histogram(distances: Sequence[float], bin_width: float) -> list[tuple[float, float, int]]:
    if not bin_width > 0:
        raise ValueError(f"bin_width must be > 0, got {bin_width}")
    d = np.asarray(distances, dtype=float)
    if d.size == 0:
        return []
    nbins = int(math.floor(d.max() / bin_width)) + 1
    idx = np.minimum((d // bin_width).astype(int), nbins - 1)
    counts = np.bincount(idx, minlength=nbins)
    return [(k * bin_width, (k + 1) * bin_width, int(c)) for k, c in enumerate(counts)]


def final_distribution_histogram(colony, graph, target_node: int, bin_width: float):
    """Ant counts per ``[lo, hi)`` distance bin from the target node."""
    return distance_histogram(ant_distances(colony, graph, target_node), bin_width)


# -- sweep ------------------------------------------------------------
def cell_config(base, r_n: float, resolution: int, lam: float, seed: int):
    cfg = copy.deepcopy(base)
    cfg.target.r_n = float(r_n)
    cfg.resolution = int(resolution)
    cfg.target.lam = float(lam)
    cfg.seed = int(seed)
    return cfg


def run_cell(base, cell: tuple[float, int, float, int]) -> RunMetrics:
    """One independent run for a single grid cell."""
    from nestmigration.config import build_state
    from nestmigration.engine import run

    r_n, resolution, lam, seed = cell
    cfg = cell_config(base, r_n, resolution, lam, seed)
    state = build_state(cfg)
    outcome = run(state, stop_on_convergence=cfg.target.stop_on_convergence)
    return RunMetrics(r_n, resolution, lam, seed, outcome.rn_rate, outcome.convergence_tick)


def run_radii(
    base,
    radii: Sequence[float],
    resolution: int,
    lam: float,
    seed: int,
    observer: Callable | None = None,
) -> list[RunMetrics]:
    """Every radius of one (resolution, lambda, seed) group from a single trajectory.

    The convergence radius only enters the stopping check, never the
    dynamics, so each radius sees exactly the run :func:`run_cell` would
    produce: its rate is taken when it first converges (if the config stops
    on convergence) or at the end, and the run lasts until every radius is
    done or ``max_ticks`` is reached. ``observer`` sees the state before the
    first tick and after every tick.
    """
    from nestmigration.config import build_state
    from nestmigration.engine import step

    cfg = cell_config(base, max(radii), resolution, lam, seed)
    state = build_state(cfg)
    t = cfg.target
    n = len(state.ants)
    first: dict[float, int] = {}
    rate_at: dict[float, float] = {}

    def check() -> bool:
        d = ant_distances(state.ants, state.graph, state.target_node)
        for r in radii:
            if r in rate_at:
                continue
            rate = float(np.count_nonzero(d < r)) / n
            if rate >= t.threshold and r not in first:
                first[r] = state.clock
                if t.stop_on_convergence:
                    rate_at[r] = rate
        return len(rate_at) == len(radii)

    if observer is not None:
        observer(state)
    done = check()
    while not done and state.clock < t.max_ticks:
        step(state)
        if observer is not None:
            observer(state)
        done = check()
    d = ant_distances(state.ants, state.graph, state.target_node)
    return [
        RunMetrics(r, resolution, lam, seed, rate_at.get(r, float(np.count_nonzero(d < r)) / n), first.get(r))
        for r in radii
    ]


def _run_group_safe(args):
    base, radii, res, lam, seed = args
    try:
        return run_radii(base, radii, res, lam, seed), None
    except Exception as exc:  # recorded per cell, the sweep carries on
        return None, f"{type(exc).__name__}: {exc}"


@dataclass
class SweepResult:
    rows: list[RunMetrics]
    errors: list[tuple[tuple, str]] = field(default_factory=list)

    def aggregate(self) -> list[dict]:
        groups: dict[tuple, list[RunMetrics]] = {}
        for row in self.rows:
            groups.setdefault((row.r_n, row.resolution, row.lam), []).append(row)
        out = []
        for (r_n, res, lam), rows in groups.items():
            rates = [r.rn_rate for r in rows]
            times = [r.convergence_time for r in rows if r.converged]
            out.append(
                {
                    "r_n_mm": r_n,
                    "resolution": res,
                    "lambda": lam,
                    "runs": len(rows),
                    "converged": len(times),
                    "mean_rn_rate": statistics.fmean(rates),
                    "std_rn_rate": statistics.stdev(rates) if len(rates) > 1 else 0.0,
                    "mean_convergence_ticks": statistics.fmean(times) if times else None,
                    "std_convergence_ticks": statistics.stdev(times) if len(times) > 1 else (0.0 if times else None),
                }
            )
        return out

    def contour(self) -> list[dict]:
        groups: dict[tuple, list[float]] = {}
        for row in self.rows:
            groups.setdefault((row.lam, row.r_n), []).append(row.rn_rate)
        return [
            {"lambda": lam, "r_n_mm": r_n, "mean_rn_rate": statistics.fmean(v)}
            for (lam, r_n), v in sorted(groups.items())
        ]


def run_sweep(grid: SweepGrid, base, workers: int = 1) -> SweepResult:
    """One run per (resolution, lambda, seed); rows come back in grid order."""
    radii = list(dict.fromkeys(grid.radii))
    groups = [(base, radii, n, lam, s) for n in grid.resolutions for lam in grid.lambdas for s in grid.seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_group_safe, groups))
    else:
        results = [_run_group_safe(g) for g in groups]
    by_cell: dict[tuple, RunMetrics] = {}
    failed: dict[tuple, str] = {}
    for (_, _, n, lam, s), (rows, err) in zip(groups, results):
        for r in radii:
            if err is None:
                by_cell[(r, n, lam, s)] = next(m for m in rows if m.r_n == r)
            else:
                failed[(r, n, lam, s)] = err
    out = SweepResult([])
    for cell in grid.cells():
        if cell in by_cell:
            out.rows.append(by_cell[cell])
        else:
            out.errors.append((cell, failed[cell]))
    return out


# -- CSV ----------------------------------------------------------------
METRICS_HEADER = ("r_n_mm", "resolution", "lambda", "seed", "rn_rate", "convergence_ticks", "converged")
AGGREGATE_HEADER = (
    "r_n_mm",
    "resolution",
    "lambda",
    "runs",
    "converged",
    "mean_rn_rate",
    "std_rn_rate",
    "mean_convergence_ticks",
    "std_convergence_ticks",
)
CONTOUR_HEADER = ("lambda", "r_n_mm", "mean_rn_rate")
HISTOGRAM_HEADER = ("bin_lo_mm", "bin_hi_mm", "count")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _table(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def metrics_csv(rows: Iterable[RunMetrics]) -> str:
    return _table(
        METRICS_HEADER,
        ((r.r_n, r.resolution, r.lam, r.seed, r.rn_rate, r.convergence_time, r.converged) for r in rows),
    )


def aggregate_csv(agg: Iterable[dict]) -> str:
    return _table(AGGREGATE_HEADER, ([a[k] for k in AGGREGATE_HEADER] for a in agg))


def contour_csv(rows: Iterable[dict]) -> str:
    return _table(CONTOUR_HEADER, ([r[k] for k in CONTOUR_HEADER] for r in rows))


def histogram_csv(bins: Iterable[tuple[float, float, int]]) -> str:
    return _table(HISTOGRAM_HEADER, bins)

import csv
import io
import random

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nestmigration.colony import Ant
from nestmigration.config import RunConfig
from nestmigration.graph import Edge, PlanarNode, SegmentedGraph, SegmentRef
from nestmigration.metrics import (
    AGGREGATE_HEADER,
    CONTOUR_HEADER,
    METRICS_HEADER,
    RunMetrics,
    SweepGrid,
    SweepResult,
    aggregate_csv,
    contour_csv,
    convergence_time,
    distance_histogram,
    final_distribution_histogram,
    histogram_csv,
    metrics_csv,
    rn_convergence_rate,
    run_cell,
    run_radii,
    run_sweep,
)


def line(length=10.0, n=5):
    nodes = [PlanarNode(0, 0.0, 0.0), PlanarNode(1, length, 0.0)]
    return SegmentedGraph(nodes, [Edge(0, 0, 1, length)], n)


def at_node(i, node):
    return Ant(i, 1.0, 1.0, node=node, rng=random.Random(i))


def on_seg(i, ref, offset):
    return Ant(i, 1.0, 1.0, seg=ref, offset=offset, rng=random.Random(i))


def strict_rows(text, header):
    rows = list(csv.reader(io.StringIO(text), strict=True))
    assert tuple(rows[0]) == header
    assert all(len(r) == len(header) for r in rows)
    return rows[1:]


def test_rate_examples():
    g = line()
    assert rn_convergence_rate([at_node(i, 1) for i in range(4)], g, 1, 3.0) == 1.0
    assert rn_convergence_rate([at_node(i, 0) for i in range(4)], g, 1, 3.0) == 0.0
    ants = [at_node(0, 1), at_node(1, 1), on_seg(2, SegmentRef(0, 4), 0.5), at_node(3, 0)]
    assert rn_convergence_rate(ants, g, 1, 3.0) == 0.75


def test_rate_is_strict_at_radius():
    g = line()
    ants = [on_seg(0, SegmentRef(0, 3), 1.0)]  # exactly 3 mm from node 1
    assert rn_convergence_rate(ants, g, 1, 3.0) == 0.0
    assert rn_convergence_rate(ants, g, 1, 3.0 + 1e-9) == 1.0


def test_rate_rejects_bad_input():
    with pytest.raises(ValueError):
        rn_convergence_rate([], line(), 1, 3.0)
    with pytest.raises(ValueError):
        rn_convergence_rate([at_node(0, 0)], line(), 1, 0.0)


@given(st.lists(st.floats(0, 10), min_size=1, max_size=30), st.floats(0.01, 12), st.floats(0.01, 12))
def test_rate_radius_inclusion(offsets, r1, r2):
    g = line(10.0, 1)
    ants = [on_seg(i, SegmentRef(0, 0), x) for i, x in enumerate(offsets)]
    lo, hi = sorted((r1, r2))
    assert rn_convergence_rate(ants, g, 1, lo) <= rn_convergence_rate(ants, g, 1, hi)


def test_convergence_time_examples():
    assert convergence_time([True, False]) == 0
    hist = [False] * 1234 + [True, True]
    assert convergence_time(hist) == 1234
    assert convergence_time([False] * 10) is None
    assert convergence_time([(5, False), (9, True)]) == 9


def test_histogram_examples():
    g = line()
    bins = final_distribution_histogram([at_node(i, 1) for i in range(6)], g, 1, 2.5)
    assert bins == [(0.0, 2.5, 6)]
    rng = np.random.default_rng(0)
    d = rng.uniform(0, 100, 20_000)
    counts = np.array([c for _, _, c in distance_histogram(d, 10.0)])
    assert len(counts) == 10
    assert np.all(np.abs(counts - 2000) < 5 * np.sqrt(2000))
    assert counts.sum() == 20_000


def test_histogram_bin_edges():
    bins = distance_histogram([0.0, 4.999, 5.0, 12.0], 5.0)
    assert bins == [(0.0, 5.0, 2), (5.0, 10.0, 1), (10.0, 15.0, 1)]
    with pytest.raises(ValueError):
        distance_histogram([1.0], 0.0)


def test_grid_validation():
    with pytest.raises(ValueError):
        SweepGrid([], [0], [0.1], [1])
    with pytest.raises(ValueError):
        SweepGrid([20.0], [-1], [0.1], [1])
    assert len(SweepGrid([20, 30, 40], [0, 5, 10], [0.1], [1]).cells()) == 9


def tiny_base():
    return RunConfig.desk(
        **{
            "graph.node_count": 8,
            "graph.edge_count": 14,
            "graph.width": 40.0,
            "graph.height": 40.0,
            "colony.ant_count": 6,
            "colony.r_I": 10.0,
            "target.max_ticks": 150,
        }
    )


def test_sweep_cardinality_and_order():
    grid = SweepGrid([5.0, 8.0], [0, 3], [0.1, 0.2], [1, 2])
    result = run_sweep(grid, tiny_base())
    assert result.errors == []
    assert len(result.rows) == 16
    assert [(r.r_n, r.resolution, r.lam, r.seed) for r in result.rows] == grid.cells()


def test_sweep_seeds_distinct():
    result = run_sweep(SweepGrid([8.0], [3], [0.1], [1, 2, 3, 4, 5]), tiny_base())
    assert [r.seed for r in result.rows] == [1, 2, 3, 4, 5]


def test_sweep_is_deterministic():
    grid = SweepGrid([5.0, 8.0], [0, 3], [0.1], [1, 2])
    a = metrics_csv(run_sweep(grid, tiny_base()).rows)
    b = metrics_csv(run_sweep(grid, tiny_base()).rows)
    assert a == b


def test_sweep_records_cell_errors():
    base = tiny_base()
    base.graph.edge_count = 100  # infeasible for 8 nodes
    result = run_sweep(SweepGrid([5.0], [0], [0.1], [1]), base)
    assert result.rows == [] and len(result.errors) == 1


def test_csv_outputs_parse_strictly():
    rows = [
        RunMetrics(20.0, 5, 0.1, 1, 0.5, None),
        RunMetrics(20.0, 5, 0.1, 2, 0.7, 120),
        RunMetrics(30.0, 5, 0.1, 1, 0.9, 80),
    ]
    parsed = strict_rows(metrics_csv(rows), METRICS_HEADER)
    assert parsed[0] == ["20.0", "5", "0.1", "1", "0.5", "", "false"]
    assert parsed[1][-2:] == ["120", "true"]
    res = SweepResult(rows)
    agg = strict_rows(aggregate_csv(res.aggregate()), AGGREGATE_HEADER)
    assert agg[0][:5] == ["20.0", "5", "0.1", "2", "1"]
    assert float(agg[0][5]) == pytest.approx(0.6)
    contour = strict_rows(contour_csv(res.contour()), CONTOUR_HEADER)
    assert contour == [["0.1", "20.0", "0.6"], ["0.1", "30.0", "0.9"]]
    hist = strict_rows(histogram_csv([(0.0, 5.0, 3)]), ("bin_lo_mm", "bin_hi_mm", "count"))
    assert hist == [["0.0", "5.0", "3"]]


@pytest.mark.parametrize("stop", [True, False])
def test_grouped_radii_match_independent_runs(stop):
    base = tiny_base()
    base.target.stop_on_convergence = stop
    radii = [3.0, 6.0, 9.0]
    grouped = run_radii(base, radii, 3, 0.1, 4)
    for r, row in zip(radii, grouped):
        assert row == run_cell(base, (r, 3, 0.1, 4))

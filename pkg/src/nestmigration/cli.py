"""Command-line entry points: ``run``, ``sweep`` and ``replay``.

Every artifact is written to a temporary file in the destination directory
and renamed into place only once complete, so a failure never leaves a
partially written file behind.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import hashlib
import json
import os
import sys
import tempfile
from pathlib import Path
from typing import Iterator, Sequence

from nestmigration import __version__
from nestmigration.config import ConfigError, RunConfig, build_state, validate
from nestmigration.engine import SimState, run
from nestmigration.metrics import (
    RunMetrics,
    SweepGrid,
    aggregate_csv,
    contour_csv,
    final_distribution_histogram,
    histogram_csv,
    metrics_csv,
    run_sweep,
)
from nestmigration.pheromone import field_samples_csv, sample_field, trains_to_records

OUT_ENV = "NESTMIGRATION_OUT"
TRAJECTORY_HEADER = ("tick", "ant_id", "edge_id", "segment_j", "offset_mm", "node_id")
DEPOSIT_HEADER = ("tick", "edge", "segment", "time")
SNAPSHOT_FORMAT = "nestmigration-snapshot/1"


class CliError(Exception):
    """Reported as ``error: <message>`` with exit status 2."""


# -- file helpers -----------------------------------------------------
@contextlib.contextmanager
def atomic_open(path: Path) -> Iterator:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


def write_atomic(path: Path, text: str) -> None:
    with atomic_open(path) as fh:
        fh.write(text)


def canonical_json(doc) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n"


def graph_hash(graph) -> str:
    """Git blob hash of the graph's canonical JSON."""
    body = canonical_json(graph.to_dict()).encode()
    return hashlib.sha1(b"blob %d\0" % len(body) + body).hexdigest()


def snapshot_doc(state: SimState) -> dict:
    return {"format": SNAPSHOT_FORMAT, "state": state.to_dict()}


def load_snapshot(path: Path) -> SimState:
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise CliError(f"cannot read snapshot {path}: {exc.strerror}") from exc
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CliError(f"corrupt snapshot {path}: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != SNAPSHOT_FORMAT:
        raise CliError(f"corrupt snapshot {path}: not a {SNAPSHOT_FORMAT} document")
    try:
        return SimState.from_dict(doc["state"])
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        raise CliError(f"corrupt snapshot {path}: {type(exc).__name__}: {exc}") from exc


# -- argument parsing -------------------------------------------------
def parse_floats(text: str) -> list[float]:
    return [float(v) for v in _split(text)]


def parse_ints(text: str) -> list[int]:
    """Comma list of integers; ``a..b`` expands to the inclusive range."""
    out: list[int] = []
    for part in _split(text):
        if ".." in part:
            lo, hi = part.split("..", 1)
            lo_i, hi_i = int(lo), int(hi)
            if hi_i < lo_i:
                raise argparse.ArgumentTypeError(f"empty range {part!r}")
            out.extend(range(lo_i, hi_i + 1))
        else:
            out.append(int(part))
    return out


def _split(text: str) -> list[str]:
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if not parts:
        raise argparse.ArgumentTypeError("expected at least one value")
    return parts


def _list_type(parse):
    def convert(text: str):
        try:
            return parse(text)
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from exc

    convert.__name__ = parse.__name__.replace("parse_", "")
    return convert


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nestmigration", description="Pheromone-driven nest migration on a planar graph.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, help="JSON run configuration (defaults apply when omitted)")
        p.add_argument("--out", type=Path, help=f"output directory (overrides ${OUT_ENV} and the config)")

    p_run = sub.add_parser("run", help="one migration run")
    common(p_run)
    p_run.add_argument("--seed", type=int)

    p_sweep = sub.add_parser("sweep", help="grid over radii, resolutions, lambdas and seeds")
    common(p_sweep)
    p_sweep.add_argument("--radii", type=_list_type(parse_floats), help="convergence radii in mm, e.g. 20,30,40")
    p_sweep.add_argument("--resolutions", type=_list_type(parse_ints), help="segments per edge, e.g. 0,5,10")
    p_sweep.add_argument("--lambdas", type=_list_type(parse_floats), help="radial scale factors")
    p_sweep.add_argument("--seeds", type=_list_type(parse_ints), help="seed list, e.g. 1..10 or 3,5")
    p_sweep.add_argument("--seed", type=int, help="single seed (shorthand for --seeds N)")
    p_sweep.add_argument("--workers", type=int, default=1)

    p_replay = sub.add_parser("replay", help="resume a snapshot for a number of ticks")
    p_replay.add_argument("snapshot", type=Path)
    p_replay.add_argument("--ticks", type=int, required=True)
    p_replay.add_argument("--out", type=Path)
    return parser


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    validate(cfg)
    return cfg


def resolve_out(args, cfg_out: str | None) -> Path:
    if args.out is not None:
        return args.out
    env = os.environ.get(OUT_ENV)
    if env:
        return Path(env)
    return Path(cfg_out or ".")


# -- commands ---------------------------------------------------------
def cmd_run(args) -> int:
    cfg = resolve_config(args)
    out = resolve_out(args, cfg.out)
    state = build_state(cfg, log_deposits=True)
    manifest = {
        "version": __version__,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "graph_hash": graph_hash(state.graph),
        "nest_node": state.colony.initial_nest,
        "target_node": state.target_node,
    }
    every = cfg.output.trajectory_every
    with contextlib.ExitStack() as stack:
        dep_w = csv.writer(stack.enter_context(atomic_open(out / "deposits.csv")), lineterminator="\n")
        dep_w.writerow(DEPOSIT_HEADER)
        traj_w = None
        if cfg.output.trajectory:
            traj_w = csv.writer(stack.enter_context(atomic_open(out / "trajectory.csv")), lineterminator="\n")
            traj_w.writerow(TRAJECTORY_HEADER)

        def observe(s: SimState) -> None:
            for row in s.deposit_log:
                dep_w.writerow((row[0], row[1], row[2], repr(row[3])))
            s.deposit_log.clear()
            if traj_w is not None and s.clock % every == 0:
                traj_w.writerows(trajectory_rows(s))

        outcome = run(state, stop_on_convergence=cfg.target.stop_on_convergence, observer=observe)

    metrics = RunMetrics(cfg.target.r_n, cfg.resolution, cfg.target.lam, cfg.seed, outcome.rn_rate, outcome.convergence_tick)
    write_atomic(out / "metrics.csv", metrics_csv([metrics]))
    samples = sample_field(state.graph, state.trains, [float(state.clock)], state.params, cfg.output.field_points_per_edge)
    write_atomic(out / "field.csv", field_samples_csv(samples))
    bins = final_distribution_histogram(state.ants, state.graph, state.target_node, cfg.output.histogram_bin_mm)
    write_atomic(out / "histogram.csv", histogram_csv(bins))
    write_atomic(out / "trains.json", canonical_json(trains_to_records(state.trains)))
    write_atomic(out / "final_state.json", canonical_json(snapshot_doc(state)))
    manifest["ticks"] = state.clock
    write_atomic(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(
        f"converged={'true' if outcome.converged else 'false'} "
        f"ticks={outcome.convergence_tick if outcome.converged else outcome.ticks} "
        f"rn_rate={outcome.rn_rate:.4f} out={out}"
    )
    return 0


def trajectory_rows(state: SimState):
    tick = state.clock
    for a in state.ants:
        if a.seg is None:
            yield (tick, a.id, "", "", "", a.node)
        else:
            yield (tick, a.id, a.seg.edge, a.seg.j, repr(float(a.offset)), "")


def cmd_sweep(args) -> int:
    cfg = resolve_config(args)
    out = resolve_out(args, cfg.out)
    if args.seeds is not None and args.seed is not None:
        raise CliError("pass either --seeds or --seed, not both")
    seeds = args.seeds if args.seeds is not None else [cfg.seed]
    grid = SweepGrid(
        radii=args.radii if args.radii is not None else [cfg.target.r_n],
        resolutions=args.resolutions if args.resolutions is not None else [cfg.resolution],
        lambdas=args.lambdas if args.lambdas is not None else [cfg.target.lam],
        seeds=seeds,
    )
    if args.workers < 1:
        raise CliError("--workers must be >= 1")
    result = run_sweep(grid, cfg, workers=args.workers)
    write_atomic(out / "metrics.csv", metrics_csv(result.rows))
    write_atomic(out / "aggregate.csv", aggregate_csv(result.aggregate()))
    write_atomic(out / "contour.csv", contour_csv(result.contour()))
    for cell, err in result.errors:
        print(f"cell r_n={cell[0]} resolution={cell[1]} lambda={cell[2]} seed={cell[3]} failed: {err}", file=sys.stderr)
    converged = sum(r.converged for r in result.rows)
    print(f"cells={len(grid.cells())} completed={len(result.rows)} converged={converged} out={out}")
    return 1 if result.errors else 0


def cmd_replay(args) -> int:
    if args.ticks < 0:
        raise CliError("--ticks must be >= 0")
    state = load_snapshot(args.snapshot)
    out = resolve_out(args, str(args.snapshot.parent))
    run(state, max_ticks=args.ticks, stop_on_convergence=False)
    name = "final_state.json" if out != args.snapshot.parent else f"replay_{state.clock}.json"
    write_atomic(out / name, canonical_json(snapshot_doc(state)))
    print(f"tick={state.clock} out={out / name}")
    return 0


COMMANDS = {"run": cmd_run, "sweep": cmd_sweep, "replay": cmd_replay}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, CliError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

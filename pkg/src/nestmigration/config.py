"""Run configuration: one JSON document holding every tunable.

Loading rejects unknown keys and re-validates every numeric constraint,
reporting the offending field by its dotted path.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from nestmigration.colony import ColonyConfig
from nestmigration.engine import ConvergenceTarget, EngineSettings, SimState
from nestmigration.graph import ConfigurationError, generate_graph, segment_edges
from nestmigration.pheromone import PheromoneParams


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass
class GraphSection:
    node_count: int = 200
    edge_count: int = 4000
    width: float = 1000.0
    height: float = 1000.0


@dataclass
class PheromoneSection:
    rho_star: float = 1.0
    delta: float = 50.0
    k_t: float = 50.0
    k_x: float = 50.0
    per_spike_decay: bool = False
    prune_horizon: float | None = 20.0


@dataclass
class ColonySection:
    ant_count: int = 500
    r_I: float = 50.0
    v0: float = 1.0
    eta: float = 0.1
    top_k: int = 3
    reach_radius: float | None = None


@dataclass
class TargetSection:
    # "lambda" in JSON
    lam: float = 0.1
    threshold: float = 0.9
    r_n: float = 40.0
    max_ticks: int = 200_000
    source: bool = True
    source_radius: float | None = None
    settle: bool = True
    stop_on_convergence: bool = True


@dataclass
class OutputSection:
    trajectory: bool = True
    trajectory_every: int = 1
    field_points_per_edge: int = 11
    histogram_bin_mm: float = 5.0


@dataclass
class RunConfig:
    graph: GraphSection = field(default_factory=GraphSection)
    resolution: int = 10
    pheromone: PheromoneSection = field(default_factory=PheromoneSection)
    colony: ColonySection = field(default_factory=ColonySection)
    target: TargetSection = field(default_factory=TargetSection)
    output: OutputSection = field(default_factory=OutputSection)
    seed: int = 0
    out: str = "runs/out"

    # -- presets ---------------------------------------------------------
    @classmethod
    def desk(cls, **overrides) -> RunConfig:
        """Laptop-scale setup: 20 nodes, 100 edges, 50 ants, r_I = 15% of the diagonal."""
        cfg = cls()
        cfg.graph = GraphSection(20, 100, 100.0, 100.0)
        cfg.colony.ant_count = 50
        cfg.colony.r_I = 0.15 * math.hypot(100.0, 100.0)
        cfg.target.r_n = cfg.colony.r_I * 40 / 50
        for key, value in overrides.items():
            set_path(cfg, key, value)
        validate(cfg)
        return cfg

    # -- (de)serialization --------------------------------------------
    def to_dict(self) -> dict:
        doc = dataclasses.asdict(self)
        doc["target"]["lambda"] = doc["target"].pop("lam")
        return doc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, doc: dict) -> RunConfig:
        cfg = _build(cls, doc, "")
        validate(cfg)
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> RunConfig:
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError("<document>", f"invalid JSON ({exc})") from exc
        if not isinstance(doc, dict):
            raise ConfigError("<document>", "top level must be an object")
        return cls.from_dict(doc)

    # -- model objects ------------------------------------------------
    def pheromone_params(self) -> PheromoneParams:
        return PheromoneParams(**dataclasses.asdict(self.pheromone))

    def engine_settings(self) -> EngineSettings:
        t = self.target
        return EngineSettings(t.r_n, t.threshold, t.max_ticks, t.source, t.source_radius, t.settle)


_JSON_NAMES = {"lam": "lambda"}


def _build(cls, doc, path: str):
    if not isinstance(doc, dict):
        raise ConfigError(path or "<document>", "expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    by_json = {_JSON_NAMES.get(n, n): n for n in fields}
    unknown = sorted(set(doc) - set(by_json))
    if unknown:
        raise ConfigError(_join(path, unknown[0]), "unknown key")
    kwargs = {}
    for key, value in doc.items():
        name = by_json[key]
        sub = _join(path, key)
        default = cls.__dataclass_fields__[name]
        factory = default.default_factory
        if factory is not dataclasses.MISSING and dataclasses.is_dataclass(factory):
            kwargs[name] = _build(factory, value, sub)
        else:
            kwargs[name] = _coerce(value, default.default, sub, "None" in str(default.type))
    return cls(**kwargs)


def _coerce(value, default, path, nullable=False):
    if value is None and nullable:
        return None
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float) or default is None:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        if not math.isfinite(value):
            raise ConfigError(path, f"must be finite, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    return value


def _join(path: str, key: str) -> str:
    return f"{path}.{key}" if path else key


def set_path(cfg: RunConfig, dotted: str, value) -> None:
    """Set a field such as ``"target.r_n"`` (JSON names accepted)."""
    parts = dotted.split(".")
    obj = cfg
    for part in parts[:-1]:
        obj = getattr(obj, part)
    name = {v: k for k, v in _JSON_NAMES.items()}.get(parts[-1], parts[-1])
    if not hasattr(obj, name):
        raise ConfigError(dotted, "unknown key")
    setattr(obj, name, value)


def _require(cond: bool, path: str, message: str) -> None:
    if not cond:
        raise ConfigError(path, message)


def validate(cfg: RunConfig) -> RunConfig:
    g = cfg.graph
    _require(g.node_count >= 2, "graph.node_count", "must be >= 2")
    max_edges = g.node_count * (g.node_count - 1) // 2
    _require(
        g.node_count - 1 <= g.edge_count <= max_edges,
        "graph.edge_count",
        f"must lie in [{g.node_count - 1}, {max_edges}]",
    )
    _require(g.width > 0, "graph.width", "must be > 0")
    _require(g.height > 0, "graph.height", "must be > 0")
    _require(cfg.resolution >= 0, "resolution", "must be >= 0")
    p = cfg.pheromone
    for name in ("rho_star", "delta", "k_t", "k_x"):
        _require(getattr(p, name) > 0, f"pheromone.{name}", "must be > 0")
    _require(p.prune_horizon is None or p.prune_horizon > 0, "pheromone.prune_horizon", "must be > 0 or null")
    c = cfg.colony
    _require(c.ant_count >= 1, "colony.ant_count", "must be >= 1")
    _require(c.r_I >= 0, "colony.r_I", "must be >= 0")
    _require(c.v0 > 0, "colony.v0", "must be > 0")
    _require(0 <= c.eta < 1, "colony.eta", "must lie in [0, 1)")
    _require(c.top_k >= 1, "colony.top_k", "must be >= 1")
    _require(c.reach_radius is None or c.reach_radius >= 0, "colony.reach_radius", "must be >= 0 or null")
    t = cfg.target
    _require(t.lam > 0, "target.lambda", "must be > 0")
    _require(0 < t.threshold <= 1, "target.threshold", "must lie in (0, 1]")
    _require(t.r_n > 0, "target.r_n", "must be > 0")
    _require(t.max_ticks >= 0, "target.max_ticks", "must be >= 0")
    _require(t.source_radius is None or t.source_radius >= 0, "target.source_radius", "must be >= 0 or null")
    o = cfg.output
    _require(o.trajectory_every >= 1, "output.trajectory_every", "must be >= 1")
    _require(o.field_points_per_edge >= 1, "output.field_points_per_edge", "must be >= 1")
    _require(o.histogram_bin_mm > 0, "output.histogram_bin_mm", "must be > 0")
    _require(cfg.seed >= 0, "seed", "must be >= 0")
    return cfg


def build_state(cfg: RunConfig, log_deposits: bool = False) -> SimState:
    """Generate the graph, pick nest and target, segment, and spawn the colony."""
    g = cfg.graph
    try:
        base = generate_graph(g.node_count, g.edge_count, (g.width, g.height), cfg.seed)
    except ConfigurationError as exc:
        raise ConfigError("graph", str(exc)) from exc
    nest, target = base.farthest_pair()
    graph = segment_edges(base, cfg.resolution)
    c = cfg.colony
    colony = ColonyConfig(c.ant_count, nest, c.r_I, c.eta, c.v0, c.top_k, c.reach_radius)
    return SimState.create(
        graph,
        cfg.pheromone_params(),
        colony,
        ConvergenceTarget(target, cfg.target.lam),
        cfg.engine_settings(),
        cfg.seed,
        log_deposits=log_deposits,
    )

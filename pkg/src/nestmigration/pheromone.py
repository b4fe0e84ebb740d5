"""Per-segment spike trains and piecewise-continuous pheromone profiles.

A segment visited at times ``t_1..t_n`` carries

    rho(t) = rho_star * exp(-t / delta) * sum_i H(t - t_i)

and an edge profile is the sum of its segment profiles gated by spatial
brackets ``H(x - x_i) - H(x - x_{i+1})``. The smooth variant swaps both step
functions for logistics of steepness ``k_t`` and ``k_x``.

With ``per_spike_decay`` every spike instead decays from its own onset,
``rho_star * exp(-(t - t_i) / delta)``.

The functions taking explicit ``times``/``boundaries`` are the reference
evaluators. :class:`SpikeTrain` additionally keeps an O(1) running cache used
by the simulation loop; it must agree with the reference evaluators.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass
from functools import cached_property
from typing import Iterable, NamedTuple, Sequence

import numpy as np
from scipy.special import expit


class ContractViolation(RuntimeError):
    """Raised when a deposit would move a spike train backwards in time."""


@dataclass(frozen=True)
class PheromoneParams:
    rho_star: float = 1.0
    delta: float = 50.0
    k_t: float = 50.0
    k_x: float = 50.0
    per_spike_decay: bool = False
    # spikes older than prune_horizon * delta are ignored; None disables
    prune_horizon: float | None = 20.0

    def __post_init__(self):
        for name in ("rho_star", "delta", "k_t", "k_x"):
            value = getattr(self, name)
            if not (isinstance(value, (int, float)) and math.isfinite(value) and value > 0):
                raise ValueError(f"{name} must be a finite number > 0, got {value!r}")
        if self.prune_horizon is not None and not self.prune_horizon > 0:
            raise ValueError(f"prune_horizon must be > 0 or None, got {self.prune_horizon!r}")

    @cached_property
    def prune_age(self) -> float:
        return math.inf if self.prune_horizon is None else self.prune_horizon * self.delta

    def to_dict(self) -> dict:
        return asdict(self)


def heaviside_time(t, t0):
    """Closed-at-left step: 1 where ``t >= t0``, else 0."""
    if np.ndim(t) == 0 and np.ndim(t0) == 0:
        return 1 if t >= t0 else 0
    return (np.asarray(t) >= np.asarray(t0)).astype(int)


heaviside_space = heaviside_time


def heaviside_smooth(v, v0, k):
    """Logistic ``1 / (1 + exp(-k (v - v0)))``, overflow-safe."""
    if k <= 0:
        raise ValueError(f"steepness must be > 0, got {k}")
    out = expit(k * (np.asarray(v, dtype=float) - v0))
    return float(out) if np.ndim(out) == 0 else out


def _logistic(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    ez = math.exp(z)
    return ez / (1.0 + ez)


class SpikeTrain:
    """Sorted, append-only deposit times of one segment.

    ``_start`` marks the first spike still inside the prune horizon. For the
    per-spike-decay form ``_acc`` caches ``sum exp(-(_acc_t - t_i)/delta)``
    over the first ``_folded`` spikes; it is folded forward lazily on query.
    ``_count`` counts deposits ever made, so callers can tell whether a
    cached value is stale.
    """

    __slots__ = ("times", "_start", "_folded", "_acc", "_acc_t", "_count")

    def __init__(self, times: Iterable[float] = ()):
        self.times: list[float] = []
        self._start = 0
        self._folded = 0
        self._acc = 0.0
        self._acc_t = 0.0
        self._count = 0
        for t in times:
            self.deposit(t)

    def __len__(self) -> int:
        return len(self.times)

    def __repr__(self) -> str:
        return f"SpikeTrain({self.times!r})"

    @property
    def last(self) -> float | None:
        return self.times[-1] if self.times else None

    def deposit(self, t: float) -> SpikeTrain:
        if t < 0:
            raise ContractViolation(f"deposit time must be >= 0, got {t}")
        if self.times and t < self.times[-1]:
            raise ContractViolation(f"deposit at t={t} precedes last deposit t={self.times[-1]}")
        self.times.append(float(t))
        self._count += 1
        return self

    # -- fast evaluation at a monotone clock -----------------------------
    def _refresh(self, t: float, p: PheromoneParams) -> None:
        times = self.times
        n = len(times)
        if p.per_spike_decay and self._folded < n:
            while self._folded < n:
                ti = times[self._folded]
                if self._folded >= self._start:
                    self._acc = self._acc * math.exp(-(ti - self._acc_t) / p.delta) + 1.0
                    self._acc_t = ti
                self._folded += 1
        start = self._start
        age = p.prune_age
        if start < n and t - times[start] > age:
            while start < n and t - times[start] > age:
                if p.per_spike_decay and start < self._folded:
                    self._acc -= math.exp(-(self._acc_t - times[start]) / p.delta)
                start += 1
            self._start = start
        if start == n or self._acc < 0.0:
            self._acc = 0.0
        if start > 256 and start * 2 > n:
            del times[:start]
            self._start = 0
            self._folded = max(self._folded - start, 0)

    def live(self) -> int:
        return len(self.times) - self._start

    def value(self, t: float, p: PheromoneParams, reduced: bool = False) -> float:
        """Exact segment profile at ``t`` (``t`` not before the last deposit).

        ``reduced`` drops the shared ``exp(-t/delta)`` envelope of the literal
        form, which keeps comparisons between segments meaningful after the
        envelope underflows. It is a no-op for the per-spike form.
        """
        if self.times and t < self.times[-1]:
            v = segment_profile(self.times, t, p)
            return v * math.exp(t / p.delta) if reduced and not p.per_spike_decay else v
        self._refresh(t, p)
        if p.per_spike_decay:
            if not self._acc:
                return 0.0
            return p.rho_star * self._acc * math.exp(-(t - self._acc_t) / p.delta)
        n = len(self.times) - self._start
        if reduced:
            return p.rho_star * n
        return p.rho_star * math.exp(-t / p.delta) * n if n else 0.0

    def log_value(self, t: float, p: PheromoneParams) -> float:
        """Natural log of :meth:`value` (``-inf`` when empty), underflow-free."""
        if self.times and t < self.times[-1]:
            v = segment_profile(self.times, t, p)
            return math.log(v) if v > 0 else -math.inf
        self._refresh(t, p)
        if p.per_spike_decay:
            if self._acc <= 0.0:
                return -math.inf
            return math.log(p.rho_star * self._acc) - (t - self._acc_t) / p.delta
        n = len(self.times) - self._start
        if n == 0:
            return -math.inf
        return math.log(p.rho_star * n) - t / p.delta

    def smooth_value(self, t: float, p: PheromoneParams, reduced: bool = False) -> float:
        """Smooth temporal factor ``rho_star * sum w_i * Hhat_t(t - t_i)``."""
        times = self.times
        if not times:
            return 0.0
        if t < times[-1]:
            v = float(segment_profile_smooth(times, t, p))
            return v * math.exp(t / p.delta) if reduced and not p.per_spike_decay else v
        self._refresh(t, p)
        start = self._start
        k_t = p.k_t
        i = len(times) - 1
        if p.per_spike_decay:
            if not self._acc:
                return 0.0
            total = self._acc * math.exp(-(t - self._acc_t) / p.delta)
            while i >= start and k_t * (t - times[i]) < 40.0:
                total += math.exp(-(t - times[i]) / p.delta) * (_logistic(k_t * (t - times[i])) - 1.0)
                i -= 1
        else:
            total = float(i + 1 - start)
            while i >= start and k_t * (t - times[i]) < 40.0:
                total += _logistic(k_t * (t - times[i])) - 1.0
                i -= 1
            if not reduced:
                total *= math.exp(-t / p.delta)
        return max(p.rho_star * total, 0.0)

    def hhat_sums(self, t: float, k_t: float) -> tuple[float, float]:
        """``(sum Hhat_t, sum Hhat_t (1 - Hhat_t))`` over live spikes."""
        s1 = 0.0
        s2 = 0.0
        for ti in self.times[self._start:]:
            h = _logistic(k_t * (t - ti))
            s1 += h
            s2 += h * (1.0 - h)
        return s1, s2

    # -- serialization -------------------------------------------------
    def state(self) -> dict:
        return {
            "times": list(self.times),
            "start": self._start,
            "folded": self._folded,
            "acc": self._acc,
            "acc_t": self._acc_t,
        }

    @classmethod
    def from_state(cls, doc: dict) -> SpikeTrain:
        train = cls()
        train.times = [float(t) for t in doc["times"]]
        train._start = int(doc.get("start", 0))
        train._folded = int(doc.get("folded", 0))
        train._acc = float(doc.get("acc", 0.0))
        train._acc_t = float(doc.get("acc_t", 0.0))
        return train


def deposit(train: SpikeTrain, t: float) -> SpikeTrain:
    """Append a deposit at ``t``; raises :class:`ContractViolation` on regression."""
    return train.deposit(t)


def _times_array(train) -> np.ndarray:
    return np.asarray(train.times if isinstance(train, SpikeTrain) else train, dtype=float)


def _live_mask(times: np.ndarray, t, p: PheromoneParams) -> np.ndarray:
    return (np.asarray(t)[..., None] - times) <= p.prune_age


def _weights(times: np.ndarray, t, p: PheromoneParams) -> np.ndarray:
    """Per-spike envelope weights, broadcast as ``t[..., None]`` x spikes."""
    tt = np.asarray(t, dtype=float)[..., None]
    if p.per_spike_decay:
        return p.rho_star * np.exp(-(tt - times) / p.delta)
    return p.rho_star * np.exp(-tt / p.delta) * np.ones_like(times)


def segment_profile(train, t, p: PheromoneParams):
    """Exact profile of one segment at time(s) ``t``."""
    times = _times_array(train)
    tt = np.asarray(t, dtype=float)
    if times.size == 0:
        return 0.0 if tt.ndim == 0 else np.zeros(tt.shape)
    gate = (tt[..., None] >= times) & _live_mask(times, tt, p)
    out = np.sum(_weights(times, tt, p) * gate, axis=-1)
    return float(out) if out.ndim == 0 else out


def segment_profile_smooth(train, t, p: PheromoneParams):
    """Smooth temporal profile of one segment (logistic in place of the step)."""
    times = _times_array(train)
    tt = np.asarray(t, dtype=float)
    if times.size == 0:
        return 0.0 if tt.ndim == 0 else np.zeros(tt.shape)
    gate = expit(p.k_t * (tt[..., None] - times)) * _live_mask(times, tt, p)
    out = np.sum(_weights(times, tt, p) * gate, axis=-1)
    return float(out) if out.ndim == 0 else out


def _segment_profile_smooth_dt(times: np.ndarray, t, p: PheromoneParams):
    tt = np.asarray(t, dtype=float)
    if times.size == 0:
        return np.zeros(tt.shape)
    h = expit(p.k_t * (tt[..., None] - times))
    live = _live_mask(times, tt, p)
    # d/dt of w(t) * h(t); both weight forms have dw/dt = -w / delta
    return np.sum(_weights(times, tt, p) * (p.k_t * h * (1.0 - h) - h / p.delta) * live, axis=-1)


def _check_x(boundaries: Sequence[float], x) -> np.ndarray:
    xs = np.asarray(x, dtype=float)
    length = boundaries[-1]
    if np.any(xs < 0) or np.any(xs > length):
        bad = xs[(xs < 0) | (xs > length)].ravel()[0]
        raise ValueError(f"x must lie in [0, {length}], got {bad}")
    return xs


def edge_profile_exact(boundaries: Sequence[float], trains: Sequence, x, t, p: PheromoneParams):
    """Exact edge profile; at interior ``x`` it equals the host segment's profile.

    The brackets are closed at the left, so the value at ``x = length`` is 0.
    """
    xs = _check_x(boundaries, x)
    xs, tt = np.broadcast_arrays(xs, np.asarray(t, dtype=float))
    total = np.zeros(xs.shape)
    for i, train in enumerate(trains):
        bracket = heaviside_space(xs, boundaries[i]) - heaviside_space(xs, boundaries[i + 1])
        if np.any(bracket):
            total = total + segment_profile(train, tt, p) * bracket
    return float(total) if total.ndim == 0 else total


def edge_profile_smooth(boundaries: Sequence[float], trains: Sequence, x, t, p: PheromoneParams):
    xs = _check_x(boundaries, x)
    xs, tt = np.broadcast_arrays(xs, np.asarray(t, dtype=float))
    total = np.zeros(xs.shape)
    for i, train in enumerate(trains):
        if len(_times_array(train)) == 0:
            continue
        bracket = expit(p.k_x * (xs - boundaries[i])) - expit(p.k_x * (xs - boundaries[i + 1]))
        total = total + segment_profile_smooth(train, tt, p) * bracket
    return float(total) if total.ndim == 0 else total


def profile_gradient(boundaries: Sequence[float], trains: Sequence, x, t, p: PheromoneParams):
    """Analytic ``(d/dx, d/dt)`` of the smooth edge profile."""
    xs = _check_x(boundaries, x)
    xs, tt = np.broadcast_arrays(xs, np.asarray(t, dtype=float))
    gx = np.zeros(xs.shape)
    gt = np.zeros(xs.shape)
    for i, train in enumerate(trains):
        times = _times_array(train)
        if times.size == 0:
            continue
        ha = expit(p.k_x * (xs - boundaries[i]))
        hb = expit(p.k_x * (xs - boundaries[i + 1]))
        temporal = segment_profile_smooth(times, tt, p)
        gx = gx + temporal * p.k_x * (ha * (1.0 - ha) - hb * (1.0 - hb))
        gt = gt + _segment_profile_smooth_dt(times, tt, p) * (ha - hb)
    if gx.ndim == 0:
        return float(gx), float(gt)
    return gx, gt


class FieldSample(NamedTuple):
    edge: int
    x: float
    t: float
    value: float


def colony_profile(graph, trains, edge: int, x, t, p: PheromoneParams):
    """Smooth whole-colony profile at a point of ``edge``.

    Edges do not overlap, so only the host edge contributes.
    """
    if not 0 <= edge < graph.edge_count:
        raise ValueError(f"unknown edge id {edge}")
    return edge_profile_smooth(graph.boundaries[edge], trains[edge], x, t, p)


def _edge_points(length: float, n: int) -> list[float]:
    if n == 1:
        return [length / 2]
    pts = [length * k / (n - 1) for k in range(n - 1)]
    pts.append(length)  # length * k / k can round one ulp past the end
    return pts


def sample_grid(graph, points_per_edge: int = 11) -> list[tuple[int, float]]:
    """Evenly spaced ``(edge, x)`` locations covering every edge end to end."""
    if points_per_edge < 1:
        raise ValueError("points_per_edge must be >= 1")
    return [(e.id, x) for e in graph.edges for x in _edge_points(e.length, points_per_edge)]


def sample_field(graph, trains, times, p: PheromoneParams, points_per_edge: int = 11) -> list[FieldSample]:
    """Smooth colony profile over :func:`sample_grid` at each time in ``times``."""
    if points_per_edge < 1:
        raise ValueError("points_per_edge must be >= 1")
    ts = np.atleast_1d(np.asarray(times, dtype=float))
    out: list[FieldSample] = []
    for e in graph.edges:
        xs = np.asarray(_edge_points(e.length, points_per_edge))
        X, T = np.meshgrid(xs, ts, indexing="ij")
        vals = np.asarray(edge_profile_smooth(graph.boundaries[e.id], trains[e.id], X, T, p)).reshape(X.shape)
        for a, x in enumerate(xs):
            for b, t in enumerate(ts):
                out.append(FieldSample(e.id, float(x), float(t), max(float(vals[a, b]), 0.0)))
    return out


FIELD_CSV_HEADER = ("edge_id", "x_mm", "t", "value")


def field_samples_csv(samples: Iterable[FieldSample]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(FIELD_CSV_HEADER)
    for s in samples:
        w.writerow([s.edge, repr(s.x), repr(s.t), repr(s.value)])
    return buf.getvalue()


def trains_to_records(trains) -> list[dict]:
    """Non-empty spike trains as ``{edge, segment, times}`` records."""
    out = []
    for eid, per_edge in enumerate(trains):
        for j, train in enumerate(per_edge):
            if len(train):
                out.append({"edge": eid, "segment": j, "times": list(train.times)})
    return out


def trains_from_records(records: Iterable[dict], graph) -> list[list[SpikeTrain]]:
    trains = empty_trains(graph)
    for rec in records:
        trains[int(rec["edge"])][int(rec["segment"])] = SpikeTrain(rec["times"])
    return trains


def empty_trains(graph) -> list[list[SpikeTrain]]:
    return [[SpikeTrain() for _ in range(graph.resolution)] for _ in graph.edges]

"""Timed scenario events and piecewise-linear setpoint schedules.

Scenario file::

    name: scenario_a
    network: network_three_layer.yaml     # relative to this file; --network overrides
    t_end: 50
    dt: 1.0e-3
    integrator: rk4                # or rk45 (rtol, atol)
    stride: 10
    saturation: false
    antiwindup: true
    initial: equilibrium           # or rest, or {file: state.yaml}
    events:
      - {time: 5, action: ramp, targets: [E6, E7], field: q_set, scale: 2.0, until: 10}
      - {time: 20, action: connect, edge: 3}
      - {time: 20, action: setpoint, target: E25, field: q_set, value: 3.0e-3}
      - {time: 40, action: disconnect, edge: 4}
      - {time: 0, action: perturb, magnitude: 0.1, seed: 1}
      - {time: 0, action: saturation, enabled: true}

Targets are ``E<id>`` for edges and ``N<id>`` for nodes; fields are ``p_set``
and ``q_set``.  A ramp reaches ``value`` (or ``scale`` times the value at its
start) linearly at ``until``.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .io import read_yaml

ACTIONS = {"connect", "disconnect", "setpoint", "ramp", "perturb", "saturation"}
TOPOLOGY = {"connect", "disconnect"}


class ScenarioError(ValueError):
    pass


@dataclass
class Event:
    time: float
    action: str
    edge: int | None = None
    targets: list[str] = field(default_factory=list)
    field: str | None = None
    value: float | None = None
    scale: float | None = None
    until: float | None = None
    magnitude: float = 0.1
    seed: int | None = None
    enabled: bool = True
    state: dict[str, float] | None = None

    def __post_init__(self) -> None:
        if self.action not in ACTIONS:
            raise ScenarioError(f"unknown action {self.action!r}")
        if self.action in TOPOLOGY and self.edge is None:
            raise ScenarioError(f"{self.action} at t={self.time} needs an edge id")
        if self.action in ("setpoint", "ramp"):
            if self.field not in ("p_set", "q_set"):
                raise ScenarioError(f"{self.action} at t={self.time}: field must be p_set or q_set")
            if not self.targets:
                raise ScenarioError(f"{self.action} at t={self.time}: no target")
            if (self.value is None) == (self.scale is None):
                raise ScenarioError(f"{self.action} at t={self.time}: give exactly one of value, scale")
        if self.action == "ramp" and not (self.until is not None and self.until > self.time):
            raise ScenarioError(f"ramp at t={self.time} needs until > time")


@dataclass
class Scenario:
    name: str = "scenario"
    t_end: float = 10.0
    dt: float = 1e-3
    integrator: str = "rk4"
    rtol: float = 1e-8
    atol: float = 1e-12
    stride: int = 10
    saturation: bool = False
    antiwindup: bool = True
    initial: Any = "equilibrium"
    events: list[Event] = field(default_factory=list)
    network: str | None = None

    def __post_init__(self) -> None:
        if not self.t_end >= 0:
            raise ScenarioError("t_end must be non-negative")
        if not self.dt > 0:
            raise ScenarioError("dt must be positive")
        if int(self.stride) < 1:
            raise ScenarioError("stride must be >= 1")
        if self.integrator not in ("rk4", "rk45"):
            raise ScenarioError(f"unknown integrator {self.integrator!r}")
        self.events = sorted(self.events, key=lambda e: e.time)

    def breakpoints(self) -> list[float]:
        pts = {0.0, float(self.t_end)}
        for e in self.events:
            for t in (e.time, e.until):
                if t is not None and 0 < t < self.t_end:
                    pts.add(float(t))
        return sorted(pts)


def _event(item: dict) -> Event:
    item = dict(item)
    if "target" in item:
        item["targets"] = [item.pop("target")]
    if "node" in item:
        item.setdefault("targets", []).append(f"N{item.pop('node')}")
    item["targets"] = [str(t) for t in item.get("targets", [])]
    return Event(**item)


def load_scenario(src) -> Scenario:
    doc = dict(read_yaml(src))
    doc["events"] = [_event(e) for e in doc.get("events", [])]
    if isinstance(src, (str, Path)) and doc.get("network"):
        doc["network"] = str((Path(src).parent / doc["network"]).resolve())
    init = doc.get("initial")
    if isinstance(src, (str, Path)) and isinstance(init, dict) and "file" in init:
        doc["initial"] = {"file": str((Path(src).parent / init["file"]).resolve())}
    known = set(Scenario.__dataclass_fields__)
    extra = set(doc) - known
    if extra:
        raise ScenarioError(f"unknown scenario fields: {sorted(extra)}")
    return Scenario(**doc)


class Track:
    """Piecewise-linear, right-continuous signal."""

    def __init__(self, v0: float) -> None:
        self.t = [float("-inf")]
        self.v = [v0]

    def last(self) -> float:
        return self.v[-1]

    def add(self, t: float, v: float) -> None:
        self.t.append(t)
        self.v.append(v)

    def at(self, t: float, left: bool = False) -> float:
        ts = self.t
        k = (bisect.bisect_left(ts, t) if left else bisect.bisect_right(ts, t)) - 1
        if k == len(ts) - 1:
            return self.v[k]
        t0, t1 = ts[k], ts[k + 1]
        if t1 == t0 or t0 == float("-inf"):
            return self.v[k]
        w = (t - t0) / (t1 - t0)
        return self.v[k] + w * (self.v[k + 1] - self.v[k])


class SetpointSchedule:
    """Setpoint tracks for every controlled subsystem of a scenario."""

    def __init__(self, base: dict[str, tuple[float, float]], events: list[Event]) -> None:
        self.tracks: dict[tuple[str, str], Track] = {}
        for key, (p, q) in base.items():
            self.tracks[(key, "p_set")] = Track(p)
            self.tracks[(key, "q_set")] = Track(q)
        for ev in events:
            if ev.action not in ("setpoint", "ramp"):
                continue
            for key in ev.targets:
                tr = self.tracks.get((key, ev.field))
                if tr is None:
                    raise ScenarioError(f"event at t={ev.time}: unknown target {key}")
                cur = tr.at(ev.time)
                if cur != cur:  # NaN
                    raise ScenarioError(f"event at t={ev.time}: {key} has no {ev.field}")
                new = ev.value if ev.value is not None else cur * ev.scale
                tr.add(ev.time, cur)
                if ev.action == "setpoint":
                    tr.add(ev.time, new)
                else:
                    tr.add(ev.until, new)

    def segment(self, ta: float, tb: float):
        """Setpoints just after ``ta`` and slopes valid on ``[ta, tb)``."""
        base, slope = {}, {}
        keys = {k for k, _ in self.tracks}
        for key in keys:
            p0 = self.tracks[(key, "p_set")].at(ta)
            q0 = self.tracks[(key, "q_set")].at(ta)
            base[key] = (p0, q0)
            if tb > ta:
                p1 = self.tracks[(key, "p_set")].at(tb, left=True)
                q1 = self.tracks[(key, "q_set")].at(tb, left=True)
                sp = 0.0 if p0 != p0 else (p1 - p0) / (tb - ta)
                sq = 0.0 if q0 != q0 else (q1 - q0) / (tb - ta)
                slope[key] = (sp, sq)
        return base, slope

    def value(self, key: str, fld: str, t: float) -> float:
        return self.tracks[(key, fld)].at(t)

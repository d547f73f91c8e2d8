"""Scenario execution: events, segment integration and trajectory records."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import RK45

from . import kernel as K
from .engine import Assembly, NumericAbort
from .io import load_state
from .passivity import Equilibrium, segment_metrics, solve_equilibrium
from .scenario import Event, Scenario, ScenarioError, SetpointSchedule
from .topology import NetworkGraph, TopologyError, validate_network

# RK4 is run with an internal step no larger than STABILITY / spectral radius
STABILITY = 1.0
MANIFOLD_TOL = 1e-12
# per-output-step storage defect budget relative to max(1, H); refinement doublings allowed
DEFECT_REL = 1e-9
MAX_REFINE = 6


@dataclass
class Segment:
    t0: float
    t1: float
    keys: list[str]
    names: list[str]
    t: np.ndarray
    X: np.ndarray
    S: np.ndarray
    eq: Equilibrium
    ramping: bool
    substeps: int
    asm: Assembly = field(repr=False)
    H: np.ndarray | None = None
    psi: np.ndarray | None = None
    Z: np.ndarray | None = None
    D: np.ndarray | None = None
    ZK: np.ndarray | None = None
    UV: np.ndarray | None = None
    PW: np.ndarray | None = None
    projections: int = 0
    refinements: int = 0
    max_substeps: int = 0
    power_eval: float = 0.0  # worst |sum z d| / sum |z d| over every vector-field evaluation

    def column(self, name: str) -> np.ndarray:
        return self.X[:, self.names.index(name)]

    def has(self, name: str) -> bool:
        return name in self.names


@dataclass
class TrajectoryRecord:
    scenario: Scenario
    segments: list[Segment] = field(default_factory=list)
    log: list[dict] = field(default_factory=list)
    schedule: SetpointSchedule | None = None
    status: str = "ok"
    message: str = ""
    runtime: float = 0.0

    @property
    def t(self) -> np.ndarray:
        return np.concatenate([s.t for s in self.segments]) if self.segments else np.zeros(0)

    def channel(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        """Samples of state column ``name`` with NaN while the subsystem is inactive."""
        out = [s.column(name) if s.has(name) else np.full(s.t.size, np.nan) for s in self.segments]
        return self.t, np.concatenate(out)

    def setpoint(self, key: str, fld: str, t: np.ndarray, seg: Segment | None = None) -> np.ndarray:
        """Setpoint at ``t``; inside ``seg`` the closing sample takes the left limit."""
        tr = self.schedule.tracks[(key, fld)]
        return np.array([tr.at(float(tt), left=seg is not None and tt == seg.t1) for tt in t])

    def reference(self, key: str, fld: str) -> np.ndarray:
        """Setpoint aligned with ``t``, each sample referenced to its own segment."""
        if not self.segments:
            return np.zeros(0)
        return np.concatenate([self.setpoint(key, fld, s.t, s) for s in self.segments])

    @property
    def final_state(self) -> dict[str, np.ndarray]:
        seg = self.segments[-1]
        return seg.asm.layout.unpack(seg.X[-1])


def _perturb(graph: NetworkGraph, ev: Event) -> dict[str, dict[str, float]]:
    """Scale pump R, J, C and valve C_v by ``1 + U(-m, m)`` in a seeded, sorted order."""
    rng = np.random.default_rng(ev.seed)
    m = ev.magnitude
    chosen = set(ev.targets)
    applied = {}
    items = [("E", e.id, e) for e in sorted(graph.edges.values(), key=lambda e: e.id)]
    items += [("N", n.id, n) for n in sorted(graph.nodes.values(), key=lambda n: n.id)]
    for tag, i, obj in items:
        key = f"{tag}{i}"
        if chosen and key not in chosen:
            continue
        f = {}
        if getattr(obj, "pump", None) is not None:
            f["R_P"], f["J_P"], f["C_P"] = (1.0 + rng.uniform(-m, m, 3)).tolist()
            obj.pump = obj.pump.scaled(f["R_P"], f["J_P"], f["C_P"])
        if getattr(obj, "valve", None) is not None:
            f["C_v"] = float(1.0 + rng.uniform(-m, m))
            obj.valve = obj.valve.scaled(f["C_v"])
        if f:
            applied[key] = f
    return applied


class Simulation:
    """Mutable run state: topology, setpoint schedule, frozen states of inactive subsystems."""

    def __init__(self, graph: NetworkGraph, scenario: Scenario, saturation: bool | None = None,
                 antiwindup: bool | None = None) -> None:
        self.graph = graph.copy()
        self.scenario = scenario
        self.saturation = scenario.saturation if saturation is None else saturation
        self.antiwindup = scenario.antiwindup if antiwindup is None else antiwindup
        self.frozen: dict[str, np.ndarray] = {}
        self.pending: dict[str, np.ndarray] = {}
        self.log: list[dict] = []
        self.asm: Assembly | None = None
        for ev in scenario.events:
            for key in ev.targets:
                if ev.action in ("setpoint", "ramp") and not self._exists(key):
                    raise ScenarioError(f"event at t={ev.time} references missing {key}")
            if ev.action in ("connect", "disconnect") and ev.edge not in self.graph.edges:
                raise ScenarioError(f"event at t={ev.time} references missing edge {ev.edge}")

    def _exists(self, key: str) -> bool:
        i = int(key[1:])
        return (key[0] == "E" and i in self.graph.edges) or (key[0] == "N" and i in self.graph.nodes)

    def base_setpoints(self) -> dict[str, tuple[float, float]]:
        out = {}
        for e in self.graph.edges.values():
            p = e.pressure_ctl.setpoint if e.pressure_ctl else math.nan
            c = e.flow_ctl or e.valve_ctl
            out[e.key] = (p, c.setpoint if c else math.nan)
        for n in self.graph.nodes.values():
            out[n.key] = (n.pressure_ctl.setpoint if n.pressure_ctl else math.nan, math.nan)
        return out

    def apply_event(self, ev: Event, x: np.ndarray | None) -> tuple[bool, np.ndarray | None]:
        """Apply one event; returns whether the topology changed and the mapped state."""
        entry = {"time": ev.time, "action": ev.action}
        changed = False
        if ev.action in ("connect", "disconnect"):
            want = ev.action == "connect"
            edge = self.graph.edges[ev.edge]
            entry["edge"] = ev.edge
            if edge.active != want:
                trial = self.graph.copy()
                trial.set_active(ev.edge, want)
                rep = validate_network(trial)
                if not rep.ok:
                    raise TopologyError(f"{ev.action} edge {ev.edge} at t={ev.time} rejected: " + "; ".join(rep.errors))
                if x is not None and self.asm is not None:
                    self.frozen.update(self.asm.layout.unpack(x))
                self.graph = trial
                if want and ev.state:
                    self.pending[edge.key] = np.array([ev.state[n] for n in _names_of(edge)])
                changed = True
        elif ev.action == "perturb":
            entry["factors"] = _perturb(self.graph, ev)
            changed = True
        elif ev.action == "saturation":
            self.saturation = bool(ev.enabled)
            entry["enabled"] = self.saturation
            changed = True
        else:
            entry.update(targets=ev.targets, field=ev.field)
        self.log.append(entry)
        return changed, x

    def assemble(self, x_prev: np.ndarray | None) -> tuple[Assembly, np.ndarray | None]:
        if x_prev is not None and self.asm is not None:
            self.frozen.update(self.asm.layout.unpack(x_prev))
        asm = Assembly(self.graph, self.saturation, self.antiwindup)
        x = None
        if x_prev is not None:
            rest = asm.rest_state()
            parts = {}
            for k in asm.layout.keys:
                if k in self.pending:
                    parts[k] = self.pending.pop(k)
                elif k in self.frozen and self.frozen[k].size == asm.layout.slices[k].stop - asm.layout.slices[k].start:
                    parts[k] = self.frozen[k]
                else:
                    parts[k] = rest[asm.layout.slices[k]]
            x = asm.project_onto_manifold(asm.layout.pack(parts))
        self.asm = asm
        return asm, x


def _names_of(edge) -> tuple[str, ...]:
    from .engine import closed_loop_of_edge

    return closed_loop_of_edge(edge).names


def spectral_radius(asm: Assembly, xs, t: float) -> float:
    return max(asm.stiffness(x, t) for x in xs)


def run(graph: NetworkGraph, scenario: Scenario, *, dt: float | None = None, integrator: str | None = None,
        stride: int | None = None, saturation: bool | None = None, from_rest: bool = False,
        initial_state: dict[str, np.ndarray] | None = None, substeps: int | None = None,
        diagnostics: bool = True) -> TrajectoryRecord:
    """Integrate ``scenario`` on ``graph``.

    Segments are split at every event time and ramp end.  RK4 takes ``dt``
    output steps, each divided into enough internal steps to stay inside the
    stability region of the fastest mode (``substeps`` forces the count).
    """
    t_start = time.perf_counter()
    dt = scenario.dt if dt is None else dt
    integrator = scenario.integrator if integrator is None else integrator
    stride = scenario.stride if stride is None else stride
    if not dt > 0 or stride < 1:
        raise ScenarioError("dt must be positive and stride >= 1")
    sim = Simulation(graph, scenario, saturation)
    rec = TrajectoryRecord(scenario=scenario, log=sim.log)
    for ev in scenario.events:
        if ev.time <= 0:
            sim.apply_event(ev, None)
    rec.schedule = SetpointSchedule(sim.base_setpoints(), scenario.events)
    asm, _ = sim.assemble(None)
    bps = scenario.breakpoints()
    base, slope = rec.schedule.segment(0.0, bps[1] if len(bps) > 1 else 0.0)
    asm.set_setpoints(base, slope, 0.0)
    if initial_state is None and isinstance(scenario.initial, dict) and "file" in scenario.initial:
        initial_state = load_state(scenario.initial["file"])
    if initial_state is not None:
        rest = asm.rest_state()
        x = asm.layout.pack({k: np.asarray(initial_state.get(k, rest[asm.layout.slices[k]]), dtype=float)
                             for k in asm.layout.keys})
        if asm.manifold_residual(x) > MANIFOLD_TOL:
            x = asm.project_onto_manifold(x)
    elif from_rest or scenario.initial == "rest":
        x = asm.rest_state()
    else:
        x = solve_equilibrium(asm, 0.0).x
    segs = list(zip(bps[:-1], bps[1:]))
    if not segs:
        segs = [(0.0, 0.0)]
    for idx, (ta, tb) in enumerate(segs):
        if idx > 0:
            changed = False
            for ev in scenario.events:
                if ev.time == ta:
                    c, _ = sim.apply_event(ev, x)
                    changed |= c
            if changed:
                asm, x = sim.assemble(x)
        base, slope = rec.schedule.segment(ta, tb)
        asm.set_setpoints(base, slope, ta)
        try:
            seg = _integrate_segment(asm, x, ta, tb, dt, stride, integrator, scenario, substeps, diagnostics)
        except NumericAbort as exc:
            rec.status, rec.message = "numeric_abort", str(exc)
            if exc.args and len(exc.args) > 1:
                rec.segments.append(exc.args[1])
            break
        rec.segments.append(seg)
        x = seg.X[-1].copy()
    rec.runtime = time.perf_counter() - t_start
    return rec


def _integrate_segment(asm: Assembly, x0, ta, tb, dt, stride, integrator, scenario, substeps, diagnostics) -> Segment:
    eq = solve_equilibrium(asm, ta, x0=x0)
    Ws, WS, WOFF, SOFF, SNS = segment_metrics(asm)
    nS = len(asm.loops)
    DB = np.asarray(eq.d, dtype=float)
    ZKB = np.asarray(eq.z_K, dtype=float)
    mov = np.array([asm.p_slope[i] != 0 or asm.q_slope[i] != 0 for i in range(nS)], dtype=np.bool_)
    XB = np.ascontiguousarray(eq.x)
    length = tb - ta
    x = np.ascontiguousarray(x0, dtype=float).copy()
    nsub = 1
    nref, mmax, pmax = 0, 1, 0.0
    if length <= 0:
        T = np.array([ta])
        X = x[None, :].copy()
        S = np.zeros((1, nS))
        nproj = 0
    elif integrator == "rk4":
        nout = max(1, int(math.ceil(length / dt - 1e-9)))
        h_out = length / nout
        if substeps is None:
            rho = spectral_radius(asm, [x, eq.x], ta)
            nsub = max(1, int(math.ceil(h_out * rho / STABILITY)))
        else:
            nsub = int(substeps)
        max_refine = MAX_REFINE if substeps is None else 0
        nrec_max = nout // stride + 2
        Xr = np.zeros((nrec_max, x.size))
        Sr = np.zeros((nrec_max, nS))
        Tr = np.zeros(nrec_max)
        S0 = np.zeros(nS)
        status, nrec, worst, nproj, nref, mmax, pmax = K.rk4_segment(
            x, S0, ta, ta, h_out, nout, nsub, stride, max_refine, DEFECT_REL, asm.EF, asm.EI, asm.NF, asm.NI, asm.BK,
            asm.Lg_inv, asm.proj, asm.saturation, asm.antiwindup, XB, DB, mov, SOFF, SNS, WS, WOFF,
            MANIFOLD_TOL, Xr, Sr, Tr)
        T = np.concatenate([[ta], Tr[:nrec]])
        X = np.vstack([np.asarray(x0, dtype=float)[None, :], Xr[:nrec]])
        S = np.vstack([np.zeros((1, nS)), Sr[:nrec]])
        if status != 0:
            seg = Segment(ta, tb, list(asm.layout.keys), list(asm.layout.names), T, X, S, eq, asm.ramping, nsub, asm,
                          projections=nproj, refinements=nref, max_substeps=max(mmax, nsub), power_eval=pmax)
            if diagnostics:
                _diagnose(seg, XB, DB, ZKB, mov, SOFF, SNS, WS, WOFF)
            raise NumericAbort(f"non-finite state in segment [{ta}, {tb}]", seg)
        T[-1] = tb
    else:
        T, X, S, nproj = _rk45(asm, x, ta, tb, dt, stride, scenario, XB, DB, mov, SOFF, SNS, WS, WOFF)
        pmax = math.nan  # not instrumented on the adaptive path
    seg = Segment(ta, tb, list(asm.layout.keys), list(asm.layout.names), T, X, S, eq, asm.ramping, nsub, asm,
                  projections=nproj, refinements=nref, max_substeps=max(mmax, nsub), power_eval=pmax)
    if diagnostics:
        _diagnose(seg, XB, DB, ZKB, mov, SOFF, SNS, WS, WOFF)
    return seg


def _diagnose(seg: Segment, XB, DB, ZKB, mov, SOFF, SNS, WS, WOFF) -> None:
    asm = seg.asm
    ns, nS = seg.t.size, len(asm.loops)
    nE, nK = asm.n_edges, asm.B_KE.shape[0]
    seg.H, seg.psi = np.zeros((ns, nS)), np.zeros((ns, nS))
    seg.Z, seg.D = np.zeros((ns, nS)), np.zeros((ns, nS))
    seg.ZK, seg.UV, seg.PW = np.zeros((ns, nK)), np.zeros((ns, nE)), np.zeros((ns, 5))
    K.sample_diagnostics(np.ascontiguousarray(seg.X), seg.t, seg.t0, asm.EF, asm.EI, asm.NF, asm.NI, asm.BK,
                         asm.Lg_inv, asm.saturation, asm.antiwindup, XB, DB, ZKB, mov, SOFF, SNS, WS, WOFF,
                         seg.H, seg.psi, seg.Z, seg.D, seg.ZK, seg.UV, seg.PW)


def _rk45(asm, x0, ta, tb, dt, stride, scenario, XB, DB, mov, SOFF, SNS, WS, WOFF):
    n, nS = x0.size, SOFF.size
    args = (ta, asm.EF, asm.EI, asm.NF, asm.NI, asm.BK, asm.Lg_inv, asm.saturation, asm.antiwindup,
            XB, DB, mov, SOFF, SNS, WS, WOFF)
    out = np.zeros(n + nS)

    def fun(t, y):
        K.augmented_rhs(y, t, *args, out)
        return out.copy()

    atol = np.concatenate([scenario.atol * asm.state_scale(x0) / 1e-3, np.full(nS, scenario.atol)])
    y0 = np.concatenate([x0, np.zeros(nS)])
    solver = RK45(fun, ta, y0, tb, rtol=scenario.rtol, atol=atol)
    nout = max(1, int(math.ceil((tb - ta) / dt - 1e-9)))
    grid = ta + (tb - ta) * np.arange(stride, nout + 1, stride) / nout
    if grid.size == 0 or grid[-1] < tb:
        grid = np.append(grid, tb)
    T, Y = [ta], [y0.copy()]
    gi, nproj = 0, 0
    while solver.status == "running" and gi < grid.size:
        msg = solver.step()
        if solver.status == "failed" or not np.all(np.isfinite(solver.y)):
            raise NumericAbort(f"adaptive integrator failed at t={solver.t}: {msg}")
        dense = solver.dense_output()
        while gi < grid.size and grid[gi] <= solver.t + 1e-12:
            T.append(grid[gi])
            Y.append(dense(grid[gi]) if grid[gi] < solver.t else solver.y.copy())
            gi += 1
        if asm.manifold_residual(solver.y[:n]) > 10 * MANIFOLD_TOL:
            y = solver.y.copy()
            y[:n] = asm.project_onto_manifold(y[:n])
            solver.y = y
            solver.f = fun(solver.t, y)
            nproj += 1
    Y = np.array(Y)
    return np.array(T), Y[:, :n].copy(), Y[:, n:].copy(), nproj


def step(asm: Assembly, x, t: float, h: float) -> np.ndarray:
    """One classical RK4 step of the compiled vector field."""
    f = asm.fast_field
    k1 = f(x, t)
    k2 = f(x + 0.5 * h * k1, t + 0.5 * h)
    k3 = f(x + 0.5 * h * k2, t + 0.5 * h)
    k4 = f(x + h * k3, t + h)
    return x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def rk4_step(fn, x, t: float, h: float) -> np.ndarray:
    k1 = fn(x, t)
    k2 = fn(x + 0.5 * h * k1, t + 0.5 * h)
    k3 = fn(x + 0.5 * h * k2, t + 0.5 * h)
    k4 = fn(x + h * k3, t + h)
    return x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)

"""Assembled closed-loop network: state layout, junction solve, manifold projection.

The junction pressures are eliminated by solving the grounded Laplacian
``L_g z_K = B_KE J^-1 (F - B_DE^T z_D)``, which keeps ``B_KE q`` constant along
exact trajectories.  Two vector fields are provided: a readable reference built
from the per-subsystem closed loops and the compiled kernel used for time
stepping.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernel as K
from .controllers import (
    FLOW_PUMP_MODES,
    PRESSURE_MODES,
    VALVE_MODES,
    ClosedLoop,
    Mode,
    mode_of,
)
from .topology import EdgeType, NetworkGraph, NodeType, partition_incidence, validate_network

MODE_CODE = {
    Mode.D_FORM: K.M_DFORM,
    Mode.D_VALVE: K.M_DVALVE,
    Mode.D_VSP: K.M_DVSP,
    Mode.L_BOOST: K.M_LBOOST,
    Mode.L_VALVE: K.M_LVALVE,
    Mode.L_VSP: K.M_LVSP,
    Mode.P_PLAIN: K.M_PPLAIN,
    Mode.P_BOOST: K.M_PBOOST,
    Mode.MIXING: K.M_MIX,
    Mode.HOLDING: K.M_HOLD,
    Mode.CAPACITIVE: K.M_CAP,
}


class NumericAbort(RuntimeError):
    pass


def closed_loop_of_edge(e) -> ClosedLoop:
    mode = mode_of(e.kind.value, e.mode)
    pump = e.pump if mode not in (Mode.L_VALVE, Mode.MIXING, Mode.P_PLAIN) else None
    valve = e.valve if e.kind is not EdgeType.PIPE else None
    return ClosedLoop(
        key=e.key, mode=mode, pipe=e.pipe, pump=pump, valve=valve,
        pressure_ctl=e.pressure_ctl if mode in PRESSURE_MODES else None,
        flow_ctl=e.flow_ctl if mode in FLOW_PUMP_MODES else None,
        valve_ctl=e.valve_ctl if mode in VALVE_MODES else None,
    )


def closed_loop_of_node(n) -> ClosedLoop:
    if n.kind is NodeType.HOLDING:
        return ClosedLoop(key=n.key, mode=Mode.HOLDING, pump=n.pump, pressure_ctl=n.pressure_ctl)
    return ClosedLoop(key=n.key, mode=Mode.CAPACITIVE, capacitance=n.capacitance)


@dataclass
class StateLayout:
    keys: list[str]
    slices: dict[str, slice]
    names: list[str]

    @property
    def size(self) -> int:
        return len(self.names)

    def unpack(self, x) -> dict[str, np.ndarray]:
        return {k: np.array(x[self.slices[k]], dtype=float) for k in self.keys}

    def pack(self, parts: dict[str, np.ndarray]) -> np.ndarray:
        x = np.zeros(self.size)
        for k in self.keys:
            x[self.slices[k]] = parts[k]
        return x


@dataclass
class Ports:
    """Interconnection variables at one state: outputs ``z`` and inputs ``d``."""

    z: np.ndarray  # per subsystem, edges then Delta nodes
    d: np.ndarray
    z_K: np.ndarray
    d_K: np.ndarray  # B_KE q
    u_v: np.ndarray  # applied valve input per edge


@dataclass
class Assembly:
    """Closed-loop network assembled for one activation pattern.

    Setpoints are affine in time inside a segment: ``base + slope (t - tref)``.
    """

    graph: NetworkGraph
    saturation: bool = False
    antiwindup: bool = True
    loops: list[ClosedLoop] = field(init=False)
    layout: StateLayout = field(init=False)

    def __post_init__(self) -> None:
        rep = validate_network(self.graph)
        rep.raise_for_errors()
        self.warnings = rep.warnings
        self.partition = partition_incidence(self.graph)
        edges = self.graph.active_edges()
        nodes = [self.graph.nodes[i] for i in self.partition.delta_nodes]
        self.edges = edges
        self.delta_nodes = nodes
        self.loops = [closed_loop_of_edge(e) for e in edges] + [closed_loop_of_node(n) for n in nodes]
        self.n_edges = len(edges)
        self.n_delta = len(nodes)
        keys, slices, names, off = [], {}, [], 0
        for lp in self.loops:
            keys.append(lp.key)
            slices[lp.key] = slice(off, off + lp.size)
            names += [f"{lp.key}.{n}" for n in lp.names]
            off += lp.size
        self.layout = StateLayout(keys, slices, names)
        self.index = {k: i for i, k in enumerate(keys)}
        self.B_DE = self.partition.B_DE
        self.B_KE = self.partition.B_KE
        self.J = np.array([e.pipe.J for e in edges])
        self.q_index = np.array([slices[e.key].start for e in edges], dtype=np.int64)
        if self.B_KE.shape[0]:
            Lg = self.B_KE @ np.diag(1.0 / self.J) @ self.B_KE.T
            self.Lg_inv = np.linalg.inv(Lg)
            self.proj = np.diag(1.0 / self.J) @ self.B_KE.T @ self.Lg_inv
        else:
            self.Lg_inv = np.zeros((0, 0))
            self.proj = np.zeros((self.n_edges, 0))
        nS = len(self.loops)
        self.p_base = np.array([lp.setpoints()[0] for lp in self.loops])
        self.q_base = np.array([lp.setpoints()[1] for lp in self.loops])
        self.p_slope = np.zeros(nS)
        self.q_slope = np.zeros(nS)
        self.tref = 0.0
        self._build_kernel_arrays()

    # -- setpoints ---------------------------------------------------------------

    def set_setpoints(self, base: dict[str, tuple[float, float]], slope: dict[str, tuple[float, float]] | None = None,
                      tref: float = 0.0) -> None:
        slope = slope or {}
        for k, i in self.index.items():
            if k in base:
                self.p_base[i], self.q_base[i] = base[k]
            sp, sq = slope.get(k, (0.0, 0.0))
            self.p_slope[i] = 0.0 if math.isnan(self.p_base[i]) else sp
            self.q_slope[i] = 0.0 if math.isnan(self.q_base[i]) else sq
        self.tref = tref
        self._write_setpoints()

    def setpoints_at(self, i: int, t: float) -> tuple[float | None, float | None]:
        dt = t - self.tref
        p = self.p_base[i] + self.p_slope[i] * dt
        q = self.q_base[i] + self.q_slope[i] * dt
        return (None if math.isnan(p) else p), (None if math.isnan(q) else q)

    @property
    def ramping(self) -> bool:
        return bool(np.any(self.p_slope != 0) or np.any(self.q_slope != 0))

    # -- kernel data ---------------------------------------------------------------

    def _build_kernel_arrays(self) -> None:
        nE, nD = self.n_edges, self.n_delta
        part = self.partition
        row = {nid: k for k, nid in enumerate(part.delta_nodes + part.junctions)}
        EF = np.zeros((nE, K.NEF))
        EI = np.zeros((nE, K.NEI), dtype=np.int64)
        for i, (e, lp) in enumerate(zip(self.edges, self.loops[:nE])):
            EI[i] = (MODE_CODE[lp.mode], self.layout.slices[lp.key].start, row[e.source], row[e.target], lp.size)
            EF[i, K.F_J] = e.pipe.J
            EF[i, K.F_A] = e.pipe.a
            EF[i, K.F_B] = e.pipe.b
            EF[i, K.F_CV2] = 1.0 / lp.valve.C_v**2 if lp.valve is not None else 0.0
            EF[i, K.F_UVF] = lp.u_v_fixed
            if lp.pump is not None:
                EF[i, K.F_RP], EF[i, K.F_JP], EF[i, K.F_CP] = lp.pump.R_P, lp.pump.J_P, lp.pump.C_P
            if lp.pressure_ctl is not None:
                EF[i, K.F_PQI] = lp.pressure_ctl.Q_I
                EF[i, K.F_PRP] = lp.pressure_ctl.gain(lp.pump)
            if lp.flow_ctl is not None:
                EF[i, K.F_FKP], EF[i, K.F_FQI] = lp.flow_ctl.K_P, lp.flow_ctl.Q_I
            if lp.valve_ctl is not None:
                EF[i, K.F_VKP], EF[i, K.F_VQI] = lp.valve_ctl.K_P, lp.valve_ctl.Q_I
                EF[i, K.F_UMAX] = lp.valve.u_max
        NF = np.zeros((nD, K.NNF))
        NI = np.zeros((nD, 2), dtype=np.int64)
        for j, lp in enumerate(self.loops[nE:]):
            NI[j] = (MODE_CODE[lp.mode], self.layout.slices[lp.key].start)
            if lp.mode is Mode.HOLDING:
                NF[j, K.G_RP], NF[j, K.G_JP], NF[j, K.G_CP] = lp.pump.R_P, lp.pump.J_P, lp.pump.C_P
                NF[j, K.G_PQI] = lp.pressure_ctl.Q_I
                NF[j, K.G_PRP] = lp.pressure_ctl.gain(lp.pump)
            else:
                NF[j, K.G_C] = lp.capacitance
        self.EF, self.EI, self.NF, self.NI = EF, EI, NF, NI
        self.BK = np.ascontiguousarray(self.B_KE)
        self._write_setpoints()

    def _write_setpoints(self) -> None:
        nE = self.n_edges
        z = lambda v: 0.0 if math.isnan(v) else v  # noqa: E731
        for i in range(nE):
            self.EF[i, K.F_PSET] = z(self.p_base[i])
            self.EF[i, K.F_PSLOPE] = self.p_slope[i]
            self.EF[i, K.F_QSET] = z(self.q_base[i])
            self.EF[i, K.F_QSLOPE] = self.q_slope[i]
        for j in range(self.n_delta):
            self.NF[j, K.G_PSET] = z(self.p_base[nE + j])
            self.NF[j, K.G_PSLOPE] = self.p_slope[nE + j]

    def kernel_args(self):
        return (self.EF, self.EI, self.NF, self.NI, self.BK, self.Lg_inv)

    # -- reference vector field ------------------------------------------------------

    def delta_pressures(self, x) -> np.ndarray:
        out = np.empty(self.n_delta)
        for j, lp in enumerate(self.loops[self.n_edges:]):
            out[j] = x[self.layout.slices[lp.key]][1 if lp.mode is Mode.HOLDING else 0]
        return out

    def _forces(self, x, t):
        F = np.empty(self.n_edges)
        for i, lp in enumerate(self.loops[: self.n_edges]):
            _, qs = self.setpoints_at(i, t)
            F[i] = lp.flow_force(x[self.layout.slices[lp.key]], qs, self.saturation, self.antiwindup)
        return F

    def junction_pressures(self, x, t: float | None = None) -> np.ndarray:
        """Algebraic junction pressures that keep ``B_KE dq/dt = 0``."""
        t = self.tref if t is None else t
        if not self.B_KE.shape[0]:
            return np.zeros(0)
        zD = self.delta_pressures(x)
        g = (self._forces(x, t) - self.B_DE.T @ zD) / self.J
        return self.Lg_inv @ (self.B_KE @ g)

    def ports(self, x, t: float | None = None) -> Ports:
        t = self.tref if t is None else t
        zD = self.delta_pressures(x)
        zK = self.junction_pressures(x, t)
        q = x[self.q_index]
        dE = -self.B_DE.T @ zD - self.B_KE.T @ zK
        dD = self.B_DE @ q
        u_v = np.array([
            lp.valve_command(x[self.layout.slices[lp.key]], self.setpoints_at(i, t)[1], self.saturation,
                             self.antiwindup)[0]
            for i, lp in enumerate(self.loops[: self.n_edges])
        ])
        return Ports(np.concatenate([q, zD]), np.concatenate([dE, dD]), zK, self.B_KE @ q, u_v)

    def vector_field(self, x, t: float | None = None) -> np.ndarray:
        """Reference closed-loop right-hand side in physical coordinates."""
        t = self.tref if t is None else t
        pt = self.ports(x, t)
        out = np.empty_like(np.asarray(x, dtype=float))
        for i, lp in enumerate(self.loops):
            ps, qs = self.setpoints_at(i, t)
            sl = self.layout.slices[lp.key]
            out[sl] = lp.rhs(x[sl], pt.d[i], ps, qs, self.saturation, self.antiwindup)
        return out

    # -- compiled vector field -------------------------------------------------------

    def fast_field(self, x, t: float | None = None) -> np.ndarray:
        t = self.tref if t is None else t
        x = np.ascontiguousarray(x, dtype=float)
        xdot = np.zeros_like(x)
        nE, nD, nK = self.n_edges, self.n_delta, self.B_KE.shape[0]
        K.field(x, t, self.tref, self.EF, self.EI, self.NF, self.NI, self.BK, self.Lg_inv,
                self.saturation, self.antiwindup, xdot, np.zeros(nD + nK), np.zeros(nE), np.zeros(nD),
                np.zeros(nE), np.zeros(nE), np.zeros(nE))
        return xdot

    def jacobian(self, x, t: float | None = None, fn=None) -> np.ndarray:
        """Central-difference Jacobian with per-component relative steps."""
        fn = fn or self.fast_field
        x = np.asarray(x, dtype=float)
        n = x.size
        Jm = np.empty((n, n))
        scale = self.state_scale(x)
        for k in range(n):
            h = 1e-6 * scale[k]
            xp, xm = x.copy(), x.copy()
            xp[k] += h
            xm[k] -= h
            Jm[:, k] = (fn(xp, t) - fn(xm, t)) / (2 * h)
        return Jm

    def state_scale(self, x) -> np.ndarray:
        floor = np.empty(self.layout.size)
        for name_i, nm in enumerate(self.layout.names):
            v = nm.split(".")[1]
            floor[name_i] = {"q": 1e-3, "q_P": 1e-3, "p_P": 1e5, "p": 1e5, "r": 1e-3, "r_v": 1.0}[v]
        return np.maximum(np.abs(x), floor)

    # -- manifold ------------------------------------------------------------------------

    def manifold_residual(self, x) -> float:
        if not self.B_KE.shape[0]:
            return 0.0
        return float(np.max(np.abs(self.B_KE @ x[self.q_index])))

    def project_onto_manifold(self, x) -> np.ndarray:
        """Minimal ``J``-weighted correction of edge flows onto ``B_KE q = 0``."""
        x = np.array(x, dtype=float)
        if self.B_KE.shape[0]:
            x[self.q_index] -= self.proj @ (self.B_KE @ x[self.q_index])
        return x

    # -- misc ----------------------------------------------------------------------------

    def rest_state(self) -> np.ndarray:
        """Zero flows and integrators; nodes at the holding pressure."""
        x = np.zeros(self.layout.size)
        hold = [self.p_base[self.n_edges + j] for j, lp in enumerate(self.loops[self.n_edges:])
                if lp.mode is Mode.HOLDING]
        level = hold[0] if hold else 0.0
        for lp in self.loops[self.n_edges:]:
            sl = self.layout.slices[lp.key]
            if lp.mode is Mode.HOLDING:
                x[sl.start + 1] = level
            else:
                x[sl.start] = level
        return x

    def subsystem(self, key: str) -> ClosedLoop:
        return self.loops[self.index[key]]

    def loop_at(self, i: int, t: float | None = None) -> ClosedLoop:
        """Subsystem ``i`` with the setpoints active at ``t`` (default: the reference time)."""
        return self.loops[i].with_setpoints(*self.setpoints_at(i, self.tref if t is None else t))

    def stiffness(self, x, t: float | None = None) -> float:
        """Spectral radius of the Jacobian at ``x``."""
        return float(np.max(np.abs(np.linalg.eigvals(self.jacobian(x, t)))))

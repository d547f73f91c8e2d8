"""Decentralized pump/valve controllers and the closed-loop subsystem forms.

States are kept in physical units.  For a pressure-controlled pump the
integrator ``r`` is a volume flow and ``chi = q_P + r`` is derived on demand.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np
from scipy.optimize import brentq

from .components import PipeHydraulics, PumpParams, ValveParams


class GainConditionError(ValueError):
    pass


@dataclass(frozen=True)
class PumpPressureCtl:
    setpoint: float
    Q_I: float
    R_p: float | None = None  # defaults to the pump resistance

    def __post_init__(self) -> None:
        if not self.Q_I > 0:
            raise ValueError("pressure controller needs Q_I > 0")
        if self.R_p is not None and not self.R_p > 0:
            raise ValueError("pressure controller needs R^p > 0")

    def gain(self, pump: PumpParams) -> float:
        return pump.R_P if self.R_p is None else self.R_p


@dataclass(frozen=True)
class PumpFlowCtl:
    """PI flow control through a pump; ``C_P`` is the pump it is designed for."""

    setpoint: float
    K_P: float
    Q_I: float
    C_P: float

    def __post_init__(self) -> None:
        if not self.Q_I > 0:
            raise GainConditionError("flow controller needs Q_I > 0")
        k = self.kappa()
        if not k > 0:
            raise GainConditionError(f"gain condition Q_I (K_P + 1) - C_P > 0 violated: {k:.3e}")

    def kappa(self, C_P: float | None = None) -> float:
        return self.Q_I * (self.K_P + 1.0) - (self.C_P if C_P is None else C_P)


@dataclass(frozen=True)
class ValveFlowCtl:
    setpoint: float
    K_P: float
    Q_I: float

    def __post_init__(self) -> None:
        if not (self.K_P > 0 and self.Q_I > 0):
            raise ValueError("valve controller needs K_P > 0 and Q_I > 0")


def pump_pressure_control(ctl: PumpPressureCtl, pump: PumpParams, q_P, p_P, r, setpoint=None):
    p_set = ctl.setpoint if setpoint is None else setpoint
    Rp = ctl.gain(pump)
    u_P = (pump.R_P - Rp) * q_P - Rp * r + pump.J_P / ctl.Q_I * (p_set - p_P)
    return u_P, (p_P - p_set) / ctl.Q_I


def pump_flow_control(ctl: PumpFlowCtl, q, p_P, r, setpoint=None):
    q_set = ctl.setpoint if setpoint is None else setpoint
    return -ctl.K_P * p_P - r, (q - q_set) / ctl.Q_I


def valve_output(valve: ValveParams, q, q_set):
    return -valve.mu_hat(q) * (q - q_set)


def valve_flow_control(
    ctl: ValveFlowCtl,
    valve: ValveParams,
    q,
    r,
    setpoint=None,
    saturate: bool = False,
    antiwindup: bool = True,
):
    """Return ``(u_v, r_dot)``; with ``saturate`` the command is clamped to ``[1, u_max]``."""
    q_set = ctl.setpoint if setpoint is None else setpoint
    y = valve_output(valve, q, q_set)
    raw = -ctl.K_P * y + r
    r_dot = -y / ctl.Q_I
    if not saturate:
        return raw, r_dot
    u_max = valve.u_max
    if raw > u_max:
        if antiwindup and r_dot > 0:
            r_dot = 0.0
        return u_max, r_dot
    if raw < 1.0:
        if antiwindup and r_dot < 0:
            r_dot = 0.0
        return 1.0, r_dot
    return raw, r_dot


class Mode(str, Enum):
    D_FORM = "D_form"
    D_VALVE = "D_valve"
    D_VSP = "D_vsp"
    L_BOOST = "L_boost"
    L_VALVE = "L_valve"
    L_VSP = "L_vsp"
    P_PLAIN = "P_plain"
    P_BOOST = "P_boost"
    MIXING = "M"
    HOLDING = "H"
    CAPACITIVE = "C"


STATE_NAMES = {
    Mode.D_FORM: ("q", "q_P", "p_P", "r"),
    Mode.P_BOOST: ("q", "q_P", "p_P", "r"),
    Mode.D_VALVE: ("q", "q_P", "p_P", "r", "r_v"),
    Mode.L_BOOST: ("q", "q_P", "p_P", "r", "r_v"),
    Mode.D_VSP: ("q", "q_P", "p_P", "r"),
    Mode.L_VSP: ("q", "q_P", "p_P", "r"),
    Mode.L_VALVE: ("q", "r_v"),
    Mode.MIXING: ("q", "r_v"),
    Mode.P_PLAIN: ("q",),
    Mode.HOLDING: ("q_P", "p_P", "r"),
    Mode.CAPACITIVE: ("p",),
}

PRESSURE_MODES = {Mode.D_FORM, Mode.P_BOOST, Mode.D_VALVE, Mode.L_BOOST, Mode.HOLDING}
FLOW_PUMP_MODES = {Mode.D_VSP, Mode.L_VSP}
VALVE_MODES = {Mode.D_VALVE, Mode.L_BOOST, Mode.L_VALVE, Mode.MIXING}
EDGE_MODES = set(Mode) - {Mode.HOLDING, Mode.CAPACITIVE}


def mode_of(kind: str, mode: str) -> Mode:
    table = {
        ("dgu", "form"): Mode.D_FORM,
        ("dgu", "valve"): Mode.D_VALVE,
        ("dgu", "vsp"): Mode.D_VSP,
        ("consumer", "boost"): Mode.L_BOOST,
        ("consumer", "valve"): Mode.L_VALVE,
        ("consumer", "vsp"): Mode.L_VSP,
        ("pipe", "plain"): Mode.P_PLAIN,
        ("pipe", "boost"): Mode.P_BOOST,
        ("mixing", "valve"): Mode.MIXING,
        ("holding", ""): Mode.HOLDING,
        ("capacitive", ""): Mode.CAPACITIVE,
    }
    try:
        return table[(kind, mode)]
    except KeyError:
        raise ValueError(f"unknown mode {mode!r} for {kind!r}") from None


@dataclass
class ClosedLoop:
    """One actuated or unactuated subsystem together with its local controllers.

    ``p_set`` and ``q_set`` arguments override the controller setpoints so the
    engine can drive ramps without rebuilding the subsystem.
    """

    key: str
    mode: Mode
    pipe: PipeHydraulics | None = None
    pump: PumpParams | None = None
    valve: ValveParams | None = None
    pressure_ctl: PumpPressureCtl | None = None
    flow_ctl: PumpFlowCtl | None = None
    valve_ctl: ValveFlowCtl | None = None
    capacitance: float | None = None

    def __post_init__(self) -> None:
        self.mode = Mode(self.mode)

    @property
    def names(self) -> tuple[str, ...]:
        return STATE_NAMES[self.mode]

    @property
    def size(self) -> int:
        return len(self.names)

    @property
    def is_edge(self) -> bool:
        return self.mode in EDGE_MODES

    @property
    def u_v_fixed(self) -> float:
        # fully open valve in series, or no valve at all
        if self.mode in (Mode.D_FORM, Mode.D_VSP, Mode.L_VSP):
            return 1.0
        return 0.0

    def setpoints(self) -> tuple[float, float]:
        p = self.pressure_ctl.setpoint if self.pressure_ctl else math.nan
        if self.flow_ctl:
            q = self.flow_ctl.setpoint
        elif self.valve_ctl:
            q = self.valve_ctl.setpoint
        else:
            q = math.nan
        return p, q

    def with_setpoints(self, p_set: float | None, q_set: float | None) -> ClosedLoop:
        """Copy whose controllers carry the given setpoints (None keeps the current one)."""
        kw = {}
        if p_set is not None and self.pressure_ctl is not None:
            kw["pressure_ctl"] = replace(self.pressure_ctl, setpoint=p_set)
        if q_set is not None and self.flow_ctl is not None:
            kw["flow_ctl"] = replace(self.flow_ctl, setpoint=q_set)
        if q_set is not None and self.valve_ctl is not None:
            kw["valve_ctl"] = replace(self.valve_ctl, setpoint=q_set)
        return replace(self, **kw) if kw else self

    def output(self, x) -> float:
        if self.mode is Mode.HOLDING:
            return x[1]
        return x[0]

    def mu_hat(self, q):
        return self.valve.mu_hat(q) if self.valve is not None else 0.0 * q

    def valve_command(self, x, q_set=None, saturate=False, antiwindup=True):
        if self.mode in VALVE_MODES:
            return valve_flow_control(self.valve_ctl, self.valve, x[0], x[-1], q_set, saturate, antiwindup)
        return self.u_v_fixed, 0.0

    def flow_force(self, x, q_set=None, saturate=False, antiwindup=True) -> float:
        """``J dq/dt`` with the port input removed (edges only)."""
        q = x[0]
        u_v, _ = self.valve_command(x, q_set, saturate, antiwindup)
        force = -self.pipe.friction(q) - self.mu_hat(q) * u_v
        if self.pump is not None and self.mode is not Mode.L_VALVE:
            force += x[2]
        return force

    def rhs(self, x, d, p_set=None, q_set=None, saturate=False, antiwindup=True) -> np.ndarray:
        """Time derivative of the physical state for port input ``d``."""
        m = self.mode
        p0, q0 = self.setpoints()
        p_set = p0 if p_set is None else p_set
        q_set = q0 if q_set is None else q_set
        out = np.zeros(self.size)
        if m is Mode.CAPACITIVE:
            out[0] = d / self.capacitance
            return out
        pump = self.pump
        if m is Mode.HOLDING:
            q_P, p_P, r = x
            u_P, r_dot = pump_pressure_control(self.pressure_ctl, pump, q_P, p_P, r, p_set)
            out[0] = (-p_P - pump.R_P * q_P + u_P) / pump.J_P
            out[1] = (q_P + d) / pump.C_P
            out[2] = r_dot
            return out
        q = x[0]
        out[0] = (self.flow_force(x, q_set, saturate, antiwindup) + d) / self.pipe.J
        if m in VALVE_MODES:
            _, out[-1] = self.valve_command(x, q_set, saturate, antiwindup)
        if pump is None or m is Mode.L_VALVE:
            return out
        q_P, p_P, r = x[1], x[2], x[3]
        if m in PRESSURE_MODES:
            u_P, r_dot = pump_pressure_control(self.pressure_ctl, pump, q_P, p_P, r, p_set)
        else:
            u_P, r_dot = pump_flow_control(self.flow_ctl, q, p_P, r, q_set)
        out[1] = (-p_P - pump.R_P * q_P + u_P) / pump.J_P
        out[2] = (q_P - q) / pump.C_P
        out[3] = r_dot
        return out

    # -- steady state ----------------------------------------------------------

    def equilibrium(self, d_bar: float, p_set=None, q_set=None, z_bar=None) -> np.ndarray:
        """Equilibrium state of the isolated closed loop under constant ``d_bar``.

        Capacitive nodes are in equilibrium at any pressure, so ``z_bar`` picks
        it.  Modes without flow regulation solve their loop balance for ``q``.
        """
        m = self.mode
        p0, q0 = self.setpoints()
        p_set = p0 if p_set is None else p_set
        q_set = q0 if q_set is None else q_set
        if m is Mode.CAPACITIVE:
            return np.array([z_bar])
        if m is Mode.HOLDING:
            q_P = -d_bar
            return np.array([q_P, p_set, -p_set / self.pressure_ctl.gain(self.pump) - q_P])
        pipe, uv = self.pipe, self.u_v_fixed
        if m in (Mode.D_FORM, Mode.P_BOOST, Mode.P_PLAIN):
            head = (p_set if m is not Mode.P_PLAIN else 0.0) + d_bar
            q = solve_monotone(lambda s: pipe.friction(s) + uv * self.mu_hat(s), head)
        else:
            q = q_set
        if m is Mode.P_PLAIN:
            return np.array([q])
        if m in (Mode.L_VALVE, Mode.MIXING):
            return np.array([q, (d_bar - pipe.friction(q)) / self.mu_hat(q)])
        if m in FLOW_PUMP_MODES:
            p_P = pipe.friction(q) + uv * self.mu_hat(q) - d_bar
            r = -(1.0 + self.flow_ctl.K_P) * p_P - self.pump.R_P * q
            return np.array([q, q, p_P, r])
        r = -p_set / self.pressure_ctl.gain(self.pump) - q
        if m in (Mode.D_FORM, Mode.P_BOOST):
            return np.array([q, q, p_set, r])
        u_v = (p_set - pipe.friction(q) + d_bar) / self.mu_hat(q)
        return np.array([q, q, p_set, r, u_v])


def solve_monotone(g, target: float) -> float:
    """Solve ``g(q) = target`` for strictly increasing odd ``g``."""
    hi = 1e-3
    while g(hi) < abs(target):
        hi *= 2.0
        if hi > 1e3:
            raise ArithmeticError("no bracket for monotone solve")
    if target == 0:
        return 0.0
    root = brentq(lambda s: g(s) - abs(target), 0.0, hi, xtol=1e-18, rtol=1e-15, maxiter=200)
    return math.copysign(root, target)

"""Constitutive laws and open-loop models of the hydraulic subsystems.

Every ``*_rhs`` function returns the time derivative of the energy
coordinates of its subsystem, i.e. of ``(J q, J_P q_P, C_P p_P)`` for edges
and ``(J_P q_P, C_P p_P)`` or ``C p`` for nodes.  Inputs ``d`` are the port
variables imposed by the network: a pressure difference for edges and the net
inflow for nodes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np
from scipy.optimize import lsq_linear

# water at 55 degC
RHO = 983.0
NU = 4.7e-7
MU = RHO * NU

FIT_RANGE = (1e-5, 0.03)
FIT_POINTS = 400

# ratios used to split a black-box pump resistance into R, J, C
PUMP_R_OVER_J = 7.2878
PUMP_INV_JC = 341.4283


@dataclass(frozen=True)
class PumpParams:
    """Linear RLC pump model parameters (Pa s/m^3, Pa s^2/m^3, m^3/Pa)."""

    R_P: float
    J_P: float
    C_P: float

    def __post_init__(self) -> None:
        for name in ("R_P", "J_P", "C_P"):
            value = getattr(self, name)
            if not (value > 0 and math.isfinite(value)):
                raise ValueError(f"pump parameter {name} must be positive, got {value}")

    @classmethod
    def from_resistance(cls, R_P: float) -> PumpParams:
        J_P = R_P / PUMP_R_OVER_J
        return cls(R_P=R_P, J_P=J_P, C_P=1.0 / (PUMP_INV_JC * J_P))

    def scaled(self, r: float = 1.0, j: float = 1.0, c: float = 1.0) -> PumpParams:
        return PumpParams(self.R_P * r, self.J_P * j, self.C_P * c)


class Characteristic(str, Enum):
    LINEAR = "linear"
    EQUAL_PERCENTAGE = "equal_percentage"


@dataclass(frozen=True)
class ValveParams:
    """Control valve with capacity ``C_v`` and an inherent characteristic.

    The stem position ``s`` maps to the virtual input ``u_v = 1/f(s)^2`` so
    that the pressure drop reads ``u_v * mu_hat(q)``.
    """

    C_v: float
    characteristic: Characteristic = Characteristic.LINEAR
    rangeability: float = 50.0
    s_min: float = 0.05

    def __post_init__(self) -> None:
        if not self.C_v > 0:
            raise ValueError("valve capacity C_v must be positive")
        if not 0 < self.s_min <= 1:
            raise ValueError("s_min must lie in (0, 1]")
        if self.characteristic is Characteristic.EQUAL_PERCENTAGE and not self.rangeability > 1:
            raise ValueError("rangeability must exceed 1")
        object.__setattr__(self, "characteristic", Characteristic(self.characteristic))

    def f(self, s: float) -> float:
        if self.characteristic is Characteristic.LINEAR:
            return s
        return self.rangeability ** (s - 1.0)

    def u_of_stem(self, s: float) -> float:
        if not self.s_min <= s <= 1.0:
            raise ValueError(f"stem out of range: {s} not in [{self.s_min}, 1]")
        return 1.0 / self.f(s) ** 2

    @property
    def u_max(self) -> float:
        if self.characteristic is Characteristic.LINEAR:
            return 1.0 / self.s_min**2
        return self.rangeability ** (2.0 * (1.0 - self.s_min))

    def stem_of_u(self, u_v: float) -> float:
        # small slack so that round trips through u_of_stem do not trip the check
        if not 1.0 - 1e-12 <= u_v <= self.u_max * (1 + 1e-12):
            raise ValueError(f"valve input {u_v} outside [1, {self.u_max}]")
        u_v = min(max(u_v, 1.0), self.u_max)
        if self.characteristic is Characteristic.LINEAR:
            return 1.0 / math.sqrt(u_v)
        return 1.0 - math.log(math.sqrt(u_v)) / math.log(self.rangeability)

    def mu_hat(self, q):
        return np.abs(q) * q / self.C_v**2

    def mu_hat_slope(self, q):
        return 2.0 * np.abs(q) / self.C_v**2

    def drop(self, s: float, q):
        return self.u_of_stem(s) * self.mu_hat(q)

    def scaled(self, c: float) -> ValveParams:
        return replace(self, C_v=self.C_v * c)


def valve_drop(v: ValveParams, s: float, q):
    return v.drop(s, q)


def stem_from_input(v: ValveParams, u_v: float) -> float:
    return v.stem_of_u(u_v)


@dataclass(frozen=True)
class PipeHydraulics:
    """Lumped pipe: inertance ``J`` and friction ``a|q|q + b q``."""

    J: float
    a: float
    b: float

    def __post_init__(self) -> None:
        if not self.J > 0:
            raise ValueError("pipe inertance J must be positive")
        if self.a < 0 or not self.b > 0:
            raise ValueError("friction needs a >= 0 and b > 0")

    @classmethod
    def from_geometry(cls, length: float, diameter: float, roughness: float = 4.5e-5) -> PipeHydraulics:
        a, b = fit_friction(diameter, length, roughness)
        return cls(J=inertance(length, diameter), a=a, b=b)

    def friction(self, q):
        return self.a * np.abs(q) * q + self.b * q

    def friction_slope(self, q):
        return 2.0 * self.a * np.abs(q) + self.b


def friction(pipe: PipeHydraulics, q):
    return pipe.friction(q)


def inertance(length: float, diameter: float) -> float:
    return RHO * length / (math.pi * diameter**2 / 4.0)


def swamee_jain(reynolds, rel_roughness):
    return 0.25 / np.log10(rel_roughness / 3.7 + 5.74 / reynolds**0.9) ** 2


def darcy_factor(reynolds, rel_roughness):
    """Laminar below Re 2000, Swamee-Jain above 4000, linear blend between."""
    reynolds = np.asarray(reynolds, dtype=float)
    lam = 64.0 / reynolds
    turb = swamee_jain(np.maximum(reynolds, 4000.0), rel_roughness)
    w = np.clip((reynolds - 2000.0) / 2000.0, 0.0, 1.0)
    return np.where(reynolds < 2000.0, lam, (1 - w) * 64.0 / np.maximum(reynolds, 2000.0) + w * turb)


def darcy_weisbach_drop(q, diameter: float, length: float, roughness: float):
    area = math.pi * diameter**2 / 4.0
    v = np.asarray(q, dtype=float) / area
    re = np.abs(v) * diameter / NU
    return darcy_factor(re, roughness / diameter) * length / diameter * RHO * v * np.abs(v) / 2.0


def hagen_poiseuille(diameter: float, length: float) -> float:
    return 128.0 * MU * length / (math.pi * diameter**4)


def fit_friction(diameter: float, length: float, roughness: float = 4.5e-5) -> tuple[float, float]:
    """Fit ``a|q|q + b q`` to Darcy-Weisbach over the standard flow range.

    The fit minimises the relative error on a log-spaced grid; ``b`` is
    bounded below by the laminar Hagen-Poiseuille coefficient.
    """
    if not (diameter > 0 and length > 0 and roughness >= 0):
        raise ValueError("pipe geometry must be positive")
    q = np.geomspace(*FIT_RANGE, FIT_POINTS)
    dp = darcy_weisbach_drop(q, diameter, length, roughness)
    A = np.column_stack([q * q, q]) / dp[:, None]
    # scale columns so the bounded solver sees O(1) unknowns
    col = np.abs(A).max(axis=0)
    b_min = hagen_poiseuille(diameter, length)
    res = lsq_linear(A / col, np.ones_like(q), bounds=([0.0, b_min * col[1]], [np.inf, np.inf]))
    a, b = res.x / col
    return float(a), float(b)


# -- open-loop models ---------------------------------------------------------


def pump_rhs(p: PumpParams, q_P: float, p_P: float, u_P: float, d: float) -> tuple[float, float]:
    return (-p_P - p.R_P * q_P + u_P, q_P + d)


def dgu_consumer_rhs(
    pipe: PipeHydraulics,
    valve: ValveParams,
    pump: PumpParams | None,
    state,
    u_v: float,
    u_P: float,
    d: float,
) -> np.ndarray:
    if pump is None:
        (q,) = state
        return np.array([-pipe.friction(q) - valve.mu_hat(q) * u_v + d])
    q, q_P, p_P = state
    dq = p_P - pipe.friction(q) - valve.mu_hat(q) * u_v + d
    dqp, dpp = pump_rhs(pump, q_P, p_P, u_P, -q)
    return np.array([dq, dqp, dpp])


def pipe_rhs(pipe: PipeHydraulics, pump: PumpParams | None, state, u_P: float, d: float) -> np.ndarray:
    if pump is None:
        (q,) = state
        return np.array([-pipe.friction(q) + d])
    q, q_P, p_P = state
    dqp, dpp = pump_rhs(pump, q_P, p_P, u_P, -q)
    return np.array([p_P - pipe.friction(q) + d, dqp, dpp])


def mixing_rhs(pipe: PipeHydraulics, valve: ValveParams, q: float, u_v: float, d: float) -> float:
    return -pipe.friction(q) - valve.mu_hat(q) * u_v + d


def holding_rhs(pump: PumpParams, q_P: float, p_P: float, u_P: float, d: float) -> tuple[float, float]:
    return pump_rhs(pump, q_P, p_P, u_P, d)


def capacitive_rhs(d: float) -> float:
    return d

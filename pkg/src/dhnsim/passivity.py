"""Shifted storage, dissipation and supply of the closed-loop subsystems,
equilibrium computation and the numerical EIP certificate.

All storages are quadratic in the physical state deviation,
``H = 1/2 (x - x_bar)^T W (x - x_bar)``, with a constant metric ``W`` per mode.
The shifted supply is ``(z - z_bar)(d - d_bar)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import root

from . import kernel as K
from .controllers import FLOW_PUMP_MODES, VALVE_MODES, ClosedLoop, Mode

# -- storage metrics ------------------------------------------------------------


def _pressure_pump_block(lp: ClosedLoop) -> np.ndarray:
    JP, QI = lp.pump.J_P, lp.pressure_ctl.Q_I
    return np.array([[JP, JP], [JP, JP + QI]])


def storage_metric(lp: ClosedLoop) -> np.ndarray:
    m = lp.mode
    n = lp.size
    W = np.zeros((n, n))
    if m is Mode.CAPACITIVE:
        W[0, 0] = lp.capacitance
        return W
    if m is Mode.HOLDING:
        blk = _pressure_pump_block(lp)
        W[np.ix_([0, 2], [0, 2])] = blk
        W[1, 1] = lp.pump.C_P
        return W
    W[0, 0] = lp.pipe.J
    if m in FLOW_PUMP_MODES:
        JP, CP, QI = lp.pump.J_P, lp.pump.C_P, lp.flow_ctl.Q_I
        kap = lp.flow_ctl.kappa(CP)
        W[1, 1] = JP * QI / kap
        W[2, 2] = CP + CP**2 / kap
        W[2, 3] = W[3, 2] = CP * QI / kap
        W[3, 3] = QI**2 / kap
        return W
    if m in (Mode.D_FORM, Mode.P_BOOST, Mode.D_VALVE, Mode.L_BOOST):
        W[np.ix_([1, 3], [1, 3])] = _pressure_pump_block(lp)
        W[2, 2] = lp.pump.C_P
    if m in VALVE_MODES:
        W[-1, -1] = lp.valve_ctl.Q_I
    return W


def storage_value(lp: ClosedLoop, x, x_bar) -> float:
    dx = np.asarray(x, dtype=float) - np.asarray(x_bar, dtype=float)
    return 0.5 * float(dx @ storage_metric(lp) @ dx)


def storage_rate(lp: ClosedLoop, x, x_bar, xdot) -> float:
    dx = np.asarray(x, dtype=float) - np.asarray(x_bar, dtype=float)
    return float(dx @ storage_metric(lp) @ np.asarray(xdot, dtype=float))


def port_output(lp: ClosedLoop, x) -> float:
    return float(lp.output(x))


def supply(z, z_bar, d, d_bar):
    return (z - z_bar) * (d - d_bar)


def dissipation(lp: ClosedLoop, x, x_bar, q_set: float | None = None) -> float:
    """Closed-form dissipation of the unsaturated closed loop."""
    m = lp.mode
    x = np.asarray(x, dtype=float)
    xb = np.asarray(x_bar, dtype=float)
    if m is Mode.CAPACITIVE:
        return 0.0
    if m is Mode.HOLDING:
        dchi = (x[0] + x[2]) - (xb[0] + xb[2])
        return lp.pressure_ctl.gain(lp.pump) * dchi**2
    q, qb = x[0], xb[0]
    dq = q - qb
    psi = dq * (lp.pipe.friction(q) - lp.pipe.friction(qb))
    if lp.valve is not None:
        dmu = lp.mu_hat(q) - lp.mu_hat(qb)
        if m in VALVE_MODES:
            q_set = lp.setpoints()[1] if q_set is None else q_set
            y = -lp.mu_hat(q) * (q - q_set)
            psi += xb[-1] * dq * dmu + lp.valve_ctl.K_P * y**2
        else:
            psi += lp.u_v_fixed * dq * dmu
    if m in (Mode.D_FORM, Mode.P_BOOST, Mode.D_VALVE, Mode.L_BOOST):
        dchi = (x[1] + x[3]) - (xb[1] + xb[3])
        psi += lp.pressure_ctl.gain(lp.pump) * dchi**2
    elif m in FLOW_PUMP_MODES:
        kap = lp.flow_ctl.kappa(lp.pump.C_P)
        psi += lp.pump.R_P * lp.flow_ctl.Q_I / kap * (x[1] - xb[1]) ** 2
    return psi if np.ndim(psi) else float(psi)


# -- equilibrium -------------------------------------------------------------------


class InfeasibleSetpoints(ValueError):
    pass


@dataclass
class Equilibrium:
    x: np.ndarray
    z: np.ndarray
    d: np.ndarray
    z_K: np.ndarray
    u_v: dict[str, float]
    residual: float
    manifold_residual: float
    t: float = 0.0
    keys: list[str] = field(default_factory=list)


def _edge_head(lp: ClosedLoop, p_set) -> float:
    if lp.mode in (Mode.D_FORM, Mode.P_BOOST):
        return p_set
    return 0.0


def _hydraulic_guess(asm, t: float, level: float | None, p0: np.ndarray | None):
    """Node pressures from KCL with regulated flows fixed at their setpoints."""
    nE, part = asm.n_edges, asm.partition
    rows = part.delta_nodes + part.junctions
    row = {nid: k for k, nid in enumerate(rows)}
    n_all = len(rows)
    fixed = np.full(n_all, np.nan)
    caps = []
    for j, lp in enumerate(asm.loops[nE:]):
        if lp.mode is Mode.HOLDING:
            fixed[j] = asm.setpoints_at(nE + j, t)[0]
        else:
            caps.append(j)
    free = np.flatnonzero(np.isnan(fixed))
    if free.size == 0:
        return fixed
    src = np.array([row[e.source] for e in asm.edges])
    tgt = np.array([row[e.target] for e in asm.edges])
    regulated = np.array([lp.mode in VALVE_MODES or lp.mode in FLOW_PUMP_MODES for lp in asm.loops[:nE]])
    q_reg = np.array([asm.setpoints_at(i, t)[1] if regulated[i] else 0.0 for i in range(nE)])
    head = np.array([0.0 if regulated[i] else _edge_head(lp, asm.setpoints_at(i, t)[0] or 0.0)
                     for i, lp in enumerate(asm.loops[:nE])])
    a_eff = np.array([lp.pipe.a + (lp.u_v_fixed / lp.valve.C_v**2 if lp.valve is not None else 0.0)
                      for lp in asm.loops[:nE]])
    b = np.array([lp.pipe.b for lp in asm.loops[:nE]])
    holding = bool(np.any(~np.isnan(fixed)))
    C = np.array([asm.loops[nE + j].capacitance if j in caps else 0.0 for j in range(n_all)])
    P_SCALE, Q_SCALE = 1e5, 1e-3

    def flows(P):
        h = head + P[src] - P[tgt]
        q = np.array([K.inv_friction(a_eff[i], b[i], h[i]) for i in range(nE)])
        return np.where(regulated, q_reg, q)

    def resid(y):
        P = fixed.copy()
        P[free] = y * P_SCALE
        q = flows(P)
        inflow = np.zeros(n_all)
        np.add.at(inflow, tgt, q)
        np.add.at(inflow, src, -q)
        r = inflow[free] / Q_SCALE
        if not holding:
            r[0] = (C @ P - level) / (C.sum() * P_SCALE)
        return r

    if p0 is None:
        base = np.nanmean(fixed) if holding else level / C.sum()
        y0 = np.full(free.size, base / P_SCALE)
    else:
        y0 = p0[free] / P_SCALE
    best = None
    for method in ("hybr", "lm"):
        sol = root(resid, y0, method=method, options={"xtol": 1e-14} if method == "hybr" else {"xtol": 1e-15, "ftol": 1e-15})
        err = np.max(np.abs(resid(sol.x)))
        if best is None or err < best[1]:
            best = (sol.x, err)
        if err < 1e-9:
            break
    if best[1] > 1e-6:
        raise InfeasibleSetpoints(f"hydraulic balance did not converge (residual {best[1]:.2e})")
    P = fixed.copy()
    P[free] = best[0] * P_SCALE
    return P


def solve_equilibrium(asm, t: float | None = None, x0=None, level: float | None = None, tol: float = 1e-12,
                      max_iter: int = 30, check: bool = True) -> Equilibrium:
    """Steady state of the assembled network for the setpoints active at ``t``.

    A hydraulic balance with regulated flows at their setpoints gives the node
    pressures; every subsystem's own equilibrium follows from its port value
    and a damped Gauss-Newton pass on the full vector field polishes the result.
    Raises :class:`InfeasibleSetpoints` if no admissible steady state exists.
    """
    t = asm.tref if t is None else t
    nE = asm.n_edges
    no_hold = all(lp.mode is not Mode.HOLDING for lp in asm.loops[nE:])
    if no_hold and level is None:
        if x0 is None:
            raise InfeasibleSetpoints("a network without holding node needs a reference state for its pressure level")
        level = _capacity_level(asm, x0)
    sat = asm.saturation
    asm.saturation = False  # a feasible equilibrium lies inside the valve range
    try:
        x = _assemble_equilibrium(asm, t, level, tol, max_iter)
    finally:
        asm.saturation = sat
    eq = _package(asm, x, t)
    if check:
        _check_feasible(asm, eq)
    return eq


def _assemble_equilibrium(asm, t, level, tol, max_iter):
    nE = asm.n_edges
    P = _hydraulic_guess(asm, t, level, None)
    part = asm.partition
    row = {nid: k for k, nid in enumerate(part.delta_nodes + part.junctions)}
    x = np.zeros(asm.layout.size)
    q_all = np.zeros(nE)
    for i, (e, lp) in enumerate(zip(asm.edges, asm.loops[:nE])):
        ps, qs = asm.setpoints_at(i, t)
        xs = lp.equilibrium(P[row[e.source]] - P[row[e.target]], ps, qs)
        x[asm.layout.slices[lp.key]] = xs
        q_all[i] = xs[0]
    inflow = asm.B_DE @ q_all
    for j, lp in enumerate(asm.loops[nE:]):
        ps, _ = asm.setpoints_at(nE + j, t)
        x[asm.layout.slices[lp.key]] = lp.equilibrium(inflow[j], ps, None, z_bar=P[j])
    return _polish(asm, x, t, level, tol, max_iter)


def _capacity_level(asm, x) -> float:
    nE = asm.n_edges
    tot = 0.0
    for lp in asm.loops[nE:]:
        if lp.mode is Mode.CAPACITIVE:
            tot += lp.capacitance * x[asm.layout.slices[lp.key].start]
    return tot


def _polish(asm, x, t, level, tol, max_iter):
    scale = asm.state_scale(x)
    qi = asm.q_index
    cap_idx = [(asm.layout.slices[lp.key].start, lp.capacitance) for lp in asm.loops[asm.n_edges:]
               if lp.mode is Mode.CAPACITIVE]

    def resid(xx):
        f = asm.fast_field(xx, t) / scale
        parts = [f, asm.B_KE @ xx[qi] / 1e-3]
        if level is not None:
            c = sum(cap * xx[i] for i, cap in cap_idx)
            parts.append(np.array([(c - level) / (sum(cap for _, cap in cap_idx) * 1e5)]))
        return np.concatenate(parts)

    r = resid(x)
    err = np.max(np.abs(r))
    for _ in range(max_iter):
        if err < tol:
            break
        n = x.size
        Jm = np.empty((r.size, n))
        for k in range(n):
            h = 1e-6 * scale[k]
            xp, xm = x.copy(), x.copy()
            xp[k] += h
            xm[k] -= h
            Jm[:, k] = (resid(xp) - resid(xm)) / (2 * h)
        step = np.linalg.lstsq(Jm, -r, rcond=None)[0]
        lam = 1.0
        while lam > 1e-4:
            xn = x + lam * step
            rn = resid(xn)
            en = np.max(np.abs(rn))
            if en < err:
                break
            lam *= 0.5
        if en >= err:
            break
        x, r, err = xn, rn, en
    return x


def _package(asm, x, t) -> Equilibrium:
    pt = asm.ports(x, t)
    u_v = {}
    for i, lp in enumerate(asm.loops[: asm.n_edges]):
        if lp.mode in VALVE_MODES:
            u_v[lp.key] = float(x[asm.layout.slices[lp.key]][-1])
    f = asm.fast_field(x, t) / asm.state_scale(x)
    return Equilibrium(x=x, z=pt.z, d=pt.d, z_K=pt.z_K, u_v=u_v, residual=float(np.max(np.abs(f))),
                       manifold_residual=asm.manifold_residual(x), t=t, keys=list(asm.layout.keys))


def _check_feasible(asm, eq: Equilibrium) -> None:
    bad = []
    for key, u in eq.u_v.items():
        lp = asm.subsystem(key)
        if not (1.0 <= u <= lp.valve.u_max):
            bad.append(f"{key}: valve input {u:.4g} outside [1, {lp.valve.u_max:.4g}]")
    if eq.residual > 1e-6:
        bad.append(f"steady-state residual {eq.residual:.2e}")
    if bad:
        raise InfeasibleSetpoints("; ".join(bad))


# -- interconnection ------------------------------------------------------------------------


def power_balance(asm, x, t: float | None = None) -> tuple[float, float]:
    """``(sum z d + z_K d_K, sum |z d|)``; the first term vanishes for a lossless interconnection."""
    pt = asm.ports(x, t)
    terms = np.concatenate([pt.z * pt.d, pt.z_K * pt.d_K])
    return float(terms.sum()), float(np.abs(terms).sum())


# -- per-segment metrics used by the engine ---------------------------------------------------


def segment_metrics(asm):
    """Flattened storage metrics and subsystem offsets for the kernel."""
    Ws = [storage_metric(lp) for lp in asm.loops]
    woff = np.cumsum([0] + [W.size for W in Ws[:-1]]).astype(np.int64)
    flat = np.concatenate([W.ravel() for W in Ws])
    soff = np.array([asm.layout.slices[lp.key].start for lp in asm.loops], dtype=np.int64)
    sns = np.array([lp.size for lp in asm.loops], dtype=np.int64)
    return Ws, flat, woff, soff, sns


@dataclass
class CertificateRow:
    key: str
    t0: float
    t1: float
    dH: float
    dS: float
    margin: float  # dS + eps - dH, non-negative when the inequality holds
    eps: float


@dataclass
class Certificate:
    rows: list[CertificateRow]

    @property
    def ok(self) -> bool:
        return all(r.margin >= 0 for r in self.rows)

    @property
    def worst(self) -> CertificateRow | None:
        return min(self.rows, key=lambda r: r.margin) if self.rows else None

    def violations(self) -> list[CertificateRow]:
        return [r for r in self.rows if r.margin < 0]


def eip_certificate(record, eps_rel: float = 1e-9) -> Certificate:
    """Check ``H(t1) - H(t0) <= int (z - z_bar)(d - d_bar) dt`` on every sample interval.

    The supply integral is the quadrature state advanced by the integrator
    alongside the trajectory.  ``eps = eps_rel * max(1, H)``.
    """
    rows = []
    for seg in record.segments:
        H, S = seg.H, seg.S
        for s, key in enumerate(seg.keys):
            dH = np.diff(H[:, s])
            dS = np.diff(S[:, s])
            eps = eps_rel * np.maximum(1.0, np.maximum(np.abs(H[1:, s]), np.abs(H[:-1, s])))
            margin = dS + eps - dH
            k = int(np.argmin(margin)) if margin.size else None
            if k is None:
                continue
            rows.append(CertificateRow(key, float(seg.t[k]), float(seg.t[k + 1]), float(dH[k]), float(dS[k]),
                                       float(margin[k]), float(eps[k])))
    return Certificate(rows)


def lyapunov_audit(record, eps_rel: float = 1e-9) -> list[tuple[float, float, float]]:
    """Intervals where the total storage increases on constant-setpoint segments.

    Returns ``(t0, t1, increase)`` for each violation beyond ``eps_rel * max(1, V)``.
    """
    bad = []
    for seg in record.segments:
        if seg.ramping or seg.t.size < 2:
            continue
        V = seg.H.sum(axis=1)
        dV = np.diff(V)
        eps = eps_rel * np.maximum(1.0, V[:-1])
        for k in np.flatnonzero(dV > eps):
            bad.append((float(seg.t[k]), float(seg.t[k + 1]), float(dV[k])))
    return bad


def is_positive_definite(W: np.ndarray) -> bool:
    return bool(np.all(np.linalg.eigvalsh(0.5 * (W + W.T)) > 0))


def metric_condition(W: np.ndarray) -> float:
    ev = np.linalg.eigvalsh(0.5 * (W + W.T))
    return float(ev[-1] / ev[0]) if ev[0] > 0 else math.inf

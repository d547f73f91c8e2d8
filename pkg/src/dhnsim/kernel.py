"""Compiled closed-loop vector field and fixed-step RK4 driver.

The arrays produced by :class:`dhnsim.engine.Assembly` are consumed here.  The
readable per-subsystem implementation lives in ``controllers.ClosedLoop``; the
two are cross-checked in the test-suite.
"""

from __future__ import annotations

import numpy as np
from numba import njit

M_DFORM, M_DVALVE, M_DVSP, M_LBOOST, M_LVALVE, M_LVSP, M_PPLAIN, M_PBOOST, M_MIX = range(9)
M_HOLD, M_CAP = 9, 10

# edge float columns
(F_J, F_A, F_B, F_CV2, F_UVF, F_RP, F_JP, F_CP, F_PQI, F_PRP, F_PSET, F_PSLOPE,
 F_FKP, F_FQI, F_QSET, F_QSLOPE, F_VKP, F_VQI, F_UMAX) = range(19)
NEF = 19
# edge int columns
I_MODE, I_OFF, I_SRC, I_TGT, I_NS = range(5)
NEI = 5
# node float columns
G_C, G_RP, G_JP, G_CP, G_PQI, G_PRP, G_PSET, G_PSLOPE = range(8)
NNF = 8


@njit(cache=True)
def has_pump(m):
    return m != M_LVALVE and m != M_PPLAIN and m != M_MIX


@njit(cache=True)
def is_pressure(m):
    return m == M_DFORM or m == M_DVALVE or m == M_LBOOST or m == M_PBOOST


@njit(cache=True)
def is_valve(m):
    return m == M_DVALVE or m == M_LBOOST or m == M_LVALVE or m == M_MIX


@njit(cache=True)
def valve_cmd(q, r, qs, cv2, kp, qi, umax, sat, aw):
    y = -cv2 * abs(q) * q * (q - qs)
    raw = -kp * y + r
    rd = -y / qi
    if sat:
        if raw > umax:
            if aw and rd > 0.0:
                rd = 0.0
            return umax, rd
        if raw < 1.0:
            if aw and rd < 0.0:
                rd = 0.0
            return 1.0, rd
    return raw, rd


@njit(cache=True)
def field(x, t, tref, EF, EI, NF, NI, BK, Lginv, sat, aw, xdot, P, dE, dN, F, RD, UV):
    nE = EF.shape[0]
    nD = NF.shape[0]
    nK = BK.shape[0]
    dt_ = t - tref
    for j in range(nD):
        off = NI[j, 1]
        if NI[j, 0] == M_HOLD:
            P[j] = x[off + 1]
        else:
            P[j] = x[off]
    for k in range(nK):
        P[nD + k] = 0.0
    for e in range(nE):
        m = EI[e, I_MODE]
        off = EI[e, I_OFF]
        q = x[off]
        uv = EF[e, F_UVF]
        RD[e] = 0.0
        if is_valve(m):
            qs = EF[e, F_QSET] + EF[e, F_QSLOPE] * dt_
            uv, rd = valve_cmd(q, x[off + EI[e, I_NS] - 1], qs, EF[e, F_CV2], EF[e, F_VKP],
                               EF[e, F_VQI], EF[e, F_UMAX], sat, aw)
            RD[e] = rd
        UV[e] = uv
        f = -(EF[e, F_A] * abs(q) * q + EF[e, F_B] * q) - EF[e, F_CV2] * abs(q) * q * uv
        if has_pump(m):
            f += x[off + 2]
        F[e] = f
    if nK > 0:
        rhs = np.zeros(nK)
        for e in range(nE):
            s = EI[e, I_SRC]
            g = F[e]
            if s < nD:
                g += P[s]
            tg = EI[e, I_TGT]
            if tg < nD:
                g -= P[tg]
            g /= EF[e, F_J]
            for k in range(nK):
                rhs[k] += BK[k, e] * g
        for k in range(nK):
            acc = 0.0
            for l in range(nK):
                acc += Lginv[k, l] * rhs[l]
            P[nD + k] = acc
    for j in range(nD):
        dN[j] = 0.0
    for e in range(nE):
        m = EI[e, I_MODE]
        off = EI[e, I_OFF]
        s = EI[e, I_SRC]
        tg = EI[e, I_TGT]
        d = P[s] - P[tg]
        dE[e] = d
        q = x[off]
        xdot[off] = (F[e] + d) / EF[e, F_J]
        if tg < nD:
            dN[tg] += q
        if s < nD:
            dN[s] -= q
        if is_valve(m):
            xdot[off + EI[e, I_NS] - 1] = RD[e]
        if has_pump(m):
            qp = x[off + 1]
            pp = x[off + 2]
            r = x[off + 3]
            if is_pressure(m):
                ps = EF[e, F_PSET] + EF[e, F_PSLOPE] * dt_
                rp = EF[e, F_PRP]
                u = (EF[e, F_RP] - rp) * qp - rp * r + EF[e, F_JP] / EF[e, F_PQI] * (ps - pp)
                rdot = (pp - ps) / EF[e, F_PQI]
            else:
                qs = EF[e, F_QSET] + EF[e, F_QSLOPE] * dt_
                u = -EF[e, F_FKP] * pp - r
                rdot = (q - qs) / EF[e, F_FQI]
            xdot[off + 1] = (-pp - EF[e, F_RP] * qp + u) / EF[e, F_JP]
            xdot[off + 2] = (qp - q) / EF[e, F_CP]
            xdot[off + 3] = rdot
    for j in range(nD):
        off = NI[j, 1]
        if NI[j, 0] == M_HOLD:
            qp = x[off]
            pp = x[off + 1]
            r = x[off + 2]
            ps = NF[j, G_PSET] + NF[j, G_PSLOPE] * dt_
            rp = NF[j, G_PRP]
            u = (NF[j, G_RP] - rp) * qp - rp * r + NF[j, G_JP] / NF[j, G_PQI] * (ps - pp)
            xdot[off] = (-pp - NF[j, G_RP] * qp + u) / NF[j, G_JP]
            xdot[off + 1] = (qp + dN[j]) / NF[j, G_CP]
            xdot[off + 2] = (pp - ps) / NF[j, G_PQI]
        else:
            xdot[off] = dN[j] / NF[j, G_C]


@njit(cache=True)
def inv_friction(a, b, h):
    # inverse of a|q|q + b q
    ah = abs(h)
    if a > 0.0:
        q = 2.0 * ah / (b + np.sqrt(b * b + 4.0 * a * ah))
    else:
        q = ah / b
    return q if h >= 0.0 else -q


@njit(cache=True)
def edge_ref(e, t, tref, EF, EI, dbar, xb, xbd):
    """Equilibrium of edge ``e`` for the setpoints at ``t`` and its derivative."""
    m = EI[e, I_MODE]
    dt_ = t - tref
    a = EF[e, F_A]
    b = EF[e, F_B]
    cv2 = EF[e, F_CV2]
    uvf = EF[e, F_UVF]
    for i in range(EI[e, I_NS]):
        xb[i] = 0.0
        xbd[i] = 0.0
    if m == M_PPLAIN:
        xb[0] = inv_friction(a, b, dbar)
        return
    if m == M_DFORM or m == M_PBOOST:
        ps = EF[e, F_PSET] + EF[e, F_PSLOPE] * dt_
        sp = EF[e, F_PSLOPE]
        aeff = a + uvf * cv2
        q = inv_friction(aeff, b, ps + dbar)
        dq = sp / (2.0 * aeff * abs(q) + b)
        rp = EF[e, F_PRP]
        xb[0] = q
        xb[1] = q
        xb[2] = ps
        xb[3] = -ps / rp - q
        xbd[0] = dq
        xbd[1] = dq
        xbd[2] = sp
        xbd[3] = -sp / rp - dq
        return
    qs = EF[e, F_QSET] + EF[e, F_QSLOPE] * dt_
    sq = EF[e, F_QSLOPE]
    lam = a * abs(qs) * qs + b * qs
    dlam = 2.0 * a * abs(qs) + b
    mu = cv2 * abs(qs) * qs
    dmu = 2.0 * cv2 * abs(qs)
    xb[0] = qs
    xbd[0] = sq
    if m == M_LVALVE or m == M_MIX:
        xb[1] = (dbar - lam) / mu
        xbd[1] = (-dlam * mu - (dbar - lam) * dmu) / (mu * mu) * sq
        return
    xb[1] = qs
    xbd[1] = sq
    if m == M_DVSP or m == M_LVSP:
        pp = lam + uvf * mu - dbar
        dpp = (dlam + uvf * dmu) * sq
        k1 = 1.0 + EF[e, F_FKP]
        xb[2] = pp
        xbd[2] = dpp
        xb[3] = -k1 * pp - EF[e, F_RP] * qs
        xbd[3] = -k1 * dpp - EF[e, F_RP] * sq
        return
    # pressure pump plus valve
    ps = EF[e, F_PSET] + EF[e, F_PSLOPE] * dt_
    sp = EF[e, F_PSLOPE]
    rp = EF[e, F_PRP]
    xb[2] = ps
    xbd[2] = sp
    xb[3] = -ps / rp - qs
    xbd[3] = -sp / rp - sq
    num = ps - lam + dbar
    xb[4] = num / mu
    xbd[4] = ((sp - dlam * sq) * mu - num * dmu * sq) / (mu * mu)


@njit(cache=True)
def node_ref(j, t, tref, NF, dbar, xb, xbd):
    dt_ = t - tref
    ps = NF[j, G_PSET] + NF[j, G_PSLOPE] * dt_
    sp = NF[j, G_PSLOPE]
    rp = NF[j, G_PRP]
    xb[0] = -dbar
    xb[1] = ps
    xb[2] = -ps / rp + dbar
    xbd[0] = 0.0
    xbd[1] = sp
    xbd[2] = -sp / rp


@njit(cache=True)
def references(t, tref, EF, EI, NF, NI, XB, DB, MOV, xb_all, xbd_all):
    """Fill the full reference state; moving references follow the setpoints."""
    nE = EF.shape[0]
    nD = NF.shape[0]
    xb = np.zeros(8)
    xbd = np.zeros(8)
    for i in range(XB.shape[0]):
        xb_all[i] = XB[i]
        xbd_all[i] = 0.0
    for e in range(nE):
        if MOV[e]:
            edge_ref(e, t, tref, EF, EI, DB[e], xb, xbd)
            off = EI[e, I_OFF]
            for i in range(EI[e, I_NS]):
                xb_all[off + i] = xb[i]
                xbd_all[off + i] = xbd[i]
    for j in range(nD):
        if MOV[nE + j] and NI[j, 0] == M_HOLD:
            node_ref(j, t, tref, NF, DB[nE + j], xb, xbd)
            off = NI[j, 1]
            for i in range(3):
                xb_all[off + i] = xb[i]
                xbd_all[off + i] = xbd[i]


@njit(cache=True)
def supply_rates(x, EI, NI, SOFF, SNS, WS, WOFF, xb, xbd, dE, dN, DB, out):
    """Shifted supply minus the work done by a moving reference, per subsystem."""
    nE = EI.shape[0]
    nS = SOFF.shape[0]
    for s in range(nS):
        off = SOFF[s]
        n = SNS[s]
        if s < nE:
            zi = 0
            d = dE[s]
        else:
            j = s - nE
            zi = 1 if NI[j, 0] == M_HOLD else 0
            d = dN[j]
        val = (x[off + zi] - xb[off + zi]) * (d - DB[s])
        w = WOFF[s]
        for i in range(n):
            di = x[off + i] - xb[off + i]
            acc = 0.0
            for k in range(n):
                acc += WS[w + i * n + k] * xbd[off + k]
            val -= di * acc
        out[s] = val


@njit(cache=True)
def project(x, EI, BK, PROJ):
    nK = BK.shape[0]
    nE = EI.shape[0]
    res = np.zeros(nK)
    for k in range(nK):
        acc = 0.0
        for e in range(nE):
            acc += BK[k, e] * x[EI[e, I_OFF]]
        res[k] = acc
    for e in range(nE):
        acc = 0.0
        for k in range(nK):
            acc += PROJ[e, k] * res[k]
        x[EI[e, I_OFF]] -= acc


@njit(cache=True)
def manifold_residual(x, EI, BK):
    nK = BK.shape[0]
    worst = 0.0
    for k in range(nK):
        acc = 0.0
        for e in range(EI.shape[0]):
            acc += BK[k, e] * x[EI[e, I_OFF]]
        worst = max(worst, abs(acc))
    return worst


@njit(cache=True)
def power_ratio(x, EI, NI, BK, P, dE, dN):
    """``|sum z d| / sum |z d|`` over edges, nodes and junctions after a ``field`` call."""
    nE = EI.shape[0]
    nD = NI.shape[0]
    tot = 0.0
    mag = 0.0
    for e in range(nE):
        w = x[EI[e, I_OFF]] * dE[e]
        tot += w
        mag += abs(w)
    for j in range(nD):
        w = P[j] * dN[j]
        tot += w
        mag += abs(w)
    for k in range(BK.shape[0]):
        dk = 0.0
        for e in range(nE):
            dk += BK[k, e] * x[EI[e, I_OFF]]
        w = P[nD + k] * dk
        tot += w
        mag += abs(w)
    return abs(tot) / mag if mag > 0 else 0.0


@njit(cache=True)
def quad_forms(ka, kb, SOFF, SNS, WS, WOFF, out, scale):
    """``out[s] += scale * ka_s^T W_s kb_s`` for every subsystem block."""
    for s in range(SOFF.shape[0]):
        off = SOFF[s]
        n = SNS[s]
        w = WOFF[s]
        acc = 0.0
        for i in range(n):
            row = 0.0
            for k in range(n):
                row += WS[w + i * n + k] * kb[off + k]
            acc += ka[off + i] * row
        out[s] += scale * acc


@njit(cache=True)
def storages(x, xb, SOFF, SNS, WS, WOFF, out):
    for s in range(SOFF.shape[0]):
        off = SOFF[s]
        n = SNS[s]
        w = WOFF[s]
        acc = 0.0
        for i in range(n):
            row = 0.0
            for k in range(n):
                row += WS[w + i * n + k] * (x[off + k] - xb[off + k])
            acc += (x[off + i] - xb[off + i]) * row
        out[s] = 0.5 * acc


# RK4 quadratic-invariant defect: D = h^2 sum_ij (b_i a_ij - b_i b_j / 2) k_i^T W k_j


@njit(cache=True)
def rk4_defect(k1, k2, k3, k4, SOFF, SNS, WS, WOFF, h, out):
    b1, b2, b3, b4 = 1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0
    h2 = h * h
    # symmetric coefficient matrix C_ij = (b_i a_ij + b_j a_ji - b_i b_j) / 2
    quad_forms(k1, k1, SOFF, SNS, WS, WOFF, out, -0.5 * b1 * b1 * h2)
    quad_forms(k2, k2, SOFF, SNS, WS, WOFF, out, -0.5 * b2 * b2 * h2)
    quad_forms(k3, k3, SOFF, SNS, WS, WOFF, out, -0.5 * b3 * b3 * h2)
    quad_forms(k4, k4, SOFF, SNS, WS, WOFF, out, -0.5 * b4 * b4 * h2)
    quad_forms(k2, k1, SOFF, SNS, WS, WOFF, out, (b2 * 0.5 - b1 * b2) * h2)
    quad_forms(k3, k1, SOFF, SNS, WS, WOFF, out, -b1 * b3 * h2)
    quad_forms(k4, k1, SOFF, SNS, WS, WOFF, out, -b1 * b4 * h2)
    quad_forms(k3, k2, SOFF, SNS, WS, WOFF, out, (b3 * 0.5 - b2 * b3) * h2)
    quad_forms(k4, k2, SOFF, SNS, WS, WOFF, out, -b2 * b4 * h2)
    quad_forms(k4, k3, SOFF, SNS, WS, WOFF, out, (b4 * 1.0 - b3 * b4) * h2)


@njit(cache=True)
def rk4_segment(x, S, t0, tref, h_out, nout, nsub, stride, max_refine, eps_rel, EF, EI, NF, NI, BK, Lginv, PROJ,
                sat, aw, XB, DB, MOV, SOFF, SNS, WS, WOFF, tol, Xrec, Srec, Trec):
    """Advance ``nout`` output steps of size ``h_out`` in place.

    Each output step takes ``nsub`` RK4 substeps.  The discrete storage
    balance of RK4 differs from the quadrature of the supply by a computable
    defect; an output step whose accumulated defect exceeds
    ``eps_rel * max(1, H) / (2 stride)`` for any subsystem is redone with
    twice the substeps, at most ``max_refine`` doublings.

    Returns ``(status, n_records, worst_residual, n_projections, n_refined,
    max_substeps, worst_power_ratio)``, the power ratio taken over every stage
    evaluation; status 1 flags a non-finite state, in which case ``x`` holds
    the last good state.
    """
    n = x.shape[0]
    nE = EF.shape[0]
    nD = NF.shape[0]
    nK = BK.shape[0]
    nS = SOFF.shape[0]
    P = np.zeros(nD + nK)
    dE = np.zeros(nE)
    dN = np.zeros(nD)
    F = np.zeros(nE)
    RD = np.zeros(nE)
    UV = np.zeros(nE)
    k1 = np.zeros(n)
    k2 = np.zeros(n)
    k3 = np.zeros(n)
    k4 = np.zeros(n)
    xt = np.zeros(n)
    xb = np.zeros(n)
    xbd = np.zeros(n)
    xbd_h = np.zeros(n)
    xbd_1 = np.zeros(n)
    s1 = np.zeros(nS)
    s2 = np.zeros(nS)
    s3 = np.zeros(nS)
    s4 = np.zeros(nS)
    Hs = np.zeros(nS)
    Dacc = np.zeros(nS)
    budget = np.zeros(nS)
    moving = False
    for i in range(MOV.shape[0]):
        if MOV[i]:
            moving = True
    nrec = 0
    worst = 0.0
    nproj = 0
    nref = 0
    mmax = nsub
    pmax = 0.0
    x_save = x.copy()
    S_save = S.copy()
    for out_step in range(nout):
        ta = t0 + out_step * h_out
        references(ta, tref, EF, EI, NF, NI, XB, DB, MOV, xb, xbd)
        storages(x, xb, SOFF, SNS, WS, WOFF, Hs)
        for s in range(nS):
            budget[s] = eps_rel * max(1.0, abs(Hs[s])) / (2.0 * stride)
        for i in range(n):
            x_save[i] = x[i]
        for s in range(nS):
            S_save[s] = S[s]
        m = nsub
        level = 0
        while True:
            h = h_out / m
            for s in range(nS):
                Dacc[s] = 0.0
            finite = True
            for j in range(m):
                t = ta + j * h
                th = t + 0.5 * h
                t1 = t + h
                field(x, t, tref, EF, EI, NF, NI, BK, Lginv, sat, aw, k1, P, dE, dN, F, RD, UV)
                pmax = max(pmax, power_ratio(x, EI, NI, BK, P, dE, dN))
                references(t, tref, EF, EI, NF, NI, XB, DB, MOV, xb, xbd)
                supply_rates(x, EI, NI, SOFF, SNS, WS, WOFF, xb, xbd, dE, dN, DB, s1)
                for i in range(n):
                    xt[i] = x[i] + 0.5 * h * k1[i]
                if moving:
                    for i in range(n):
                        k1[i] -= xbd[i]
                field(xt, th, tref, EF, EI, NF, NI, BK, Lginv, sat, aw, k2, P, dE, dN, F, RD, UV)
                pmax = max(pmax, power_ratio(xt, EI, NI, BK, P, dE, dN))
                if moving:
                    references(th, tref, EF, EI, NF, NI, XB, DB, MOV, xb, xbd_h)
                supply_rates(xt, EI, NI, SOFF, SNS, WS, WOFF, xb, xbd_h, dE, dN, DB, s2)
                for i in range(n):
                    xt[i] = x[i] + 0.5 * h * k2[i]
                field(xt, th, tref, EF, EI, NF, NI, BK, Lginv, sat, aw, k3, P, dE, dN, F, RD, UV)
                pmax = max(pmax, power_ratio(xt, EI, NI, BK, P, dE, dN))
                supply_rates(xt, EI, NI, SOFF, SNS, WS, WOFF, xb, xbd_h, dE, dN, DB, s3)
                for i in range(n):
                    xt[i] = x[i] + h * k3[i]
                field(xt, t1, tref, EF, EI, NF, NI, BK, Lginv, sat, aw, k4, P, dE, dN, F, RD, UV)
                pmax = max(pmax, power_ratio(xt, EI, NI, BK, P, dE, dN))
                if moving:
                    references(t1, tref, EF, EI, NF, NI, XB, DB, MOV, xb, xbd_1)
                supply_rates(xt, EI, NI, SOFF, SNS, WS, WOFF, xb, xbd_1, dE, dN, DB, s4)
                for i in range(n):
                    x[i] += h / 6.0 * ((k1[i] + (xbd[i] if moving else 0.0)) + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
                    if not np.isfinite(x[i]):
                        finite = False
                if not finite:
                    break
                if moving:
                    # defect of the deviation from the moving reference
                    for i in range(n):
                        k2[i] -= xbd_h[i]
                        k3[i] -= xbd_h[i]
                        k4[i] -= xbd_1[i]
                rk4_defect(k1, k2, k3, k4, SOFF, SNS, WS, WOFF, h, Dacc)
                for s in range(nS):
                    S[s] += h / 6.0 * (s1[s] + 2.0 * s2[s] + 2.0 * s3[s] + s4[s])
                if nK > 0:
                    res = manifold_residual(x, EI, BK)
                    if res > tol:
                        project(x, EI, BK, PROJ)
                        nproj += 1
                        res = manifold_residual(x, EI, BK)
                    worst = max(worst, res)
            if not finite:
                for i in range(n):
                    x[i] = x_save[i]
                return 1, nrec, worst, nproj, nref, mmax, pmax
            ok = True
            for s in range(nS):
                if abs(Dacc[s]) > budget[s]:
                    ok = False
            if ok or level >= max_refine:
                break
            for i in range(n):
                x[i] = x_save[i]
            for s in range(nS):
                S[s] = S_save[s]
            m *= 2
            level += 1
            nref += 1
        mmax = max(mmax, m)
        if (out_step + 1) % stride == 0 or out_step == nout - 1:
            for i in range(n):
                Xrec[nrec, i] = x[i]
            for s in range(nS):
                Srec[nrec, s] = S[s]
            Trec[nrec] = ta + h_out
            nrec += 1
    return 0, nrec, worst, nproj, nref, mmax, pmax


@njit(cache=True)
def sample_diagnostics(X, T, tref, EF, EI, NF, NI, BK, Lginv, sat, aw, XB, DB, ZKB, MOV, SOFF, SNS, WS, WOFF,
                       H, PSI, Z, D, PK, UVo, PW):
    """Storage, realised dissipation, ports and power balance at every sample.

    ``PW`` columns: sum z d, sum |z d|, shifted sum, shifted sum of magnitudes,
    manifold residual.
    """
    ns, n = X.shape
    nE = EF.shape[0]
    nD = NF.shape[0]
    nK = BK.shape[0]
    nS = SOFF.shape[0]
    P = np.zeros(nD + nK)
    dE = np.zeros(nE)
    dN = np.zeros(nD)
    F = np.zeros(nE)
    RD = np.zeros(nE)
    UV = np.zeros(nE)
    xdot = np.zeros(n)
    xb = np.zeros(n)
    xbd = np.zeros(n)
    x = np.zeros(n)
    for k in range(ns):
        for i in range(n):
            x[i] = X[k, i]
        field(x, T[k], tref, EF, EI, NF, NI, BK, Lginv, sat, aw, xdot, P, dE, dN, F, RD, UV)
        references(T[k], tref, EF, EI, NF, NI, XB, DB, MOV, xb, xbd)
        tot = 0.0
        mag = 0.0
        stot = 0.0
        smag = 0.0
        for s in range(nS):
            off = SOFF[s]
            m = SNS[s]
            if s < nE:
                zi = 0
                d = dE[s]
            else:
                j = s - nE
                zi = 1 if NI[j, 0] == M_HOLD else 0
                d = dN[j]
            z = x[off + zi]
            Z[k, s] = z
            D[k, s] = d
            sup = (z - xb[off + zi]) * (d - DB[s])
            ssup = (z - XB[off + zi]) * (d - DB[s])
            w = WOFF[s]
            h = 0.0
            hd = 0.0
            for a in range(m):
                da = x[off + a] - xb[off + a]
                acc = 0.0
                accd = 0.0
                for b in range(m):
                    acc += WS[w + a * m + b] * (x[off + b] - xb[off + b])
                    accd += WS[w + a * m + b] * xdot[off + b]
                h += 0.5 * da * acc
                hd += da * accd
            H[k, s] = h
            PSI[k, s] = sup - hd
            tot += z * d
            mag += abs(z * d)
            stot += ssup
            smag += abs(ssup)
        res = 0.0
        for kk in range(nK):
            dk = 0.0
            for e in range(nE):
                dk += BK[kk, e] * x[EI[e, I_OFF]]
            PK[k, kk] = P[nD + kk]
            tot += P[nD + kk] * dk
            mag += abs(P[nD + kk] * dk)
            stot += (P[nD + kk] - ZKB[kk]) * dk
            smag += abs((P[nD + kk] - ZKB[kk]) * dk)
            res = max(res, abs(dk))
        for e in range(nE):
            UVo[k, e] = UV[e]
        PW[k, 0] = tot
        PW[k, 1] = mag
        PW[k, 2] = stot
        PW[k, 3] = smag
        PW[k, 4] = res


@njit(cache=True)
def augmented_rhs(y, t, tref, EF, EI, NF, NI, BK, Lginv, sat, aw, XB, DB, MOV, SOFF, SNS, WS, WOFF, out):
    """State derivative followed by the supply-integral derivatives (adaptive path)."""
    n = XB.shape[0]
    nE = EF.shape[0]
    nD = NF.shape[0]
    nK = BK.shape[0]
    nS = SOFF.shape[0]
    x = y[:n].copy()
    xdot = np.zeros(n)
    P = np.zeros(nD + nK)
    dE = np.zeros(nE)
    dN = np.zeros(nD)
    field(x, t, tref, EF, EI, NF, NI, BK, Lginv, sat, aw, xdot, P, dE, dN, np.zeros(nE), np.zeros(nE), np.zeros(nE))
    xb = np.zeros(n)
    xbd = np.zeros(n)
    references(t, tref, EF, EI, NF, NI, XB, DB, MOV, xb, xbd)
    s = np.zeros(nS)
    supply_rates(x, EI, NI, SOFF, SNS, WS, WOFF, xb, xbd, dE, dN, DB, s)
    out[:n] = xdot
    out[n:] = s

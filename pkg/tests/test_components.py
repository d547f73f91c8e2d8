from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import solve_ivp
from scipy.linalg import expm
from scipy.optimize import brentq

from dhnsim.components import (
    Characteristic,
    PipeHydraulics,
    PumpParams,
    ValveParams,
    capacitive_rhs,
    dgu_consumer_rhs,
    fit_friction,
    friction,
    holding_rhs,
    pipe_rhs,
    pump_rhs,
    stem_from_input,
    valve_drop,
)

flows = st.floats(-0.05, 0.05, allow_nan=False).filter(lambda q: q == 0 or abs(q) > 1e-12)
RHO, NU = 983.0, 4.7e-7


def dw_oracle(q, d, length, eps):
    """Darcy-Weisbach drop written out term by term (laminar, blend, Swamee-Jain)."""
    out = []
    for qq in q:
        v = qq / (math.pi * d * d / 4)
        re = abs(v) * d / NU
        lam = 64 / re
        sj = 0.25 / math.log10(eps / d / 3.7 + 5.74 / max(re, 4000) ** 0.9) ** 2
        if re < 2000:
            f = lam
        elif re < 4000:
            w = (re - 2000) / 2000
            f = (1 - w) * 64 / re + w * sj
        else:
            f = sj
        out.append(f * length / d * RHO * v * abs(v) / 2)
    return np.array(out)


def colebrook_drop(q, d, length, eps):
    v = q / (math.pi * d * d / 4)
    re = v * d / NU
    f = np.full_like(q, 0.02)
    for _ in range(100):
        f = (-2 * np.log10(eps / d / 3.7 + 2.51 / (re * np.sqrt(f)))) ** -2
    return f * length / d * RHO * v * v / 2


class TestFriction:
    def test_zero_flow(self):
        assert friction(PipeHydraulics(1.0, 1e9, 1e5), 0.0) == 0.0

    def test_direct_evaluation(self):
        assert friction(PipeHydraulics(1.0, 1e9, 1e5), 1e-3) == pytest.approx(1100.0, rel=1e-12)

    @given(flows)
    def test_odd(self, q):
        p = PipeHydraulics(1.0, 3.9e8, 4.1e4)
        assert p.friction(-q) == -p.friction(q)

    @given(flows, flows)
    def test_strictly_increasing(self, q1, q2):
        p = PipeHydraulics(1.0, 3.9e8, 4.1e4)
        v = ValveParams(7.9e-5)
        if q1 != q2:
            assert (q1 - q2) * (p.friction(q1) - p.friction(q2)) > 0
            assert (q1 - q2) * (v.mu_hat(q1) - v.mu_hat(q2)) > 0


class TestFrictionFit:
    def test_dn80_matches_bounded_least_squares_oracle(self):
        d, length = 0.0825, 100.0
        a, b = fit_friction(d, length)
        q = np.geomspace(1e-5, 0.03, 400)
        dp = dw_oracle(q, d, length, 4.5e-5)
        b_hp = 128 * RHO * NU * length / (math.pi * d**4)
        # with b pinned at the laminar bound, the relative least-squares a is closed form
        g = q * q / dp
        a_star = float(np.sum(g * (1 - b_hp * q / dp)) / np.sum(g * g))
        assert b == pytest.approx(b_hp, rel=1e-9)
        assert a == pytest.approx(a_star, rel=1e-7)

    def test_dn80_regression(self):
        a, b = fit_friction(0.0825, 100.0)
        assert a == pytest.approx(391074221.8859781, rel=1e-9)
        assert b == pytest.approx(40634.570951191985, rel=1e-9)

    def test_fit_tracks_colebrook_in_turbulent_range(self):
        a, b = fit_friction(0.0825, 100.0)
        q = np.geomspace(3e-4, 0.03, 60)
        err = np.abs((a * q * q + b * q) / colebrook_drop(q, 0.0825, 100.0, 4.5e-5) - 1)
        assert err.max() < 0.25

    def test_length_scaling(self):
        a1, b1 = fit_friction(0.0825, 50.0)
        a2, b2 = fit_friction(0.0825, 100.0)
        assert a2 == pytest.approx(2 * a1, rel=1e-6)
        assert b2 == pytest.approx(2 * b1, rel=1e-6)

    def test_smaller_diameter_more_resistance(self):
        assert fit_friction(0.0359, 25.0)[0] > fit_friction(0.0825, 25.0)[0]

    @pytest.mark.parametrize("geo", [(0.0, 1.0, 1e-5), (0.1, -1.0, 1e-5), (0.1, 1.0, -1e-5)])
    def test_bad_geometry(self, geo):
        with pytest.raises(ValueError):
            fit_friction(*geo)


class TestValve:
    def test_fully_open_reference_drop(self):
        v = ValveParams(0.025 / math.sqrt(1e5))
        assert valve_drop(v, 1.0, 0.025) == pytest.approx(1e5, rel=1e-12)

    def test_zero_flow(self):
        v = ValveParams(7.9e-5)
        assert valve_drop(v, 0.3, 0.0) == 0.0

    def test_equal_percentage(self):
        v = ValveParams(7.9e-5, Characteristic.EQUAL_PERCENTAGE, rangeability=50.0)
        assert v.u_of_stem(0.5) == pytest.approx(50.0, rel=1e-12)
        assert v.mu_hat(0.01) == pytest.approx(1.602e4, rel=1e-3)
        assert valve_drop(v, 0.5, 0.01) == pytest.approx(8.01e5, rel=1e-3)

    def test_stem_out_of_range(self):
        v = ValveParams(7.9e-5, s_min=0.05)
        with pytest.raises(ValueError, match="stem out of range"):
            valve_drop(v, 0.01, 1e-3)

    @pytest.mark.parametrize("char", list(Characteristic))
    def test_fully_open_inverse(self, char):
        assert stem_from_input(ValveParams(7.9e-5, char), 1.0) == pytest.approx(1.0, abs=1e-15)

    def test_inverse_examples(self):
        assert stem_from_input(ValveParams(7.9e-5), 4.0) == pytest.approx(0.5)
        ep = ValveParams(7.9e-5, Characteristic.EQUAL_PERCENTAGE, rangeability=50.0)
        assert stem_from_input(ep, 50.0) == pytest.approx(0.5)

    def test_input_out_of_range(self):
        v = ValveParams(7.9e-5, s_min=0.05)
        for u in (0.5, v.u_max * 1.01):
            with pytest.raises(ValueError):
                stem_from_input(v, u)

    @given(st.floats(0.05, 1.0), st.sampled_from(list(Characteristic)))
    def test_round_trip(self, s, char):
        v = ValveParams(7.9e-5, char, s_min=0.05)
        assert stem_from_input(v, v.u_of_stem(s)) == pytest.approx(s, rel=1e-9)


PUMP = PumpParams.from_resistance(1e6)


class TestPump:
    def test_ratios(self):
        assert PUMP.R_P / PUMP.J_P == pytest.approx(7.2878)
        assert 1 / (PUMP.J_P * PUMP.C_P) == pytest.approx(341.4283)

    def test_equilibrium(self):
        qb, pb = 3e-3, 4e5
        assert pump_rhs(PUMP, qb, pb, pb + PUMP.R_P * qb, -qb) == (0.0, 0.0)

    def test_unforced_origin(self):
        assert pump_rhs(PUMP, 0.0, 0.0, 0.0, 0.0) == (0.0, 0.0)

    @given(st.floats(0, 1), *[st.floats(-1e6, 1e6)] * 8)
    def test_linear(self, al, q1, p1, u1, d1, q2, p2, u2, d2):
        mix = lambda a, b: al * a + (1 - al) * b  # noqa: E731
        lhs = pump_rhs(PUMP, mix(q1, q2), mix(p1, p2), mix(u1, u2), mix(d1, d2))
        r1, r2 = pump_rhs(PUMP, q1, p1, u1, d1), pump_rhs(PUMP, q2, p2, u2, d2)
        for k in range(2):
            assert lhs[k] == pytest.approx(mix(r1[k], r2[k]), rel=1e-9, abs=1e-3)

    def test_step_matches_matrix_exponential(self):
        u = 1e5
        A = np.array([[-PUMP.R_P / PUMP.J_P, -1 / PUMP.J_P], [1 / PUMP.C_P, 0.0]])
        b = np.array([u / PUMP.J_P, 0.0])
        x_inf = -np.linalg.solve(A, b)

        def f(t, x):
            dq, dp = pump_rhs(PUMP, x[0], x[1], u, 0.0)
            return [dq / PUMP.J_P, dp / PUMP.C_P]

        ts = [0.1, 1.0, 5.0]
        sol = solve_ivp(f, (0, 5), [0.0, 0.0], method="DOP853", rtol=1e-12, atol=1e-14, t_eval=ts)
        for k, t in enumerate(ts):
            ref = x_inf - expm(A * t) @ x_inf
            assert sol.y[1, k] == pytest.approx(ref[1], rel=1e-7)
        assert x_inf[1] == pytest.approx(u)


PIPE32 = PipeHydraulics.from_geometry(25.0, 0.0359)
VALVE = ValveParams(7.9e-5, s_min=0.005)


class TestSubsystemRhs:
    def test_valve_off_reduces_to_pipe_with_pump(self):
        x = np.array([2e-3, 2.5e-3, 3e5])
        assert np.array_equal(dgu_consumer_rhs(PIPE32, VALVE, PUMP, x, 0.0, 1e5, 2e5), pipe_rhs(PIPE32, PUMP, x, 1e5, 2e5))

    def test_algebraic_equilibrium(self):
        qb, ub, db = 2e-3, 40.0, 1e5
        pb = PIPE32.friction(qb) + VALVE.mu_hat(qb) * ub - db
        x = np.array([qb, qb, pb])
        assert np.allclose(dgu_consumer_rhs(PIPE32, VALVE, PUMP, x, ub, pb + PUMP.R_P * qb, db), 0, atol=1e-9)

    def test_newton_equilibrium(self):
        qb, d = 3e-3, 5e5
        # pump pressure that balances the loop at the target flow, by root finding on the flow row
        p = brentq(lambda p: dgu_consumer_rhs(PIPE32, VALVE, PUMP, [qb, qb, p], 1.0, 0.0, d)[0], -1e7, 1e7, xtol=1e-9)
        uP = p + PUMP.R_P * qb
        r = dgu_consumer_rhs(PIPE32, VALVE, PUMP, np.array([qb, qb, p]), 1.0, uP, d)
        scale = np.array([abs(d), abs(uP), qb])
        assert np.all(np.abs(r) / scale <= 1e-9)

    def test_capacitive_balance(self):
        assert capacitive_rhs(2e-3 - 2e-3) == 0.0

    def test_plain_pipe_steady(self):
        q = 4e-3
        assert pipe_rhs(PIPE32, None, [q], 0.0, PIPE32.friction(q))[0] == 0.0

    def test_holding_node_equilibrium_and_linear_oracle(self):
        qb, pb = -1e-3, 2e5
        uP = pb + PUMP.R_P * qb
        assert holding_rhs(PUMP, qb, pb, uP, -qb) == (0.0, 0.0)
        A = np.array([[-PUMP.R_P, -1.0], [1.0, 0.0]])
        for x in ([1e-3, 1e5], [-2e-3, 3e5]):
            lhs = holding_rhs(PUMP, x[0], x[1], uP, -qb)
            lin = A @ (np.array(x) - [qb, pb])
            assert np.allclose(lhs, lin, rtol=1e-12, atol=1e-6)

    @settings(max_examples=200)
    @given(st.floats(1e-4, 2e-2), st.floats(1e-4, 2e-2), st.floats(-1e-2, 1e-2), st.floats(-1e-2, 1e-2),
           st.floats(-1e6, 1e6), st.floats(-1e6, 1e6), st.floats(1.0, 1e3))
    def test_open_loop_shifted_dissipation(self, q, qb, qP, qPb, pP, pPb, uv):
        # energy H = 1/2 (J dq^2 + J_P dqP^2 + C_P dpP^2), equilibrium inputs fixed by x_bar
        db = 2e5
        uPb = pPb + PUMP.R_P * qPb
        dbar_force = pPb - PIPE32.friction(qb) - VALVE.mu_hat(qb) * uv + db  # residual of x_bar
        d = db - dbar_force + 1.3e4
        uP = uPb + 7e3
        x, xb = np.array([q, qP, pP]), np.array([qb, qPb, pPb])
        f = dgu_consumer_rhs(PIPE32, VALVE, PUMP, x, uv, uP, d)
        fb = dgu_consumer_rhs(PIPE32, VALVE, PUMP, xb, uv, uPb, db - dbar_force)
        # derivative of the shifted storage along x minus along x_bar (incremental form)
        dH = (q - qb) * (f[0] - fb[0]) + (qP - qPb) * (f[1] - fb[1]) + (pP - pPb) * (f[2] - fb[2])
        supply = (q - qb) * (d - (db - dbar_force)) + (qP - qPb) * (uP - uPb)
        psi = ((q - qb) * (PIPE32.friction(q) - PIPE32.friction(qb))
               + uv * (q - qb) * (VALVE.mu_hat(q) - VALVE.mu_hat(qb)) + PUMP.R_P * (qP - qPb) ** 2)
        assert psi >= 0
        scale = abs(supply) + psi + 1.0
        assert abs(dH - (supply - psi)) <= 1e-12 * scale

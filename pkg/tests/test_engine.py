from __future__ import annotations

import math

import numpy as np
import pytest
from scipy.linalg import expm, matrix_balance

from conftest import BUNDLED_NET, full_assembly, loop_network, loop_network_doc
from dhnsim.components import PumpParams
from dhnsim.controllers import ClosedLoop, Mode, PumpPressureCtl
from dhnsim.engine import Assembly
from dhnsim.io import load_network
from dhnsim.passivity import solve_equilibrium
from dhnsim.scenario import Event, Scenario, ScenarioError
from dhnsim.simulate import _perturb, rk4_step, run
from dhnsim.topology import TopologyError

PP = PumpParams.from_resistance(1e6)
CTL = PumpPressureCtl(15e5, 1 / 3.64e-7)
HOLD = ClosedLoop("N0", Mode.HOLDING, pump=PP, pressure_ctl=CTL)


def random_states(asm, eq, n, spread=0.3, seed=0):
    rng = np.random.default_rng(seed)
    scale = asm.state_scale(eq.x)
    for _ in range(n):
        yield eq.x + spread * scale * rng.standard_normal(eq.x.size)


def junction_doc(J=1e6):
    doc = loop_network_doc()
    doc["nodes"][2] = {"id": 3, "kind": "junction"}
    doc["edges"][1]["pipe"] = {"J": J, "a": 1e8, "b": 1e4}
    doc["edges"][2] = {"id": 3, "kind": "pipe", "source": 2, "target": 3, "J": J, "a": 1e8, "b": 1e4}
    return doc


def linear_pump():
    """Isolated holding pump under pressure control: ``xdot = A x + b``."""
    J, R, C, Q = PP.J_P, PP.R_P, PP.C_P, CTL.Q_I
    A = np.array([[-R / J, -(1 + J / Q) / J, -R / J], [1 / C, 0, 0], [0, 1 / Q, 0]])
    b = np.array([15e5 / Q, 0.0, -15e5 / Q])
    return A, b


def pump_error(dt, t_end=1.0):
    A, b = linear_pump()
    x0 = np.array([0.0, 2e5, 0.0])
    xb = HOLD.equilibrium(0.0)
    x = x0.copy()
    n = int(round(t_end / dt))
    for k in range(n):
        x = rk4_step(lambda y, t: HOLD.rhs(y, 0.0), x, k * dt, dt)
    return x, xb + propagate(A, t_end, x0 - xb)


def propagate(A, t, v):
    """``expm(A t) v`` on the diagonally balanced matrix (A mixes scales 1e-3 .. 1e8)."""
    Ab, T = matrix_balance(A * t, permute=False)
    return T @ expm(Ab) @ np.linalg.solve(T, v)


class TestVectorField:
    def test_kernel_matches_reference(self, full):
        asm, eq = full
        for x in random_states(asm, eq, 20):
            x = asm.project_onto_manifold(x)
            ref = asm.vector_field(x, 0.0)
            fast = asm.fast_field(x, 0.0)
            scale = np.abs(ref) + 1e-9 * np.max(np.abs(ref))
            assert np.all(np.abs(fast - ref) <= 1e-9 * scale + 1e-300)

    def test_kernel_matches_reference_saturated(self, full):
        asm, eq = full
        asm.saturation = True
        try:
            for x in random_states(asm, eq, 10, spread=3.0, seed=5):
                x = asm.project_onto_manifold(x)
                ref, fast = asm.vector_field(x, 0.0), asm.fast_field(x, 0.0)
                assert np.allclose(fast, ref, rtol=1e-9, atol=1e-9 * np.max(np.abs(ref)))
        finally:
            asm.saturation = False

    def test_equilibrium_is_stationary(self, full):
        asm, eq = full
        f = asm.vector_field(eq.x, 0.0)
        assert np.max(np.abs(f) / asm.state_scale(eq.x)) <= 1e-9

    def test_junction_symmetry(self):
        asm = Assembly(load_network(junction_doc()))
        x = asm.rest_state()
        p = 3.3e5
        for lp in asm.loops[asm.n_edges:]:
            sl = asm.layout.slices[lp.key]
            x[sl.start + (1 if lp.mode is Mode.HOLDING else 0)] = p
        assert asm.junction_pressures(x, 0.0) == pytest.approx([p], rel=1e-12)

    def test_no_junctions(self):
        asm = Assembly(loop_network())
        assert asm.junction_pressures(asm.rest_state(), 0.0).size == 0

    def test_bundled_net_junction_pressure_from_pipe_balance(self):
        asm = Assembly(load_network(BUNDLED_NET))
        eq = solve_equilibrium(asm, 0.0)
        # node 7 is fed by plain pipe 14 from node 6: steady state gives p7 = p6 - friction
        q14 = eq.x[asm.layout.slices["E14"]][0]
        p6 = eq.x[asm.layout.slices["N6"]][0]
        p7 = p6 - asm.subsystem("E14").pipe.friction(q14)
        assert eq.z_K[0] == pytest.approx(p7, rel=1e-6)
        assert asm.junction_pressures(eq.x, 0.0)[0] == pytest.approx(p7, rel=1e-6)


class TestManifold:
    def test_projection_example(self):
        asm = Assembly(load_network(junction_doc()))
        x = asm.rest_state()
        x[asm.layout.slices["E3"].start] = 1e-3  # into the junction
        x[asm.layout.slices["E2"].start] = 0.0  # out of it
        y = asm.project_onto_manifold(x)
        assert y[asm.layout.slices["E3"].start] == pytest.approx(5e-4, rel=1e-12)
        assert y[asm.layout.slices["E2"].start] == pytest.approx(5e-4, rel=1e-12)

    def test_identity_on_manifold(self, full):
        asm, eq = full
        assert np.array_equal(asm.project_onto_manifold(eq.x), eq.x) or np.allclose(
            asm.project_onto_manifold(eq.x), eq.x, rtol=0, atol=1e-18)

    def test_residual_after_projection(self, full):
        asm, eq = full
        for x in random_states(asm, eq, 50, spread=2.0):
            assert asm.manifold_residual(asm.project_onto_manifold(x)) <= 1e-12

    def test_minimal_correction(self, full):
        asm, eq = full
        x = next(random_states(asm, eq, 1, spread=1.0, seed=3))
        y = asm.project_onto_manifold(x)
        J = asm.J
        dq = (y - x)[asm.q_index]
        # J-weighted correction is orthogonal (in the J metric) to every admissible direction
        null = np.linalg.svd(asm.B_KE)[2][asm.B_KE.shape[0]:]
        assert np.max(np.abs(null @ (J * dq))) <= 1e-12 * np.max(np.abs(J * dq))


class TestIntegrator:
    def test_matrix_exponential_oracle(self):
        A, b = linear_pump()
        xb = HOLD.equilibrium(0.0)
        assert np.all(np.abs(A @ xb + b) <= 1e-12 * (np.abs(A) @ np.abs(xb) + np.abs(b)))
        for t_end in (0.1, 1.0):
            x, ref = pump_error(1e-4, t_end)
            assert np.all(np.abs(x - ref) <= 1e-8 * np.abs(ref) + 1e-8 * np.abs(ref).max())
            assert x[1] == pytest.approx(ref[1], rel=1e-8)

    def test_rk4_order(self):
        errs = []
        for dt in (1e-3, 5e-4, 2.5e-4):
            x, ref = pump_error(dt)
            errs.append(abs(x[1] - ref[1]))
        orders = [math.log2(errs[k] / errs[k + 1]) for k in range(2)]
        assert min(orders) >= 3.9, orders

    def test_zero_duration_run(self):
        g = loop_network()
        rec = run(g, Scenario(t_end=0.0))
        assert rec.t.tolist() == [0.0]
        assert rec.segments[0].X.shape[0] == 1

    def test_minimal_net_from_rest(self):
        rec = run(loop_network(), Scenario(t_end=20.0, dt=1e-3), from_rest=True)
        assert rec.status == "ok"
        _, q = rec.channel("E2.q")
        assert np.all(np.isfinite(q))
        assert q[-1] == pytest.approx(2e-3, rel=1e-3)

    def test_rk45_agrees_with_rk4(self):
        scn = Scenario(t_end=0.5, dt=1e-3, events=[Event(0.2, "setpoint", targets=["E2"], field="q_set", value=2.5e-3)])
        a = run(loop_network(), scn)
        b = run(loop_network(), scn, integrator="rk45")
        xa, xb = a.segments[-1].X[-1], b.segments[-1].X[-1]
        scale = a.segments[-1].asm.state_scale(xa)
        assert np.max(np.abs(xa - xb) / scale) < 1e-5

    def test_nan_aborts_with_snapshot(self):
        rec = run(loop_network(), Scenario(t_end=1.0, dt=0.05), substeps=1, stride=1)
        assert rec.status == "numeric_abort"
        assert rec.segments and np.all(np.isfinite(rec.segments[-1].X[0]))


class TestEvents:
    def test_disconnect_last_forming_dgu_rejected(self):
        scn = Scenario(t_end=1.0, events=[Event(0.5, "disconnect", edge=1)])
        with pytest.raises(TopologyError):
            run(load_network(BUNDLED_NET), scn)

    def test_missing_edge(self):
        scn = Scenario(t_end=1.0, events=[Event(0.5, "disconnect", edge=99)])
        with pytest.raises(ScenarioError, match="missing edge 99"):
            run(load_network(BUNDLED_NET), scn)

    def test_reconnect_is_bit_identical(self):
        g = load_network(BUNDLED_NET)
        a = Assembly(g)
        g.set_active(5, False)
        Assembly(g)
        g.set_active(5, True)
        b = Assembly(g)
        for m in ("B_DE", "B_KE", "Lg_inv", "proj", "EF", "NF"):
            assert getattr(a, m).tobytes() == getattr(b, m).tobytes()

    def test_dgu3_connect_validates(self):
        g = full_assembly().graph
        from dhnsim.topology import validate_network
        assert validate_network(g).ok

    def test_perturbation_reproducible(self):
        ev = Event(0.0, "perturb", magnitude=0.1, seed=7)
        g1, g2, g3 = (load_network(BUNDLED_NET) for _ in range(3))
        f1, f2 = _perturb(g1, ev), _perturb(g2, ev)
        f3 = _perturb(g3, Event(0.0, "perturb", magnitude=0.1, seed=8))
        assert f1 == f2 and f1 != f3
        assert all(abs(v - 1) <= 0.1 for d in f1.values() for v in d.values())
        assert g1.edges[1].pump == g2.edges[1].pump


class TestScenarioInvariants:
    def test_manifold_residual(self, run_a):
        worst = max(s.PW[:, 4].max() for s in run_a.segments)
        assert worst <= 1e-8

    def test_final_state_converges(self, run_a):
        seg = run_a.segments[-1]
        err = np.abs(seg.X[-1] - seg.eq.x) / seg.asm.state_scale(seg.eq.x)
        worst = seg.names[int(np.argmax(err))]
        assert err.max() <= 1e-4, f"{worst}: {err.max():.3g}"

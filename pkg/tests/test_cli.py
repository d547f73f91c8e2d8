from __future__ import annotations

import copy
import csv
import json

import numpy as np
import pytest
import yaml

from conftest import BUNDLED_NET, loop_network_doc
from dhnsim import simulate
from dhnsim.cli import CERT_FAIL, INFEASIBLE, INVALID, NUMERIC, OK, main
from dhnsim.engine import Assembly
from dhnsim.io import dump_state, load_network, load_state, state_parts
from dhnsim.passivity import solve_equilibrium


def write(path, doc):
    path.write_text(yaml.safe_dump(doc, sort_keys=False))
    return path


@pytest.fixture
def loop_files(tmp_path):
    net = write(tmp_path / "net.yaml", loop_network_doc())
    scn = write(tmp_path / "scn.yaml", {
        "name": "step", "network": "net.yaml", "t_end": 1.0, "dt": 1e-3, "stride": 10,
        "events": [{"time": 0.5, "action": "setpoint", "target": "E2", "field": "q_set", "value": 2.6e-3}],
    })
    return net, scn


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


class TestExitCodes:
    def test_validate_bundled(self, capsys):
        assert main(["validate", "--network", str(BUNDLED_NET)]) == OK
        assert capsys.readouterr().out.strip().endswith("PASS")

    def test_validate_without_forming_dgu(self, tmp_path, capsys):
        doc = loop_network_doc()
        doc["edges"][0]["mode"] = "vsp"
        doc["edges"][0]["q_set"] = 2e-3
        assert main(["validate", "--network", str(write(tmp_path / "bad.yaml", doc))]) == INVALID
        assert "FAIL" in capsys.readouterr().out

    def test_malformed_yaml(self, tmp_path):
        p = tmp_path / "broken.yaml"
        p.write_text("nodes: [1, 2\n")
        assert main(["validate", "--network", str(p)]) == INVALID

    def test_unknown_event_edge(self, tmp_path, loop_files):
        net, _ = loop_files
        scn = write(tmp_path / "s.yaml", {"t_end": 1.0, "events": [{"time": 0.5, "action": "disconnect", "edge": 9}]})
        assert main(["validate", "--network", str(net), "--scenario", str(scn)]) == INVALID

    def test_infeasible_setpoints(self, tmp_path):
        net = write(tmp_path / "low.yaml", loop_network_doc(p_set=2.0e4))
        assert main(["equilibrium", "--network", str(net), "--out", str(tmp_path / "eq.yaml")]) == INFEASIBLE

    def test_numeric_abort(self, tmp_path, loop_files, monkeypatch):
        net, scn = loop_files
        # step far outside the stability region, no refinement
        monkeypatch.setattr(simulate, "STABILITY", 1e4)
        monkeypatch.setattr(simulate, "MAX_REFINE", 0)
        out = tmp_path / "o"
        assert main(["run", "--scenario", str(scn), "--out", str(out), "--dt", "0.05"]) == NUMERIC
        assert json.loads((out / "summary.json").read_text())["status"] == "numeric_abort"

    def test_certificate_failure_code(self, tmp_path, loop_files, monkeypatch):
        net, scn = loop_files
        from dhnsim import cli

        real = cli.eip_certificate

        def flipped(rec):
            bad = copy.deepcopy(rec)
            for seg in bad.segments:
                seg.S = -seg.S - 1.0
            return real(bad)

        monkeypatch.setattr(cli, "eip_certificate", flipped)
        assert main(["certify", "--scenario", str(scn), "--out", str(tmp_path / "c")]) == CERT_FAIL


class TestRun:
    def test_zero_duration_writes_header_only(self, tmp_path, loop_files):
        net, _ = loop_files
        scn = write(tmp_path / "zero.yaml", {"t_end": 0.0})
        out = tmp_path / "o"
        assert main(["run", "--scenario", str(scn), "--network", str(net), "--out", str(out)]) == OK
        rows = read_csv(out / "trajectory.csv")
        assert len(rows) == 1 and rows[0][0] == "time_s"

    def test_deterministic(self, tmp_path, loop_files):
        _, scn = loop_files
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["run", "--scenario", str(scn), "--out", str(a)]) == OK
        assert main(["run", "--scenario", str(scn), "--out", str(b)]) == OK
        assert (a / "trajectory.csv").read_bytes() == (b / "trajectory.csv").read_bytes()

    def test_columns_carry_units(self, tmp_path, loop_files):
        _, scn = loop_files
        assert main(["run", "--scenario", str(scn), "--out", str(tmp_path / "o")]) == OK
        rows = read_csv(tmp_path / "o" / "trajectory.csv")
        head = rows[0]
        assert head[0] == "time_s"
        assert all("[" in h and h.endswith("]") for h in head[1:])
        assert "E2.q[m3/s]" in head
        t = np.array([float(r[0]) for r in rows[1:]])
        assert t[0] == 0.0 and t[-1] == 1.0 and np.all(np.diff(t) >= 0)
        # one row on each side of an event, nowhere else
        assert t[1:][np.diff(t) == 0].tolist() == [0.5]

    def test_certify_reproduces_trajectory(self, tmp_path, loop_files):
        _, scn = loop_files
        assert main(["run", "--scenario", str(scn), "--out", str(tmp_path / "r")]) == OK
        traj = tmp_path / "r" / "trajectory.csv"
        out = tmp_path / "c"
        assert main(["certify", "--scenario", str(scn), "--out", str(out), "--trajectory", str(traj)]) == OK
        doc = json.loads((out / "certificate.json").read_text())
        assert doc["ok"] and doc["trajectory_reproduced"]

    def test_certify_rejects_foreign_trajectory(self, tmp_path, loop_files):
        _, scn = loop_files
        traj = tmp_path / "fake.csv"
        traj.write_text("time_s\n0.0\n")
        assert main(["certify", "--scenario", str(scn), "--out", str(tmp_path / "c"),
                     "--trajectory", str(traj)]) == INVALID

    def test_seed_override_changes_perturbation(self, tmp_path, loop_files):
        net, _ = loop_files
        scn = write(tmp_path / "p.yaml", {"t_end": 0.05, "events": [{"time": 0, "action": "perturb", "seed": 1}]})
        outs = []
        for seed in ("1", "1", "2"):
            out = tmp_path / f"s{len(outs)}"
            assert main(["run", "--scenario", str(scn), "--network", str(net), "--out", str(out),
                         "--seed", seed]) == OK
            outs.append((out / "trajectory.csv").read_bytes())
        assert outs[0] == outs[1] != outs[2]


class TestStateFile:
    def test_round_trip(self, tmp_path):
        out = tmp_path / "eq.yaml"
        assert main(["equilibrium", "--network", str(BUNDLED_NET), "--out", str(out)]) == OK
        asm = Assembly(load_network(BUNDLED_NET))
        eq = solve_equilibrium(asm, 0.0)
        loaded = load_state(out)
        x = np.concatenate([loaded[k] for k in asm.layout.keys])
        np.testing.assert_array_equal(x, eq.x)
        doc = yaml.safe_load(out.read_text())
        again = tmp_path / "again.yaml"
        dump_state(state_parts(asm.layout, x), again, {k: v for k, v in doc.items() if k != "state"})
        assert again.read_bytes() == out.read_bytes()

    def test_run_from_state_file_starts_there(self, tmp_path, loop_files):
        net, _ = loop_files
        st = tmp_path / "eq.yaml"
        assert main(["equilibrium", "--network", str(net), "--out", str(st)]) == OK
        scn = write(tmp_path / "s.yaml", {"t_end": 0.1, "network": "net.yaml", "initial": {"file": "eq.yaml"}})
        out = tmp_path / "o"
        assert main(["run", "--scenario", str(scn), "--out", str(out)]) == OK
        rows = read_csv(out / "trajectory.csv")
        head = rows[0]
        state = load_state(st)
        q = float(rows[1][head.index("E2.q[m3/s]")])
        assert q == state["E2"][0]


class TestScenarioPaper:
    @pytest.fixture(scope="class")
    @classmethod
    def out(cls, tmp_path_factory):
        out = tmp_path_factory.mktemp("bundled_a")
        assert main(["scenario-paper", "a", "--out", str(out)]) == OK
        return out

    def test_outputs(self, out):
        for name in ("trajectory.csv", "figures.csv", "summary.json", "certificate.json"):
            assert (out / name).exists(), name

    def test_summary_fields(self, out):
        s = json.loads((out / "summary.json").read_text())
        for k in ("status", "runtime_s", "segments", "certificate", "tracking", "max_power_residual_rel",
                  "max_manifold_residual"):
            assert k in s, k
        events = {row["event"] for row in s["tracking"]}
        assert {5.0, 20.0, 30.0, 40.0} <= events
        row = next(r for r in s["tracking"] if r["channel"].endswith("p_P"))
        assert {"max_dev", "settle_0.4pct_s"} <= set(row)

    def test_figure_channels(self, out):
        head = read_csv(out / "figures.csv")[0]
        for key in ("E1", "E2", "E7", "E15", "N4"):
            assert any(h.startswith(f"{key}.p_P_dev") for h in head), key
        for key in ("E2", "E4", "E5", "E6", "E7", "E8", "E25"):
            assert any(h.startswith(f"{key}.q_dev") for h in head), key

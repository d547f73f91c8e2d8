from __future__ import annotations

import copy

import pytest

from dhnsim.io import bundled, load_network, read_yaml
from dhnsim.scenario import load_scenario
from dhnsim.simulate import run

BUNDLED_NET = bundled("network_three_layer.yaml")

DEFAULTS = read_yaml(BUNDLED_NET)["defaults"]


def loop_network_doc(p_set: float = 4.0e5, q_set: float = 2.0e-3) -> dict:
    """DGU (grid forming) + supply pipe + valve consumer + return pipe, holding node on the return."""
    return {
        "defaults": copy.deepcopy(DEFAULTS),
        "nodes": [
            {"id": 1, "kind": "holding", "p_set": 2.0e5},
            {"id": 2, "kind": "capacitive"},
            {"id": 3, "kind": "capacitive"},
            {"id": 4, "kind": "capacitive"},
        ],
        "edges": [
            {"id": 1, "kind": "dgu", "mode": "form", "source": 1, "target": 2, "p_set": p_set},
            {"id": 2, "kind": "consumer", "mode": "valve", "source": 3, "target": 4, "q_set": q_set},
            {"id": 3, "kind": "pipe", "source": 2, "target": 3, "length": 200},
            {"id": 4, "kind": "pipe", "source": 4, "target": 1, "length": 200},
        ],
    }


def loop_network(**kw):
    return load_network(loop_network_doc(**kw))


@pytest.fixture
def bundled_net():
    return load_network(BUNDLED_NET)


_RUNS: dict[str, object] = {}


def bundled_run(which: str):
    """Bundled scenario run, shared across test modules."""
    if which not in _RUNS:
        scn = load_scenario(bundled(f"scenario_{which}.yaml"))
        _RUNS[which] = run(load_network(scn.network), scn)
    return _RUNS[which]


@pytest.fixture(scope="session")
def run_a():
    return bundled_run("a")


@pytest.fixture(scope="session")
def run_b():
    return bundled_run("b")


def full_assembly():
    """Bundled network with every edge connected (all eleven closed-loop modes present)."""
    from dhnsim.engine import Assembly

    g = load_network(BUNDLED_NET)
    g.set_active(3, True)
    asm = Assembly(g)
    asm.set_setpoints({"E25": (float("nan"), 3.0e-3)})
    return asm


@pytest.fixture(scope="session")
def full():
    from dhnsim.passivity import solve_equilibrium

    asm = full_assembly()
    return asm, solve_equilibrium(asm, 0.0)


# acceptance lines by criterion number, printed after the run
ACCEPTANCE: dict[int, list[str]] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            for line in ACCEPTANCE[k]:
                terminalreporter.write_line(line)

"""Command-line front end.

Verbs::

    dhnsim validate --network NET [--scenario SCN]
    dhnsim equilibrium --network NET [--scenario SCN] --out state.yaml
    dhnsim run --scenario SCN [--network NET] --out DIR [--dt --integrator --seed --saturation --from-rest]
    dhnsim certify --scenario SCN [--network NET] --out DIR [--trajectory CSV]
    dhnsim scenario-paper {a,b} --out DIR

Exit codes: 0 ok, 1 certificate violated, 2 validation failure, 3 infeasible
setpoints, 4 numeric abort.
"""

from __future__ import annotations

import argparse
import dataclasses
import filecmp
import sys
from pathlib import Path

import yaml

from .controllers import GainConditionError
from .engine import Assembly
from .io import bundled, dump_state, load_network, state_parts
from .output import summary, write_csv, write_json
from .passivity import InfeasibleSetpoints, eip_certificate, lyapunov_audit, solve_equilibrium
from .scenario import Scenario, ScenarioError, SetpointSchedule, load_scenario
from .simulate import Simulation, run
from .topology import TopologyError, validate_network

OK, CERT_FAIL, INVALID, INFEASIBLE, NUMERIC = 0, 1, 2, 3, 4

BUNDLED = {"a": "scenario_a.yaml", "b": "scenario_b.yaml"}


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dhnsim", description="District heating network simulator")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp, out_required=False):
        sp.add_argument("--network", type=Path, help="network YAML (default: the scenario's network entry)")
        sp.add_argument("--scenario", type=Path, help="scenario YAML")
        sp.add_argument("--out", type=Path, required=out_required, help="output directory (state file for equilibrium)")

    def run_flags(sp):
        sp.add_argument("--dt", type=float, help="output step in seconds")
        sp.add_argument("--integrator", choices=["rk4", "rk45"])
        sp.add_argument("--seed", type=int, help="seed for every perturb event")
        sp.add_argument("--saturation", choices=["on", "off"], help="valve command saturation")
        sp.add_argument("--from-rest", action="store_true", help="start from zero flows instead of the equilibrium")
        sp.add_argument("--stride", type=int, help="record every n-th output step")

    common(sub.add_parser("validate", help="check network topology, gains and scenario events"))
    common(sub.add_parser("equilibrium", help="solve the initial steady state and write it"), True)
    sp = sub.add_parser("run", help="simulate a scenario")
    common(sp, True)
    run_flags(sp)
    sp = sub.add_parser("certify", help="rerun a scenario and evaluate the passivity certificate")
    common(sp, True)
    run_flags(sp)
    sp.add_argument("--trajectory", type=Path, help="CSV the rerun must reproduce byte for byte")
    sp = sub.add_parser("scenario-paper", help="run a bundled scenario with figure channels")
    sp.add_argument("which", choices=sorted(BUNDLED))
    sp.add_argument("--out", type=Path, required=True)
    run_flags(sp)
    return p


def _load(args):
    scn = load_scenario(args.scenario) if getattr(args, "scenario", None) else Scenario(t_end=0.0)
    net = getattr(args, "network", None) or (Path(scn.network) if scn.network else None)
    if net is None:
        raise ScenarioError("no network given (use --network or a scenario with a network entry)")
    return load_network(net), scn


def _overrides(args, scn: Scenario) -> Scenario:
    events = scn.events
    if getattr(args, "seed", None) is not None:
        events = [dataclasses.replace(e, seed=args.seed) if e.action == "perturb" else e for e in events]
    kw = {"events": events}
    if getattr(args, "saturation", None):
        kw["saturation"] = args.saturation == "on"
    if getattr(args, "integrator", None):
        kw["integrator"] = args.integrator
    if getattr(args, "dt", None) is not None:
        kw["dt"] = args.dt
    if getattr(args, "stride", None) is not None:
        kw["stride"] = args.stride
    return dataclasses.replace(scn, **kw)


def _replay(graph, scn: Scenario) -> list[str]:
    """Apply every event to a copy of the network without integrating."""
    sim = Simulation(graph.copy(), scn, scn.saturation)
    notes = []
    for ev in scn.events:
        sim.apply_event(ev, None)
        if ev.action in ("connect", "disconnect"):
            notes.append(f"t={ev.time:g}: {ev.action} E{ev.edge} ok")
    SetpointSchedule(sim.base_setpoints(), scn.events)
    return notes


def cmd_validate(args) -> int:
    graph, scn = _load(args)
    rep = validate_network(graph)
    print(f"nodes: {len(graph.active_nodes())}  edges: {len(graph.active_edges())}  layers: {rep.n_layers}")
    for w in rep.warnings:
        print(f"warning: {w}")
    for e in rep.errors:
        print(f"error: {e}")
    if not rep.ok:
        print("FAIL")
        return INVALID
    Assembly(graph)  # gain gates and incidence partition
    for line in _replay(graph, scn):
        print(line)
    print("PASS")
    return OK


def _initial_assembly(graph, scn: Scenario) -> Assembly:
    sim = Simulation(graph, scn, scn.saturation)
    for ev in scn.events:
        if ev.time <= 0:
            sim.apply_event(ev, None)
    sched = SetpointSchedule(sim.base_setpoints(), scn.events)
    asm, _ = sim.assemble(None)
    base, _ = sched.segment(0.0, 0.0)
    asm.set_setpoints(base, None, 0.0)
    return asm


def cmd_equilibrium(args) -> int:
    graph, scn = _load(args)
    asm = _initial_assembly(graph, scn)
    eq = solve_equilibrium(asm, 0.0)
    dump_state(state_parts(asm.layout, eq.x), args.out, {"t": 0.0, "residual": float(eq.residual)})
    print(f"equilibrium residual {eq.residual:.3e}, written to {args.out}")
    return OK


def _run(args, scn: Scenario, graph, out: Path, figures: bool = False):
    out.mkdir(parents=True, exist_ok=True)
    rec = run(graph, scn, from_rest=getattr(args, "from_rest", False))
    write_csv(rec, out / "trajectory.csv")
    if figures:
        write_csv(rec, out / "figures.csv", channels="figures")
    summ = summary(rec)
    write_json(summ, out / "summary.json")
    print(f"{scn.name}: status {rec.status}, {rec.t.size} samples, {rec.runtime:.1f} s")
    return rec, summ


def cmd_run(args) -> int:
    graph, scn = _load(args)
    rec, _ = _run(args, _overrides(args, scn), graph, args.out)
    return OK if rec.status == "ok" else NUMERIC


def _certificate_doc(rec) -> dict:
    cert = eip_certificate(rec)
    audit = lyapunov_audit(rec)
    return {
        "ok": cert.ok and not audit,
        "eip": {"ok": cert.ok, "rows": [dataclasses.asdict(r) for r in cert.rows],
                "violations": [dataclasses.asdict(r) for r in cert.violations()]},
        "lyapunov_violations": audit,
    }


def cmd_certify(args) -> int:
    graph, scn = _load(args)
    rec, _ = _run(args, _overrides(args, scn), graph, args.out)
    doc = _certificate_doc(rec)
    if args.trajectory is not None:
        same = filecmp.cmp(args.trajectory, args.out / "trajectory.csv", shallow=False)
        doc["trajectory_reproduced"] = same
        if not same:
            print("error: rerun does not reproduce the given trajectory")
            write_json(doc, args.out / "certificate.json")
            return INVALID
    write_json(doc, args.out / "certificate.json")
    print("certificate " + ("PASS" if doc["ok"] else "FAIL"))
    if rec.status != "ok":
        return NUMERIC
    return OK if doc["ok"] else CERT_FAIL


def cmd_scenario_paper(args) -> int:
    path = bundled(BUNDLED[args.which])
    scn = _overrides(args, load_scenario(path))
    graph = load_network(scn.network)
    rec, summ = _run(args, scn, graph, args.out, figures=True)
    write_json(_certificate_doc(rec), args.out / "certificate.json")
    for row in summ["tracking"]:
        if "settle_0.4pct_s" in row:
            print(f"t={row['event']:>4g} {row['channel']:>8}: max dev {row['max_dev']:.4f}, "
                  f"settle {row['settle_0.4pct_s']}")
    return OK if rec.status == "ok" else NUMERIC


VERBS = {"validate": cmd_validate, "equilibrium": cmd_equilibrium, "run": cmd_run, "certify": cmd_certify,
         "scenario-paper": cmd_scenario_paper}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        return VERBS[args.verb](args)
    except InfeasibleSetpoints as exc:
        print(f"infeasible setpoints: {exc}", file=sys.stderr)
        return INFEASIBLE
    except (TopologyError, ScenarioError, GainConditionError, yaml.YAMLError, KeyError, TypeError, ValueError,
            FileNotFoundError) as exc:
        print(f"validation failure: {exc}", file=sys.stderr)
        return INVALID


if __name__ == "__main__":
    sys.exit(main())

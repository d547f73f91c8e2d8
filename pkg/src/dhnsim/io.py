"""YAML network and scenario files.

Network file::

    defaults:                  # optional, merged into every item
      pressure_pump: {R_P: 1.0e6}        # J_P, C_P default to the RLC ratios
      flow_pump: {R_P: 1.0e10}
      valve: {C_v: 7.9e-5, characteristic: linear, s_min: 0.01}
      circuit_pipe: {length: 25, diameter: 0.0359, roughness: 4.5e-5}
      pipe: {diameter: 0.0825, roughness: 4.5e-5}
      mixing_pipe: {length: 25, diameter: 0.0825, roughness: 4.5e-5}
      capacitance: 5.0e-10
      pressure_ctl: {Q_I_inv: 3.64e-7}
      flow_ctl: {K_P: 2.0e6, Q_I_inv: 2.0e10}
      valve_ctl: {K_P: 1.0e4, Q_I_inv: 1.0e4}
    nodes:
      - {id: 4, kind: holding, p_set: 2.0e5}
      - {id: 7, kind: junction}
      - {id: 1, kind: capacitive}
    edges:
      - {id: 1, kind: dgu, mode: form, source: 4, target: 1, p_set: 1.5e6}
      - {id: 9, kind: pipe, source: 1, target: 3, length: 350}

Any item may override ``pump``, ``valve``, ``pipe`` (``length``, ``diameter``,
``roughness`` or explicit ``J``, ``a``, ``b``) and controller blocks.
``active: false`` starts an edge disconnected.
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .components import PipeHydraulics, PumpParams, ValveParams
from .controllers import PumpFlowCtl, PumpPressureCtl, ValveFlowCtl
from .topology import Edge, NetworkGraph, Node, TopologyError

DATA = Path(__file__).parent / "data"


def read_yaml(src) -> dict[str, Any]:
    if isinstance(src, dict):
        return src
    with open(src) as fh:
        return yaml.safe_load(fh)


def _merge(base: dict | None, over: dict | None) -> dict:
    out = dict(base or {})
    out.update(over or {})
    return out


def _pump(spec: dict) -> PumpParams:
    if "J_P" in spec and "C_P" in spec:
        return PumpParams(float(spec["R_P"]), float(spec["J_P"]), float(spec["C_P"]))
    return PumpParams.from_resistance(float(spec["R_P"]))


def _valve(spec: dict) -> ValveParams:
    kw = {k: spec[k] for k in ("characteristic", "rangeability", "s_min") if k in spec}
    return ValveParams(C_v=float(spec["C_v"]), **{k: (float(v) if k != "characteristic" else v) for k, v in kw.items()})


def _pipe(spec: dict) -> PipeHydraulics:
    if {"J", "a", "b"} <= spec.keys():
        return PipeHydraulics(float(spec["J"]), float(spec["a"]), float(spec["b"]))
    return PipeHydraulics.from_geometry(float(spec["length"]), float(spec["diameter"]), float(spec.get("roughness", 4.5e-5)))


def _q_i(spec: dict) -> float:
    if "Q_I" in spec:
        return float(spec["Q_I"])
    return 1.0 / float(spec["Q_I_inv"])


def load_network(src) -> NetworkGraph:
    doc = read_yaml(src)
    dflt = doc.get("defaults", {})
    g = NetworkGraph()
    for item in doc["nodes"]:
        kind = item["kind"]
        if kind == "holding":
            pump = _pump(_merge(dflt.get("pressure_pump"), item.get("pump")))
            ctl_spec = _merge(dflt.get("pressure_ctl"), item.get("pressure_ctl"))
            ctl = PumpPressureCtl(float(item["p_set"]), _q_i(ctl_spec), ctl_spec.get("R_p"))
            g.add_node(Node(int(item["id"]), kind, pump=pump, pressure_ctl=ctl))
        elif kind == "capacitive":
            g.add_node(Node(int(item["id"]), kind, capacitance=float(item.get("capacitance", dflt.get("capacitance", math.nan)))))
        elif kind == "junction":
            g.add_node(Node(int(item["id"]), kind))
        else:
            raise TopologyError(f"node {item['id']}: unknown kind {kind!r}")
    for item in doc["edges"]:
        g.add_edge(_edge(item, dflt))
    return g


def _edge(item: dict, dflt: dict) -> Edge:
    kind, mode = item["kind"], item.get("mode", "plain" if item["kind"] == "pipe" else "valve")
    pipe_key = {"dgu": "circuit_pipe", "consumer": "circuit_pipe", "pipe": "pipe", "mixing": "mixing_pipe"}[kind]
    geo = {k: item[k] for k in ("length", "diameter", "roughness", "J", "a", "b") if k in item}
    pipe = _pipe(_merge(_merge(dflt.get(pipe_key), geo), item.get("pipe")))
    valve = None
    if kind != "pipe":
        valve = _valve(_merge(dflt.get("valve"), item.get("valve")))
    pump = None
    has_pump = kind == "dgu" or mode in ("vsp", "boost")
    if has_pump:
        which = "flow_pump" if mode == "vsp" else "pressure_pump"
        pump = _pump(_merge(dflt.get(which), item.get("pump")))
    pctl = fctl = vctl = None
    if "p_set" in item:
        spec = _merge(dflt.get("pressure_ctl"), item.get("pressure_ctl"))
        pctl = PumpPressureCtl(float(item["p_set"]), _q_i(spec), spec.get("R_p"))
    if "q_set" in item:
        if mode == "vsp":
            spec = _merge(dflt.get("flow_ctl"), item.get("flow_ctl"))
            fctl = PumpFlowCtl(float(item["q_set"]), float(spec["K_P"]), _q_i(spec), pump.C_P)
        else:
            spec = _merge(dflt.get("valve_ctl"), item.get("valve_ctl"))
            vctl = ValveFlowCtl(float(item["q_set"]), float(spec["K_P"]), _q_i(spec))
    return Edge(
        id=int(item["id"]), kind=kind, source=int(item["source"]), target=int(item["target"]), pipe=pipe,
        mode=mode, pump=pump, valve=valve, pressure_ctl=pctl, flow_ctl=fctl, valve_ctl=vctl,
        active=bool(item.get("active", True)),
    )


def bundled(name: str) -> Path:
    return DATA / name


def state_parts(layout, x) -> dict[str, dict[str, float]]:
    """Named per-subsystem view of a flat state vector."""
    out = {}
    for k in layout.keys:
        sl = layout.slices[k]
        names = [n.split(".", 1)[1] for n in layout.names[sl]]
        out[k] = {n: float(v) for n, v in zip(names, x[sl])}
    return out


def dump_state(parts: dict[str, dict[str, float]], path, meta: dict | None = None) -> None:
    """Write a state file; floats are emitted with ``repr`` so reloading is exact."""
    doc = dict(meta or {})
    doc["state"] = parts
    with open(path, "w") as fh:
        yaml.safe_dump(doc, fh, sort_keys=False)


def load_state(src) -> dict[str, np.ndarray]:
    doc = read_yaml(src)
    state = doc.get("state")
    if not isinstance(state, dict):
        raise ValueError("state file has no 'state' mapping")
    return {str(k): np.array([float(v) for v in sub.values()]) for k, sub in state.items()}

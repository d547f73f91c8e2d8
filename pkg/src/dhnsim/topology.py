"""Typed DHN digraph: validation, hydraulic layers, chords and incidence blocks."""

from __future__ import annotations

import copy
from collections import deque
from dataclasses import dataclass, field
from enum import Enum

import networkx as nx
import numpy as np

from .components import PipeHydraulics, PumpParams, ValveParams
from .controllers import PumpFlowCtl, PumpPressureCtl, ValveFlowCtl


class NodeType(str, Enum):
    HOLDING = "holding"
    CAPACITIVE = "capacitive"
    JUNCTION = "junction"


class EdgeType(str, Enum):
    DGU = "dgu"
    CONSUMER = "consumer"
    PIPE = "pipe"
    MIXING = "mixing"


EDGE_ORDER = {EdgeType.DGU: 0, EdgeType.CONSUMER: 1, EdgeType.PIPE: 2, EdgeType.MIXING: 3}
NODE_ORDER = {NodeType.HOLDING: 0, NodeType.CAPACITIVE: 1, NodeType.JUNCTION: 2}

EDGE_MODES = {
    EdgeType.DGU: {"form", "valve", "vsp"},
    EdgeType.CONSUMER: {"boost", "valve", "vsp"},
    EdgeType.PIPE: {"plain", "boost"},
    EdgeType.MIXING: {"valve"},
}


class TopologyError(ValueError):
    pass


@dataclass
class Node:
    id: int
    kind: NodeType
    capacitance: float | None = None
    pump: PumpParams | None = None
    pressure_ctl: PumpPressureCtl | None = None

    def __post_init__(self) -> None:
        self.kind = NodeType(self.kind)
        if self.kind is NodeType.CAPACITIVE and not (self.capacitance and self.capacitance > 0):
            raise TopologyError(f"node {self.id}: capacitance must be positive")
        if self.kind is NodeType.HOLDING:
            if self.pump is None or self.pressure_ctl is None:
                raise TopologyError(f"node {self.id}: pressure holding needs a pump and a pressure controller")
            if not self.pressure_ctl.setpoint > 0:
                raise TopologyError(f"node {self.id}: holding pressure setpoint must be positive")

    @property
    def key(self) -> str:
        return f"N{self.id}"


@dataclass
class Edge:
    id: int
    kind: EdgeType
    source: int
    target: int
    pipe: PipeHydraulics
    mode: str = "plain"
    pump: PumpParams | None = None
    valve: ValveParams | None = None
    pressure_ctl: PumpPressureCtl | None = None
    flow_ctl: PumpFlowCtl | None = None
    valve_ctl: ValveFlowCtl | None = None
    active: bool = True

    def __post_init__(self) -> None:
        self.kind = EdgeType(self.kind)
        if self.mode not in EDGE_MODES[self.kind]:
            raise TopologyError(f"edge {self.id}: mode {self.mode!r} invalid for {self.kind.value}")
        if self.source == self.target:
            raise TopologyError(f"edge {self.id}: self-loop at node {self.source}")
        needs_pump = self.mode in {"form", "vsp", "boost"} or (self.kind is EdgeType.DGU)
        if self.kind is EdgeType.CONSUMER and self.mode == "valve" and self.pump is not None:
            raise TopologyError(f"edge {self.id}: valve-mode consumer cannot carry a pump")
        if needs_pump and self.pump is None:
            raise TopologyError(f"edge {self.id}: mode {self.mode} needs a pump")
        if self.kind in (EdgeType.DGU, EdgeType.CONSUMER, EdgeType.MIXING) and self.valve is None:
            raise TopologyError(f"edge {self.id}: {self.kind.value} needs a valve")
        if self.uses_pressure_ctl and self.pressure_ctl is None:
            raise TopologyError(f"edge {self.id}: mode {self.mode} needs a pump pressure controller")
        if self.mode == "vsp" and self.flow_ctl is None:
            raise TopologyError(f"edge {self.id}: vsp mode needs a pump flow controller")
        if self.uses_valve_ctl and self.valve_ctl is None:
            raise TopologyError(f"edge {self.id}: mode {self.mode} needs a valve flow controller")

    @property
    def key(self) -> str:
        return f"E{self.id}"

    @property
    def uses_pressure_ctl(self) -> bool:
        return self.mode in {"form", "boost"} or (self.kind is EdgeType.DGU and self.mode == "valve")

    @property
    def uses_valve_ctl(self) -> bool:
        return self.kind is EdgeType.MIXING or (self.kind in (EdgeType.DGU, EdgeType.CONSUMER) and self.mode in {"valve", "boost"})


@dataclass
class ValidationReport:
    errors: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    n_layers: int = 0

    @property
    def ok(self) -> bool:
        return not self.errors

    def raise_for_errors(self) -> None:
        if self.errors:
            raise TopologyError("; ".join(self.errors))


@dataclass
class HydraulicLayers:
    layer: dict[int, int]
    count: int


@dataclass
class IncidencePartition:
    B_DE: np.ndarray
    B_KE: np.ndarray
    edges: list[int]
    delta_nodes: list[int]
    junctions: list[int]

    @property
    def full(self) -> np.ndarray:
        return np.vstack([self.B_DE, self.B_KE])


class NetworkGraph:
    """Typed digraph with plug-and-play activation flags on edges.

    A node is active when at least one active edge touches it.
    """

    def __init__(self, nodes: list[Node] | None = None, edges: list[Edge] | None = None) -> None:
        self.nodes: dict[int, Node] = {}
        self.edges: dict[int, Edge] = {}
        for n in nodes or []:
            self.add_node(n)
        for e in edges or []:
            self.add_edge(e)

    def add_node(self, node: Node) -> None:
        if node.id in self.nodes:
            raise TopologyError(f"duplicate node id {node.id}")
        self.nodes[node.id] = node

    def add_edge(self, edge: Edge) -> None:
        if edge.id in self.edges:
            raise TopologyError(f"duplicate edge id {edge.id}")
        for end in (edge.source, edge.target):
            if end not in self.nodes:
                raise TopologyError(f"edge {edge.id} references unknown node {end}")
        self.edges[edge.id] = edge

    def copy(self) -> NetworkGraph:
        return copy.deepcopy(self)

    def set_active(self, edge_id: int, active: bool) -> None:
        if edge_id not in self.edges:
            raise TopologyError(f"unknown edge {edge_id}")
        self.edges[edge_id].active = active

    def active_edges(self) -> list[Edge]:
        es = [e for e in self.edges.values() if e.active]
        return sorted(es, key=lambda e: (EDGE_ORDER[e.kind], e.id))

    def active_nodes(self) -> list[Node]:
        used = set()
        for e in self.edges.values():
            if e.active:
                used.update((e.source, e.target))
        ns = [self.nodes[i] for i in used]
        return sorted(ns, key=lambda n: (NODE_ORDER[n.kind], n.id))

    def to_multigraph(self) -> nx.MultiGraph:
        g = nx.MultiGraph()
        g.add_nodes_from(n.id for n in self.active_nodes())
        for e in self.active_edges():
            g.add_edge(e.source, e.target, key=e.id)
        return g


def compute_hydraulic_layers(graph: NetworkGraph) -> HydraulicLayers:
    nodes = [n.id for n in graph.active_nodes()]
    if not nodes:
        raise TopologyError("no nodes")
    g = nx.Graph()
    g.add_nodes_from(nodes)
    g.add_edges_from((e.source, e.target) for e in graph.active_edges() if e.kind is EdgeType.PIPE)
    comps = sorted((sorted(c) for c in nx.connected_components(g)), key=lambda c: c[0])
    layer = {n: k for k, comp in enumerate(comps) for n in comp}
    return HydraulicLayers(layer=layer, count=len(comps))


def validate_network(graph: NetworkGraph) -> ValidationReport:
    rep = ValidationReport()
    edges = graph.active_edges()
    nodes = graph.active_nodes()
    if not nodes:
        rep.errors.append("no nodes")
        return rep
    if not nx.is_connected(graph.to_multigraph()):
        rep.errors.append("(a) graph is not weakly connected")
    layers = compute_hydraulic_layers(graph)
    rep.n_layers = layers.count
    if layers.count != 2:
        rep.errors.append(f"(b) expected exactly 2 hydraulic layers, found {layers.count}")
    bridging = [
        e for e in edges
        if e.kind is EdgeType.DGU and e.mode == "form" and layers.layer[e.source] != layers.layer[e.target]
    ]
    if not bridging:
        rep.errors.append("(c) no grid-forming DGU bridges the hydraulic layers")
    counts = {k: sum(e.kind is k for e in edges) for k in EdgeType}
    if counts[EdgeType.DGU] < 1 or counts[EdgeType.CONSUMER] < 1 or counts[EdgeType.PIPE] < 2:
        rep.errors.append(
            f"(d) need D>=1, L>=1, P>=2; have D={counts[EdgeType.DGU]}, "
            f"L={counts[EdgeType.CONSUMER]}, P={counts[EdgeType.PIPE]}"
        )
    for e in edges:
        if e.flow_ctl is not None and e.pump is not None:
            kappa = e.flow_ctl.kappa(e.pump.C_P)
            if not kappa > 0:
                rep.errors.append(f"(e) edge {e.id}: flow controller gain condition violated (kappa={kappa:.3e})")
    dgu_nodes = {n for e in edges if e.kind is EdgeType.DGU for n in (e.source, e.target)}
    for e in edges:
        if e.kind is EdgeType.CONSUMER and {e.source, e.target} & dgu_nodes:
            rep.warnings.append(f"consumer {e.id} shares a node with a DGU")
    if not any(n.kind is NodeType.HOLDING for n in nodes):
        rep.warnings.append("no pressure holding node: the pressure level follows the initial state")
    return rep


def _bfs_tree(graph: NetworkGraph, layers: HydraulicLayers) -> set[int]:
    pipes = [e for e in graph.active_edges() if e.kind is EdgeType.PIPE]
    adj: dict[int, list[tuple[int, int]]] = {n.id: [] for n in graph.active_nodes()}
    for e in sorted(pipes, key=lambda e: e.id):
        adj[e.source].append((e.id, e.target))
        adj[e.target].append((e.id, e.source))
    tree: set[int] = set()
    seen: set[int] = set()
    for root in sorted(adj):
        if root in seen:
            continue
        seen.add(root)
        queue = deque([root])
        while queue:
            u = queue.popleft()
            for eid, v in adj[u]:
                if v not in seen:
                    seen.add(v)
                    tree.add(eid)
                    queue.append(v)
    for e in sorted(graph.active_edges(), key=lambda e: e.id):
        if e.kind is EdgeType.DGU and e.mode == "form" and layers.layer[e.source] != layers.layer[e.target]:
            tree.add(e.id)
            break
    return tree


def independent_flow_edges(graph: NetworkGraph) -> set[int]:
    validate_network(graph).raise_for_errors()
    tree = _bfs_tree(graph, compute_hydraulic_layers(graph))
    return {e.id for e in graph.active_edges()} - tree


def partition_incidence(graph: NetworkGraph) -> IncidencePartition:
    edges = graph.active_edges()
    nodes = graph.active_nodes()
    delta = [n.id for n in nodes if n.kind is not NodeType.JUNCTION]
    junc = [n.id for n in nodes if n.kind is NodeType.JUNCTION]
    row = {nid: k for k, nid in enumerate(delta + junc)}
    B = np.zeros((len(row), len(edges)))
    for j, e in enumerate(edges):
        if e.source not in row or e.target not in row:
            raise TopologyError(f"edge {e.id} has a dangling endpoint")
        B[row[e.target], j] = 1.0
        B[row[e.source], j] = -1.0
    nd = len(delta)
    return IncidencePartition(B[:nd].copy(), B[nd:].copy(), [e.id for e in edges], delta, junc)

"""Decompose aggregated destination flows into weighted paths and per-request routes.

The fleet LP aggregates every request sharing a destination into one flow.
This module splits such a flow back apart: first into weighted paths (and,
for general inputs, cycles), then into one route set per original request,
recovering per-request flows that sum back to the aggregate exactly.

All functions are pure; decompositions for different destinations are
independent and safe to run concurrently.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Sequence, Tuple

from .fleetlp import VrcpAssembly, TsoSolution
from .netmodel import TripRequest


class DecompositionError(Exception):
    """Flow imbalance, orphan path, or malformed decomposition input."""


@dataclass(frozen=True)
class PathFlow:
    """A node walk carrying `intensity` units of flow.

    `nodes` has one more entry than `edges`; a cycle repeats its first
    node at the end.
    """
    nodes: tuple
    edges: Tuple[int, ...]
    intensity: float

    @property
    def is_cycle(self) -> bool:
        return len(self.edges) > 0 and self.nodes[0] == self.nodes[-1]


@dataclass(frozen=True)
class Decomposition:
    paths: Tuple[PathFlow, ...]
    cycles: Tuple[PathFlow, ...]

    @property
    def components(self) -> int:
        return len(self.paths) + len(self.cycles)


@dataclass(frozen=True)
class RequestRouteSet:
    """All weighted routes serving one (merged) request."""
    request_index: int
    request: TripRequest
    paths: Tuple[PathFlow, ...]
    total_intensity: float


def _sort_key(node):
    # mixed node types fall back to repr ordering, as in the graph builder
    return (repr(node), )


def flow_divergence(edges: Sequence[tuple], flow: Mapping[int, float]) -> Dict:
    """Net outflow minus inflow per node (only nodes touched by flow)."""
    div: Dict = {}
    for ei, val in flow.items():
        tail, head = edges[ei]
        div[tail] = div.get(tail, 0.0) + val
        div[head] = div.get(head, 0.0) - val
    return div


def reconstruct(decomp: Decomposition) -> Dict[int, float]:
    """Edge-wise sum of all paths and cycles."""
    total: Dict[int, float] = {}
    for p in decomp.paths + decomp.cycles:
        for ei in p.edges:
            total[ei] = total.get(ei, 0.0) + p.intensity
    return total


def decompose_flow(edges: Sequence[tuple], flow: Mapping[int, float],
                   sources: Iterable, sinks: Iterable,
                   tol: float = 1e-9, crumb: float = 1e-9) -> Decomposition:
    """Split a conserved edge flow into weighted paths plus cycles.

    `edges[i] = (tail, head)` defines the directed graph; `flow` maps edge
    index to a nonnegative intensity. Mass may enter only at `sources` and
    leave only at `sinks`; any other imbalance beyond `tol` is an error
    naming the node. Values at or below `crumb` are dropped up front so
    solver noise cannot shatter into micro-paths. Deterministic: traces
    start at the smallest active source and always take the lowest-index
    outgoing edge with residual flow.
    """
    n_edges = len(edges)
    resid: Dict[int, float] = {}
    for ei, val in flow.items():
        if not 0 <= int(ei) < n_edges:
            raise DecompositionError(f"flow references unknown edge {ei}")
        v = float(val)
        if v < -tol:
            raise DecompositionError(f"negative flow {v:.3e} on edge {ei}")
        if v > crumb:
            resid[int(ei)] = v

    src = set(sources)
    snk = set(sinks)
    for node, d in flow_divergence(edges, flow).items():
        if d > tol and node not in src:
            raise DecompositionError(
                f"flow imbalance +{d:.3e} at node {node!r}, not a source")
        if d < -tol and node not in snk:
            raise DecompositionError(
                f"flow imbalance {d:.3e} at node {node!r}, not a sink")

    rdiv = flow_divergence(edges, resid)
    adj: Dict = {}
    for ei in range(n_edges):
        adj.setdefault(edges[ei][0], []).append(ei)

    def next_edge(u):
        for ei in adj.get(u, ()):
            if ei in resid:
                return ei
        return None

    def drain(path_edges: List[int], amt: float) -> None:
        for ei in path_edges:
            left = resid[ei] - amt
            if left <= 1e-15:
                del resid[ei]
            else:
                resid[ei] = left

    paths: List[PathFlow] = []
    cycles: List[PathFlow] = []
    budget = n_edges + len(rdiv) + len(src) + len(snk) + 8

    def trace(start, bounded_by_div: bool) -> None:
        """One source-to-sink trace (or one circulation trace)."""
        path_nodes = [start]
        path_edges: List[int] = []
        pos = {start: 0}
        while True:
            cur = path_nodes[-1]
            if (bounded_by_div and path_edges and cur in snk
                    and rdiv.get(cur, 0.0) < -crumb):
                amt = min(resid[ei] for ei in path_edges)
                amt = min(amt, rdiv[start], -rdiv[cur])
                drain(path_edges, amt)
                rdiv[start] -= amt
                rdiv[cur] += amt
                paths.append(PathFlow(tuple(path_nodes), tuple(path_edges), amt))
                return
            ei = next_edge(cur)
            if ei is None:
                # dead end: only crumb-scale mass can strand here
                amt = min(resid[x] for x in path_edges) if path_edges else 0.0
                if amt > 64.0 * max(tol, crumb):
                    raise DecompositionError(
                        f"trace stranded {amt:.3e} units at node {cur!r}")
                if path_edges:
                    drain(path_edges, amt)
                if bounded_by_div:
                    rdiv[start] = 0.0
                return
            head = edges[ei][1]
            if head in pos:
                cyc_edges = path_edges[pos[head]:] + [ei]
                amt = min(resid[x] for x in cyc_edges)
                drain(cyc_edges, amt)
                cycles.append(PathFlow(
                    tuple(path_nodes[pos[head]:] + [head]), tuple(cyc_edges), amt))
                for n in path_nodes[pos[head] + 1:]:
                    del pos[n]
                del path_nodes[pos[head] + 1:]
                del path_edges[pos[head]:]
                continue
            pos[head] = len(path_nodes)
            path_nodes.append(head)
            path_edges.append(ei)

    ordered_sources = sorted(src, key=_sort_key)
    while True:
        start = next((s for s in ordered_sources if rdiv.get(s, 0.0) > crumb), None)
        if start is None:
            break
        if len(paths) + len(cycles) > budget:
            raise DecompositionError("decomposition exceeded its component budget")
        trace(start, bounded_by_div=True)

    while resid:
        if len(paths) + len(cycles) > budget:
            raise DecompositionError("decomposition exceeded its component budget")
        ei0 = min(resid)
        trace(edges[ei0][0], bounded_by_div=False)

    return Decomposition(tuple(paths), tuple(cycles))


def assign_to_requests(paths: Sequence[PathFlow],
                       members: Sequence[Tuple[int, TripRequest]],
                       graph, tol: float = 1e-9) -> List[RequestRouteSet]:
    """Partition destination-flow paths among the requests they serve.

    Each path is claimed by the request whose (origin, departure time)
    matches the path's first expanded node; the merge step guarantees that
    key is unique within a destination. A path starting anywhere else marks
    a malformed aggregate flow and raises.
    """
    by_start: Dict[Tuple, Tuple[int, TripRequest]] = {}
    for mi, req in members:
        key = (req.origin, req.departure_time)
        if key in by_start:
            raise DecompositionError(
                f"requests not merged: duplicate origin/time {key}")
        by_start[key] = (mi, req)

    claimed: Dict[int, List[PathFlow]] = {mi: [] for mi, _ in members}
    for p in paths:
        v, t, _ = graph.nodes[p.nodes[0]]
        hit = by_start.get((v, t))
        if hit is None:
            raise DecompositionError(
                f"orphan path starting at {(v, t)}, matching no request")
        claimed[hit[0]].append(p)

    out: List[RequestRouteSet] = []
    for mi, req in members:
        total = sum(p.intensity for p in claimed[mi])
        if abs(total - req.rate) > tol * max(1.0, req.rate):
            raise DecompositionError(
                f"request {req.origin}->{req.destination}@{req.departure_time}: "
                f"route intensity {total!r} != rate {req.rate!r}")
        out.append(RequestRouteSet(mi, req, tuple(claimed[mi]), total))
    return out


def per_request_flows(route_sets: Sequence[RequestRouteSet]) -> Dict[int, Dict[int, float]]:
    """Edge flow per request; summing over requests returns the aggregate."""
    out: Dict[int, Dict[int, float]] = {}
    for rs in route_sets:
        acc: Dict[int, float] = {}
        for p in rs.paths:
            for ei in p.edges:
                acc[ei] = acc.get(ei, 0.0) + p.intensity
        out[rs.request_index] = acc
    return out


def decompose_solution(tso: TsoSolution, assembly: VrcpAssembly,
                       tol: float = 1e-9, crumb: float = 1e-9) -> List[RequestRouteSet]:
    """Route sets for every request of a solved fleet LP.

    Splits each destination's aggregate flow into paths, assigns them to
    the destination's requests, and returns route sets ordered by request
    index. Aggregate flows live on a time-layered graph, so cycles cannot
    occur; one showing up means corrupted input.
    """
    graph = assembly.graph
    epairs = [(e.tail, e.head) for e in graph.edges]
    out: List[RequestRouteSet] = []
    for bundle in assembly.bundles:
        flow = {ei: v for (key, ei), v in tso.bundled.items() if key == bundle.key}
        members = [(mi, assembly.requests[mi]) for mi in bundle.members]
        sources = set()
        for _, req in members:
            for c in range(1, graph.charge_levels + 1):
                if graph.has_node(req.origin, req.departure_time, c):
                    sources.add(graph.node_id(req.origin, req.departure_time, c))
        dest = bundle.destination
        sinks = {graph.node_id(dest, t, c)
                 for t in range(2, graph.horizon + 1)
                 for c in range(1, graph.charge_levels + 1)
                 if graph.has_node(dest, t, c)}
        dec = decompose_flow(epairs, flow, sources, sinks, tol=tol, crumb=crumb)
        if dec.cycles:
            raise DecompositionError(
                f"cycle found in time-layered flow for destination {dest!r}")
        out.extend(assign_to_requests(dec.paths, members, graph, tol=tol))
    out.sort(key=lambda rs: rs.request_index)
    return out


def route_sets_jsonl(route_sets: Sequence[RequestRouteSet], graph) -> str:
    """One JSON record per route set; nodes spelled out as (place, t, c)."""
    lines = []
    for rs in route_sets:
        req = rs.request
        rec = {
            "request": {"origin": req.origin, "destination": req.destination,
                        "departure_time": req.departure_time, "rate": req.rate},
            "total_intensity": rs.total_intensity,
            "paths": [{"intensity": p.intensity,
                       "nodes": [list(graph.nodes[n]) for n in p.nodes]}
                      for p in rs.paths],
        }
        lines.append(json.dumps(rec))
    return "\n".join(lines) + ("\n" if lines else "")

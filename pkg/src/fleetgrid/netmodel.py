"""Road network, stations, fleet, and the time/charge-expanded graph.

A vehicle's state is (road node, time step, charge level) with time in
1..horizon and charge in 1..charge_levels.  Expanding the road network over
those two axes turns routing-with-charging into a pure network flow problem:
road links become edges that advance time by their traversal duration and
drop (or, downhill, add) charge; stations become single-step edges that hold
position and move charge by the station's rate.  Copies that would leave the
time horizon or charge range simply do not exist.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

log = logging.getLogger(__name__)


class ScenarioError(Exception):
    """A scenario object violates one of its structural invariants."""


@dataclass(frozen=True)
class RoadEdge:
    tail: object
    head: object
    length_km: float
    traversal_time: int
    charge_cost: int
    capacity: float  # vehicles per step entering the link; inf = uncapped

    def __post_init__(self):
        if self.tail == self.head:
            raise ScenarioError(f"road edge {self.tail!r}->{self.head!r} is a self-loop")
        if not (isinstance(self.traversal_time, int) and self.traversal_time >= 1):
            raise ScenarioError(f"edge {self.tail!r}->{self.head!r}: traversal_time must be a positive integer")
        if not isinstance(self.charge_cost, int):
            raise ScenarioError(f"edge {self.tail!r}->{self.head!r}: charge_cost must be an integer")
        if self.length_km < 0 or self.capacity < 0:
            raise ScenarioError(f"edge {self.tail!r}->{self.head!r}: negative length or capacity")


@dataclass(frozen=True)
class RoadNetwork:
    nodes: tuple
    edges: tuple[RoadEdge, ...]

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "edges", tuple(self.edges))
        if len(set(self.nodes)) != len(self.nodes):
            raise ScenarioError("duplicate road node ids")
        known = set(self.nodes)
        for e in self.edges:
            if e.tail not in known or e.head not in known:
                raise ScenarioError(f"edge {e.tail!r}->{e.head!r} references unknown node")


@dataclass(frozen=True)
class ChargingStation:
    node: object
    charge_rate: int      # levels gained per step while charging
    discharge_rate: int   # negative: levels sold back per step
    capacity: float       # simultaneous vehicles; inf = uncapped

    def __post_init__(self):
        if not (isinstance(self.charge_rate, int) and self.charge_rate >= 1):
            raise ScenarioError(f"station at {self.node!r}: charge_rate must be a positive integer")
        if not (isinstance(self.discharge_rate, int) and self.discharge_rate <= -1):
            raise ScenarioError(f"station at {self.node!r}: discharge_rate must be a negative integer")
        if self.capacity < 0:
            raise ScenarioError(f"station at {self.node!r}: negative capacity")


@dataclass(frozen=True)
class FinalFleetState:
    """Where the fleet must end: an exact per-(node, charge) count, or any
    distribution whose vehicles all sit at or above a minimum charge level."""

    mode: str  # "fixed" | "min_charge"
    counts: dict | None = None      # (node, charge) -> vehicles, mode "fixed"
    min_charge: int | None = None   # inclusive threshold, mode "min_charge"

    def __post_init__(self):
        if self.mode == "fixed":
            if self.counts is None:
                raise ScenarioError("fixed final state needs counts")
        elif self.mode == "min_charge":
            if self.min_charge is None or self.min_charge < 1:
                raise ScenarioError("min_charge final state needs a threshold >= 1")
        else:
            raise ScenarioError(f"unknown final state mode {self.mode!r}")


@dataclass(frozen=True)
class FleetSpec:
    initial_distribution: dict          # (node, charge level) -> vehicle count
    final_state: FinalFleetState
    battery_wear_cost: float            # currency per charge level moved
    level_energy: float                 # joules per charge level
    value_of_time: float                # currency per time step of vehicle motion
    distance_cost: float                # currency per km driven

    def __post_init__(self):
        if not self.initial_distribution or sum(self.initial_distribution.values()) <= 0:
            raise ScenarioError("fleet must contain at least one vehicle")
        for (node, c), n in self.initial_distribution.items():
            if n < 0:
                raise ScenarioError(f"negative vehicle count at {(node, c)}")
        for name in ("battery_wear_cost", "level_energy", "value_of_time", "distance_cost"):
            if getattr(self, name) < 0:
                raise ScenarioError(f"{name} must be nonnegative")

    @property
    def fleet_size(self) -> float:
        return float(sum(self.initial_distribution.values()))


@dataclass(frozen=True)
class TripRequest:
    origin: object
    destination: object
    departure_time: int
    rate: float  # customers per step departing at departure_time

    def __post_init__(self):
        if self.origin == self.destination:
            raise ScenarioError("request origin equals destination")
        if self.departure_time < 1:
            raise ScenarioError("departure_time must be >= 1")
        if self.rate < 0:
            raise ScenarioError("request rate must be nonnegative")


@dataclass(frozen=True)
class ExpandedEdge:
    tail: int            # expanded node id
    head: int
    kind: str            # "road" | "charge" | "discharge"
    ref: int             # index into road.edges or the station list
    duration: int        # time steps, head.t - tail.t
    charge_delta: int    # head.c - tail.c
    distance: float      # km; 0 for station edges


@dataclass(frozen=True, eq=False)
class ExpandedGraph:
    horizon: int
    charge_levels: int
    road_order: tuple
    nodes: tuple                      # (road node, t, c), lexicographic
    road_edges: tuple[ExpandedEdge, ...]
    station_edges: tuple[ExpandedEdge, ...]
    warnings: tuple[str, ...]
    road_links: tuple[RoadEdge, ...] = ()          # ExpandedEdge.ref targets
    stations: tuple[ChargingStation, ...] = ()
    _node_id: dict = field(repr=False, default_factory=dict)

    @property
    def edges(self) -> tuple[ExpandedEdge, ...]:
        return self.road_edges + self.station_edges

    def node_id(self, road_node, t: int, c: int) -> int:
        return self._node_id[(road_node, t, c)]

    def has_node(self, road_node, t: int, c: int) -> bool:
        return (road_node, t, c) in self._node_id

    def out_edges(self) -> list[list[int]]:
        """Adjacency by edge index over road_edges + station_edges."""
        adj: list[list[int]] = [[] for _ in self.nodes]
        for i, e in enumerate(self.edges):
            adj[e.tail].append(i)
        return adj

    def edge_csv(self) -> str:
        """Debug dump: one line per expanded edge."""
        lines = ["tail_node,tail_t,tail_c,head_node,head_t,head_c,kind,duration,charge_delta,distance_km"]
        for e in self.edges:
            tv, tt, tc = self.nodes[e.tail]
            hv, ht, hc = self.nodes[e.head]
            lines.append(f"{tv},{tt},{tc},{hv},{ht},{hc},{e.kind},{e.duration},{e.charge_delta},{e.distance}")
        return "\n".join(lines) + "\n"


def _canonical_node_order(nodes) -> tuple:
    try:
        return tuple(sorted(nodes))
    except TypeError:
        return tuple(sorted(nodes, key=repr))


def build_expanded_graph(road: RoadNetwork, stations: list[ChargingStation],
                         horizon: int, charge_levels: int) -> ExpandedGraph:
    """Expand the road network over time and charge.

    Node order is lexicographic by (road node, t, c); edges are emitted road
    links first (in input order, copies by ascending (t, c)), then station
    charge and discharge edges per station.  Identical inputs give identical
    orderings, so downstream LP columns are reproducible.

    A road link or station rate that admits no copy at all (for instance a
    traversal longer than the horizon, or a charge swing wider than the charge
    range) is skipped with a warning recorded on the graph.
    """
    if horizon < 1 or charge_levels < 1:
        raise ScenarioError("horizon and charge_levels must be >= 1")
    known = set(road.nodes)
    for s in stations:
        if s.node not in known:
            raise ScenarioError(f"station at {s.node!r}: node not in road network")

    order = _canonical_node_order(road.nodes)
    nodes = tuple((v, t, c)
                  for v in order
                  for t in range(1, horizon + 1)
                  for c in range(1, charge_levels + 1))
    node_id = {key: i for i, key in enumerate(nodes)}
    warnings: list[str] = []

    road_edges: list[ExpandedEdge] = []
    for ref, link in enumerate(road.edges):
        made = 0
        dur, dc = link.traversal_time, link.charge_cost
        for t in range(1, horizon - dur + 1):
            for c in range(1, charge_levels + 1):
                c_head = c - dc
                if not (1 <= c_head <= charge_levels):
                    continue
                road_edges.append(ExpandedEdge(
                    tail=node_id[(link.tail, t, c)],
                    head=node_id[(link.head, t + dur, c_head)],
                    kind="road", ref=ref, duration=dur, charge_delta=-dc,
                    distance=link.length_km))
                made += 1
        if made == 0:
            warnings.append(
                f"road link {link.tail!r}->{link.head!r} admits no expanded copy "
                f"(traversal_time={dur}, charge_cost={dc})")

    station_edges: list[ExpandedEdge] = []
    for ref, st in enumerate(stations):
        for kind, rate in (("charge", st.charge_rate), ("discharge", st.discharge_rate)):
            made = 0
            for t in range(1, horizon):
                for c in range(1, charge_levels + 1):
                    c_head = c + rate
                    if not (1 <= c_head <= charge_levels):
                        continue
                    station_edges.append(ExpandedEdge(
                        tail=node_id[(st.node, t, c)],
                        head=node_id[(st.node, t + 1, c_head)],
                        kind=kind, ref=ref, duration=1, charge_delta=rate,
                        distance=0.0))
                    made += 1
            if made == 0:
                warnings.append(f"station at {st.node!r}: {kind} rate {rate} admits no expanded copy")

    for w in warnings:
        log.warning("%s", w)
    return ExpandedGraph(
        horizon=horizon, charge_levels=charge_levels, road_order=order,
        nodes=nodes, road_edges=tuple(road_edges), station_edges=tuple(station_edges),
        warnings=tuple(warnings), road_links=road.edges, stations=tuple(stations),
        _node_id=node_id)


@dataclass(frozen=True)
class Diagnostic:
    severity: str   # "error" | "warning"
    message: str


def validate_scenario(road: RoadNetwork, stations: list[ChargingStation],
                      fleet: FleetSpec, requests: list[TripRequest],
                      horizon: int, charge_levels: int) -> list[Diagnostic]:
    """Collect every invariant violation and reachability concern.

    Never raises: problems that would make build_expanded_graph throw are
    reported as error diagnostics instead, so a CLI can show all of them at
    once.  Reachability is checked per request by search over the expanded
    graph from every charge copy of the origin at the departure time.
    """
    out: list[Diagnostic] = []
    known = set(road.nodes)
    if horizon < 1 or charge_levels < 1:
        out.append(Diagnostic("error", "horizon and charge_levels must be >= 1"))
        return out
    for s in stations:
        if s.node not in known:
            out.append(Diagnostic("error", f"station at {s.node!r}: node not in road network"))
    for (node, c), n in fleet.initial_distribution.items():
        if node not in known:
            out.append(Diagnostic("error", f"initial fleet places vehicles at unknown node {node!r}"))
        elif not (1 <= c <= charge_levels):
            out.append(Diagnostic("error", f"initial fleet charge level {c} outside 1..{charge_levels}"))
    if fleet.final_state.mode == "fixed":
        if abs(sum(fleet.final_state.counts.values()) - fleet.fleet_size) > 1e-9:
            out.append(Diagnostic("error", "final fleet total differs from initial fleet total"))
        for (node, c) in fleet.final_state.counts:
            if node not in known or not (1 <= c <= charge_levels):
                out.append(Diagnostic("error", f"final fleet entry {(node, c)} out of range"))
    elif fleet.final_state.min_charge > charge_levels:
        out.append(Diagnostic("error", f"final min charge {fleet.final_state.min_charge} exceeds top level {charge_levels}"))

    bad_nodes = False
    for r in requests:
        if r.origin not in known or r.destination not in known:
            out.append(Diagnostic("error", f"request {r.origin!r}->{r.destination!r} references unknown node"))
            bad_nodes = True
        if r.departure_time > horizon:
            out.append(Diagnostic("error", f"request departing at {r.departure_time} is beyond the horizon {horizon}"))

    if any(d.severity == "error" for d in out):
        return out

    graph = build_expanded_graph(road, stations, horizon, charge_levels)
    for w in graph.warnings:
        out.append(Diagnostic("warning", w))
    adj = graph.out_edges()
    edges = graph.edges
    for r in requests:
        if bad_nodes or r.departure_time > horizon:
            continue
        seen = set()
        queue = deque()
        for c in range(1, charge_levels + 1):
            nid = graph.node_id(r.origin, r.departure_time, c)
            seen.add(nid)
            queue.append(nid)
        found = False
        while queue and not found:
            cur = queue.popleft()
            for ei in adj[cur]:
                nxt = edges[ei].head
                if nxt in seen:
                    continue
                if graph.nodes[nxt][0] == r.destination:
                    found = True
                    break
                seen.add(nxt)
                queue.append(nxt)
        if not found:
            out.append(Diagnostic(
                "warning",
                f"request {r.origin!r}->{r.destination!r} departing at t={r.departure_time}: "
                f"destination unreachable at any charge within the horizon"))
    return out

"""Vehicle routing and charging LP over the expanded graph.

Customer movements are modeled as bundled flows, one commodity per distinct
trip destination: requests heading to the same place can share flow
conservation rows without losing any information, which keeps the variable
count near (number of destinations + 1) x (number of edges).  Empty vehicles
move as a separate rebalancing flow.  The two layers meet at request origins,
where each departing customer consumes one empty vehicle at the chosen
departure charge, and at destinations, where arriving vehicles rejoin the
rebalancing pool.

The expanded graph deliberately has no stay-in-place edges, so the
rebalancing layer gets synthetic zero-cost hold columns carrying idle
vehicles from (v, t, c) to (v, t+1, c).  They use no road, no station, no
charge: a fleet with nothing to do parks at zero objective.  Customer flows
get no such columns; a passenger-carrying vehicle is always driving.

Charge levels are integers; electricity is bought (or sold back) only on
station edges at the per-level price for that station and departure step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .gridlp import PriceTable
from .lpcore import LpBuilder, LpProblem, LpSolution, solve
from .netmodel import ExpandedGraph, FleetSpec, TripRequest

REBAL = "~rebal~"  # bundle key reserved for the empty-vehicle layer


class FleetLpError(Exception):
    """VRCP assembly or extraction failed a structural requirement."""


def merge_requests(requests) -> tuple[TripRequest, ...]:
    """Canonical request list: merge duplicates, drop zero rates, sort."""
    acc: dict = {}
    for r in requests:
        key = (r.origin, r.destination, r.departure_time)
        acc[key] = acc.get(key, 0.0) + r.rate
    merged = [TripRequest(o, d, t, lam) for (o, d, t), lam in acc.items() if lam > 0]
    merged.sort(key=lambda r: (str(r.origin), str(r.destination), r.departure_time))
    return tuple(merged)


@dataclass(frozen=True)
class Bundle:
    key: str
    destination: object
    members: tuple[int, ...]  # indices into the merged request tuple


def build_bundles(requests: tuple[TripRequest, ...], per_request: bool) -> tuple[Bundle, ...]:
    if per_request:
        return tuple(Bundle(f"r{m}", r.destination, (m,)) for m, r in enumerate(requests))
    dests: dict = {}
    for m, r in enumerate(requests):
        dests.setdefault(r.destination, []).append(m)
    return tuple(Bundle(f"d{d}", d, tuple(ms))
                 for d, ms in sorted(dests.items(), key=lambda kv: str(kv[0])))


# column/row tags; '@' is reserved, so node ids must not contain it
def tag_f0(ei):
    return f"f0@{ei}"

def tag_fb(key, ei):
    return f"fB@{key}@{ei}"

def tag_dep(mi, c):
    return f"dep@{mi}@{c}"

def tag_arr(key, t, c):
    return f"arr@{key}@{t}@{c}"

def tag_hold(v, t, c):
    return f"hold@{v}@{t}@{c}"

def tag_nf(v, c):
    return f"nf@{v}@{c}"

def tag_rebal(v, t, c):
    return f"rebal@{v}@{t}@{c}"

def tag_fbal(key, v, t, c):
    return f"fbal@{key}@{v}@{t}@{c}"

def tag_intensity(mi):
    return f"intens@{mi}"

def tag_roadcap(i, t):
    return f"roadcap@{i}@{t}"

def tag_statcap(s, t):
    return f"statcap@{s}@{t}"


@dataclass(frozen=True)
class VrcpAssembly:
    problem: LpProblem
    graph: ExpandedGraph
    requests: tuple[TripRequest, ...]
    bundles: tuple[Bundle, ...]
    fleet: FleetSpec
    prices: PriceTable
    include_energy_cost: bool


def edge_unit_costs(graph: ExpandedGraph, fleet: FleetSpec, prices: PriceTable | None,
                    include_energy_cost: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Per-unit-flow cost of each expanded edge: (vehicle cost, customer extra).

    Vehicle cost applies to every flow on the edge: distance, battery wear,
    and (on station edges, when requested) the energy trade at the posted
    price, signed so discharging earns revenue.  The customer extra is the
    value-of-time term added for passenger-carrying flow only.
    """
    edges = graph.edges
    base = np.zeros(len(edges))
    extra = np.zeros(len(edges))
    for ei, e in enumerate(edges):
        cost = fleet.distance_cost * e.distance
        cost += fleet.battery_wear_cost * abs(e.charge_delta)
        if e.kind != "road" and include_energy_cost:
            tail_t = graph.nodes[e.tail][1]
            station_node = graph.nodes[e.tail][0]
            try:
                per_level = prices.at(station_node, tail_t)
            except KeyError:
                raise FleetLpError(
                    f"price table lacks an entry for station {station_node!r} at t={tail_t}")
            cost += per_level * e.charge_delta
        base[ei] = cost
        extra[ei] = fleet.value_of_time * e.duration
    return base, extra


def assemble_vrcp(graph: ExpandedGraph, requests, fleet: FleetSpec,
                  prices: PriceTable, include_energy_cost: bool = True,
                  per_request_bundles: bool = False,
                  road_capacities: dict | None = None) -> VrcpAssembly:
    """Build the fleet operator's LP.

    Rows:
      rebal@(v,t,c)        empty-vehicle conservation, with the initial fleet
                           entering at t=1 and the final distribution leaving
                           at the last step
      fbal@(key,v,t,c)     per-bundle customer flow conservation
      intens@(m)           each request's departures sum to its rate
      roadcap@(i,t)        congestion cap per road link and departure step
      statcap@(s,t)        charger slots per station and step

    per_request_bundles builds the provably equivalent one-bundle-per-request
    variant (used by equivalence tests and by route decomposition).
    include_energy_cost=False drops electricity from the objective; the joint
    problem does this because generation cost takes over that role.
    road_capacities overrides the per-(link, departure step) congestion rhs,
    keyed (link index, t); the receding-horizon controller uses it to carve
    out capacity already consumed by customer traffic.
    """
    reqs = merge_requests(requests)
    bundles = build_bundles(reqs, per_request_bundles)
    bld = LpBuilder("vrcp")
    add_vrcp_block(bld, graph, reqs, bundles, fleet, prices,
                   include_energy_cost, road_capacities)
    return VrcpAssembly(problem=bld.build(), graph=graph, requests=reqs,
                        bundles=bundles, fleet=fleet, prices=prices,
                        include_energy_cost=include_energy_cost)


def add_vrcp_block(bld: LpBuilder, graph: ExpandedGraph, reqs, bundles,
                   fleet: FleetSpec, prices: PriceTable | None,
                   include_energy_cost: bool,
                   road_capacities: dict | None = None) -> None:
    """Write the routing variables and rows into an existing builder.

    The joint assembler reuses this block and then splices the station flows
    into the grid's demand rows.
    """
    T, C = graph.horizon, graph.charge_levels
    edges = graph.edges
    base_cost, time_cost = edge_unit_costs(graph, fleet, prices, include_energy_cost)

    for ei in range(len(edges)):
        bld.add_col(tag_f0(ei), obj=float(base_cost[ei]))
    for b in bundles:
        for ei in range(len(edges)):
            bld.add_col(tag_fb(b.key, ei), obj=float(base_cost[ei] + time_cost[ei]))
    for mi in range(len(reqs)):
        for c in range(1, C + 1):
            bld.add_col(tag_dep(mi, c))
    for b in bundles:
        for t in range(2, T + 1):
            for c in range(1, C + 1):
                bld.add_col(tag_arr(b.key, t, c))
    for v in graph.road_order:
        for t in range(1, T):
            for c in range(1, C + 1):
                bld.add_col(tag_hold(v, t, c))

    final = fleet.final_state
    if final.mode == "min_charge":
        for v in graph.road_order:
            for c in range(final.min_charge, C + 1):
                bld.add_col(tag_nf(v, c))

    # empty-vehicle conservation
    for v in graph.road_order:
        for t in range(1, T + 1):
            for c in range(1, C + 1):
                rhs = float(fleet.initial_distribution.get((v, c), 0.0)) if t == 1 else 0.0
                if final.mode == "fixed" and t == T:
                    rhs -= float(final.counts.get((v, c), 0.0))
                bld.add_row(tag_rebal(v, t, c), "=", rhs)
    for ei, e in enumerate(edges):
        tv, tt, tc = graph.nodes[e.tail]
        hv, ht, hc = graph.nodes[e.head]
        col = bld.col(tag_f0(ei))
        bld.add_coef(bld.row(tag_rebal(tv, tt, tc)), col, 1.0)
        bld.add_coef(bld.row(tag_rebal(hv, ht, hc)), col, -1.0)
    for v in graph.road_order:
        for t in range(1, T):
            for c in range(1, C + 1):
                col = bld.col(tag_hold(v, t, c))
                bld.add_coef(bld.row(tag_rebal(v, t, c)), col, 1.0)
                bld.add_coef(bld.row(tag_rebal(v, t + 1, c)), col, -1.0)
    if final.mode == "min_charge":
        for v in graph.road_order:
            for c in range(final.min_charge, C + 1):
                bld.add_coef(bld.row(tag_rebal(v, T, c)), bld.col(tag_nf(v, c)), 1.0)

    # customer layers and their hand-off to the rebalancing layer
    for b in bundles:
        for v in graph.road_order:
            for t in range(1, T + 1):
                for c in range(1, C + 1):
                    bld.add_row(tag_fbal(b.key, v, t, c), "=", 0.0)
        for ei, e in enumerate(edges):
            tv, tt, tc = graph.nodes[e.tail]
            hv, ht, hc = graph.nodes[e.head]
            col = bld.col(tag_fb(b.key, ei))
            bld.add_coef(bld.row(tag_fbal(b.key, tv, tt, tc)), col, 1.0)
            bld.add_coef(bld.row(tag_fbal(b.key, hv, ht, hc)), col, -1.0)
        for t in range(2, T + 1):
            for c in range(1, C + 1):
                col = bld.col(tag_arr(b.key, t, c))
                # arrivals leave the bundle at its destination...
                bld.add_coef(bld.row(tag_fbal(b.key, b.destination, t, c)), col, 1.0)
                # ...and hand the vehicle back to the rebalancing pool
                bld.add_coef(bld.row(tag_rebal(b.destination, t, c)), col, -1.0)
        for mi in b.members:
            r = reqs[mi]
            for c in range(1, C + 1):
                col = bld.col(tag_dep(mi, c))
                bld.add_coef(bld.row(tag_fbal(b.key, r.origin, r.departure_time, c)), col, -1.0)
                bld.add_coef(bld.row(tag_rebal(r.origin, r.departure_time, c)), col, 1.0)

    for mi, r in enumerate(reqs):
        row = bld.add_row(tag_intensity(mi), "=", r.rate)
        for c in range(1, C + 1):
            bld.add_coef(row, bld.col(tag_dep(mi, c)), 1.0)

    # congestion per road link and departure step
    caps: dict = {}
    for ei, e in enumerate(edges):
        if e.kind != "road":
            continue
        caps.setdefault((e.ref, graph.nodes[e.tail][1]), []).append(ei)
    road_capacities = road_capacities or {}
    for (ref, t), eis in sorted(caps.items()):
        cap = road_capacities.get((ref, t), None)
        if cap is None:
            cap = graph.road_links[ref].capacity
        if math.isinf(cap):
            continue
        row = bld.add_row(tag_roadcap(ref, t), "<", float(cap))
        for ei in eis:
            bld.add_coef(row, bld.col(tag_f0(ei)), 1.0)
            for b in bundles:
                bld.add_coef(row, bld.col(tag_fb(b.key, ei)), 1.0)

    # station slots per station and step, charging and discharging together
    scaps: dict = {}
    for ei, e in enumerate(edges):
        if e.kind == "road":
            continue
        scaps.setdefault((e.ref, graph.nodes[e.tail][1]), []).append(ei)
    for (ref, t), eis in sorted(scaps.items()):
        cap = graph.stations[ref].capacity
        if math.isinf(cap):
            continue
        row = bld.add_row(tag_statcap(ref, t), "<", float(cap))
        for ei in eis:
            bld.add_coef(row, bld.col(tag_f0(ei)), 1.0)
            for b in bundles:
                bld.add_coef(row, bld.col(tag_fb(b.key, ei)), 1.0)


@dataclass
class TsoCosts:
    """The four objective ingredients, recomputed from raw flows.

    customer_travel_steps and vehicle_distance_km are physical quantities
    (weighted by value_of_time and distance_cost in the objective);
    energy_cost and wear_cost are already in currency.
    """

    customer_travel_steps: float
    vehicle_distance_km: float
    energy_cost: float
    wear_cost: float

    def objective(self, fleet: FleetSpec, include_energy_cost: bool = True) -> float:
        total = (fleet.value_of_time * self.customer_travel_steps
                 + fleet.distance_cost * self.vehicle_distance_km
                 + self.wear_cost)
        if include_energy_cost:
            total += self.energy_cost
        return total


@dataclass
class TsoSolution:
    """Named view of a solved routing LP; flow maps hold nonzero entries."""

    rebalancing: dict          # edge index -> vehicles
    bundled: dict              # (bundle key, edge index) -> vehicles
    departures: dict           # (request index, charge) -> customers
    arrivals: dict             # (bundle key, t, c) -> customers
    holds: dict                # (road node, t, c) -> idle vehicles
    final_fleet: dict          # (road node, c) -> vehicles at the last step
    costs: TsoCosts
    objective: float

    def edge_total(self, ei: int) -> float:
        return self.rebalancing.get(ei, 0.0) + sum(
            v for (key, e), v in self.bundled.items() if e == ei)


def extract_tso_solution(sol: LpSolution, assembly: VrcpAssembly,
                         tol: float = 1e-7) -> TsoSolution:
    """Read flows out of a solved VRCP and check its totals.

    Raises on non-optimal status.  Verifies that each request's departures
    sum to its rate and each bundle's arrivals absorb its members' rates,
    both within tol; conservation itself is already a hard LP row.
    """
    sol.require_optimal("vehicle routing LP")
    p = assembly.problem
    cols = p.col_index()
    graph = assembly.graph
    T, C = graph.horizon, graph.charge_levels

    def grab(prefix_vals):
        return {key: float(v) for key, v in prefix_vals if abs(v) > 1e-12}

    rebal = grab(((ei, sol.x[cols[tag_f0(ei)]]) for ei in range(len(graph.edges))))
    bundled = grab((((b.key, ei), sol.x[cols[tag_fb(b.key, ei)]])
                    for b in assembly.bundles for ei in range(len(graph.edges))))
    deps = grab((((mi, c), sol.x[cols[tag_dep(mi, c)]])
                 for mi in range(len(assembly.requests)) for c in range(1, C + 1)))
    arrs = grab((((b.key, t, c), sol.x[cols[tag_arr(b.key, t, c)]])
                 for b in assembly.bundles for t in range(2, T + 1) for c in range(1, C + 1)))
    holds = grab((((v, t, c), sol.x[cols[tag_hold(v, t, c)]])
                  for v in graph.road_order for t in range(1, T) for c in range(1, C + 1)))

    final = assembly.fleet.final_state
    if final.mode == "fixed":
        nf = {k: float(v) for k, v in final.counts.items() if v}
    else:
        nf = grab((((v, c), sol.x[cols[tag_nf(v, c)]])
                   for v in graph.road_order for c in range(final.min_charge, C + 1)))

    for mi, r in enumerate(assembly.requests):
        got = sum(deps.get((mi, c), 0.0) for c in range(1, C + 1))
        if abs(got - r.rate) > tol * (1 + abs(r.rate)):
            raise FleetLpError(f"request {mi}: departures {got} != rate {r.rate}")
    for b in assembly.bundles:
        want = sum(assembly.requests[mi].rate for mi in b.members)
        got = sum(v for (key, _, _), v in arrs.items() if key == b.key)
        if abs(got - want) > tol * (1 + abs(want)):
            raise FleetLpError(f"bundle {b.key}: arrivals {got} != total rate {want}")

    tso = TsoSolution(rebalancing=rebal, bundled=bundled, departures=deps,
                      arrivals=arrs, holds=holds, final_fleet=nf,
                      costs=TsoCosts(0, 0, 0, 0), objective=float(sol.objective))
    tso.costs = cost_breakdown(tso, graph, assembly.fleet, assembly.prices)
    return tso


def cost_breakdown(tso: TsoSolution, graph: ExpandedGraph, fleet: FleetSpec,
                   prices: PriceTable) -> TsoCosts:
    """Recompute the objective's four ingredients from raw flows.

    Energy cost is signed: charging buys at the posted per-level price,
    discharging sells at the same price.  Wear covers every level moved,
    on roads and at stations alike.
    """
    edges = graph.edges
    travel = 0.0
    dist = 0.0
    energy = 0.0
    wear_levels = 0.0
    f_all: dict = dict(tso.rebalancing)
    for (key, ei), v in tso.bundled.items():
        f_all[ei] = f_all.get(ei, 0.0) + v
        travel += edges[ei].duration * v
    for ei, v in f_all.items():
        e = edges[ei]
        dist += e.distance * v
        wear_levels += abs(e.charge_delta) * v
        if e.kind != "road":
            station_node, tail_t, _ = graph.nodes[e.tail]
            energy += prices.at(station_node, tail_t) * e.charge_delta * v
    return TsoCosts(customer_travel_steps=travel, vehicle_distance_km=dist,
                    energy_cost=energy, wear_cost=fleet.battery_wear_cost * wear_levels)


def conservation_residual(tso: TsoSolution, assembly: VrcpAssembly) -> float:
    """Max balance violation across the rebalancing and all bundle layers.

    Recomputed from the extracted flow maps, independently of the LP rows,
    and scaled by the fleet size.
    """
    graph = assembly.graph
    T, C = graph.horizon, graph.charge_levels
    edges = graph.edges
    fleet = assembly.fleet
    final = fleet.final_state
    worst = 0.0

    net: dict = {}
    for ei, v in tso.rebalancing.items():
        net[edges[ei].tail] = net.get(edges[ei].tail, 0.0) + v
        net[edges[ei].head] = net.get(edges[ei].head, 0.0) - v
    for (v_node, t, c), v in tso.holds.items():
        a = graph.node_id(v_node, t, c)
        b = graph.node_id(v_node, t + 1, c)
        net[a] = net.get(a, 0.0) + v
        net[b] = net.get(b, 0.0) - v
    for (mi, c), v in tso.departures.items():
        r = assembly.requests[mi]
        nid = graph.node_id(r.origin, r.departure_time, c)
        net[nid] = net.get(nid, 0.0) + v
    for (key, t, c), v in tso.arrivals.items():
        dest = next(b.destination for b in assembly.bundles if b.key == key)
        nid = graph.node_id(dest, t, c)
        net[nid] = net.get(nid, 0.0) - v
    for (v_node, c), v in tso.final_fleet.items():
        nid = graph.node_id(v_node, T, c)
        net[nid] = net.get(nid, 0.0) + v
    for v_node in graph.road_order:
        for c in range(1, C + 1):
            nid = graph.node_id(v_node, 1, c)
            net[nid] = net.get(nid, 0.0) - float(fleet.initial_distribution.get((v_node, c), 0.0))
    worst = max((abs(x) for x in net.values()), default=0.0)

    for b in assembly.bundles:
        netb: dict = {}
        for (key, ei), v in tso.bundled.items():
            if key != b.key:
                continue
            netb[edges[ei].tail] = netb.get(edges[ei].tail, 0.0) + v
            netb[edges[ei].head] = netb.get(edges[ei].head, 0.0) - v
        for mi in b.members:
            r = assembly.requests[mi]
            for c in range(1, C + 1):
                v = tso.departures.get((mi, c), 0.0)
                if v:
                    nid = graph.node_id(r.origin, r.departure_time, c)
                    netb[nid] = netb.get(nid, 0.0) - v
        for (key, t, c), v in tso.arrivals.items():
            if key != b.key:
                continue
            nid = graph.node_id(b.destination, t, c)
            netb[nid] = netb.get(nid, 0.0) + v
        worst = max(worst, max((abs(x) for x in netb.values()), default=0.0))
    return worst / max(fleet.fleet_size, 1.0)


def solve_vrcp(graph: ExpandedGraph, requests, fleet: FleetSpec, prices: PriceTable,
               include_energy_cost: bool = True) -> tuple[TsoSolution, VrcpAssembly, LpSolution]:
    """Assemble, solve, and extract in one call."""
    assembly = assemble_vrcp(graph, requests, fleet, prices, include_energy_cost)
    sol = solve(assembly.problem)
    return extract_tso_solution(sol, assembly), assembly, sol

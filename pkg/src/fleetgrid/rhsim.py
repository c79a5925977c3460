"""Receding-horizon fleet controller driving a mesoscopic world.

The controller re-solves a single LP over a sliding window: empty-vehicle
flows on the time/charge-expanded graph, customer pickups collapsed onto
precomputed free-flow routes (so per-customer flow variables disappear),
terminal vehicle counts held above a charge threshold, and, in coordinated
mode, the dispatch block of the power grid sharing the same window.
Sampling turns the fractional first-step flows into integer vehicle tasks,
and the world advances one step at a time with BPR congestion, noisy
demand, and noisy exogenous power load.  Grid settlement happens after the
fact: one dispatch over the realized episode with shedding priced at the
value of lost load.

Three run modes share one exogenous world, so reports with the same seed
are directly comparable: "baseline" runs the grid without any fleet,
"uncoordinated" plans the fleet against electricity prices frozen at the
baseline forecast, and "coordinated" plans fleet and grid together.

Customers materialize on the demand noise stream (count = ceiling of the
noisy rate, the fractional head kept with matching probability), so every
mode faces the identical arrival history.  A customer whose arrival falls
between decision epochs waits in the outstanding pool until the next solve.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field

import numpy as np

from .gridlp import (
    BusLoad,
    Generator,
    GridModel,
    PriceTable,
    add_dispatch_block,
    solve_dispatch,
    tag_demand,
)
from .lpcore import LpBuilder, LpError, LpProblem, LpSolution, solve
from .netmodel import (
    ExpandedGraph,
    RoadNetwork,
    ScenarioError,
    build_expanded_graph,
)
from .scenario import Scenario, SimConfig

IDLE = "idle"
SERVE = "serve"
REBALANCE = "rebalance"
CHARGE = "charge"
DISCHARGE = "discharge"

MODES = ("baseline", "uncoordinated", "coordinated")


class RouteError(Exception):
    """No precomputed route exists for a requested origin/destination pair."""


class SimulationAborted(Exception):
    """A solver failure stopped the episode; .report holds the partial run."""

    def __init__(self, report, cause):
        self.report = report
        self.cause = cause
        super().__init__(f"simulation aborted after step {report.steps}: {cause}")


# --- precomputed customer routes ----------------------------------------------

@dataclass(frozen=True)
class PrecomputedRoute:
    """Fixed free-flow path a customer trip follows, with its step/charge bill."""

    origin: object
    destination: object
    nodes: tuple
    edge_indices: tuple     # indices into RoadNetwork.edges
    travel_steps: int
    charge_use: int         # sum of charge costs along the path
    charge_swing: int       # sum of |charge cost|, for wear accounting
    distance_km: float


def precompute_routes(road: RoadNetwork) -> dict:
    """Shortest free-flow route for every ordered reachable pair.

    Dijkstra on traversal time with (time, distance) lexicographic
    tie-breaking, so the same network always yields the same routes.
    """
    adj = {v: [] for v in road.nodes}
    for i, e in enumerate(road.edges):
        adj[e.tail].append(i)
    out = {}
    for origin in road.nodes:
        best = {origin: (0, 0.0)}
        parent = {}
        heap = [(0, 0.0, str(origin))]
        node_of = {str(v): v for v in road.nodes}
        while heap:
            t, d, vs = heapq.heappop(heap)
            v = node_of[vs]
            if (t, d) > best.get(v, (math.inf, math.inf)):
                continue
            for ei in adj[v]:
                e = road.edges[ei]
                cand = (t + e.traversal_time, d + e.length_km)
                if cand < best.get(e.head, (math.inf, math.inf)):
                    best[e.head] = cand
                    parent[e.head] = ei
                    heapq.heappush(heap, (*cand, str(e.head)))
        for dest, (t, d) in best.items():
            if dest == origin:
                continue
            path = []
            v = dest
            while v != origin:
                ei = parent[v]
                path.append(ei)
                v = road.edges[ei].tail
            path.reverse()
            nodes = (origin,) + tuple(road.edges[ei].head for ei in path)
            out[(origin, dest)] = PrecomputedRoute(
                origin, dest, nodes, tuple(path), t,
                sum(road.edges[ei].charge_cost for ei in path),
                sum(abs(road.edges[ei].charge_cost) for ei in path),
                d)
    return out


def route_for(routes: dict, origin, destination) -> PrecomputedRoute:
    try:
        return routes[(origin, destination)]
    except KeyError:
        raise RouteError(f"no precomputed route from {origin!r} to {destination!r}")


# --- world inhabitants ---------------------------------------------------------

@dataclass(eq=False)
class Customer:
    origin: object
    destination: object
    born: int               # absolute step the request materialized
    waited: int = 0         # whole steps spent unassigned so far
    assigned_at: int | None = None


@dataclass(frozen=True)
class OutstandingRequest:
    """Aggregated waiting customers sharing origin, destination, and wait age."""

    origin: object
    destination: object
    rate: float
    waited: int

    def __post_init__(self):
        if self.rate < 0:
            raise ScenarioError("outstanding rate must be nonnegative")


def group_outstanding(pool) -> tuple:
    groups = {}
    for c in pool:
        key = (str(c.origin), str(c.destination), c.waited)
        groups[key] = groups.get(key, 0) + 1
    return tuple(OutstandingRequest(o, d, float(n), w)
                 for (o, d, w), n in sorted(groups.items()))


@dataclass
class VehicleAgent:
    """One vehicle: parked at a node, or part-way down a chain of road edges."""

    id: int
    node: object            # current node; None while traversing an edge
    charge: int
    task: str = IDLE
    route: list = field(default_factory=list)   # road edge indices still to run
    edge_left: int = 0      # steps remaining on route[0]; 0 means not entered yet
    payload: Customer | None = None

    @property
    def idle(self) -> bool:
        return self.task == IDLE and not self.route


def materialize_agents(fleet) -> list:
    """Integer vehicles from the (possibly fractional) initial distribution.

    Fractional counts round up, so every request's dedicated capacity exists.
    """
    agents = []
    next_id = 0
    for (node, charge), count in sorted(fleet.initial_distribution.items(),
                                        key=lambda kv: (str(kv[0][0]), kv[0][1])):
        for _ in range(int(math.ceil(count - 1e-9))):
            agents.append(VehicleAgent(next_id, node, charge))
            next_id += 1
    return agents


# --- the receding-horizon LP ---------------------------------------------------

@dataclass(frozen=True)
class RhState:
    """Controller-facing snapshot of the world at a decision epoch."""

    now: int
    idle: dict                  # (node, charge) -> vehicle count
    arrivals: tuple             # ((node, tau, charge, count), ...), tau >= 2
    outstanding: tuple          # OutstandingRequest entries, sorted
    committed_road: dict        # (road edge index, tau) -> vehicles already bound


@dataclass(frozen=True)
class RhForecasts:
    """Everything the controller believes about the window ahead."""

    wgraph: ExpandedGraph
    routes: dict
    requests: tuple             # (origin, destination, tau, rate)
    fleet: object               # FleetSpec
    grid: GridModel | None      # window-sliced grid; None in price-taking mode
    prices: PriceTable | None   # window station prices when the grid is absent
    bus_of_station: dict


def tag_rh_f0(ei):
    return f"f0@{ei}"

def tag_rh_hold(v, t, c):
    return f"hold@{v}@{t}@{c}"

def tag_rh_nf(v, c):
    return f"nf@{v}@{c}"

def tag_rh_bal(v, t, c):
    return f"nbal@{v}@{t}@{c}"

def tag_dep_in(i, c):
    return f"depin@{i}@{c}"

def tag_dep_out(i, c):
    return f"depout@{i}@{c}"

def tag_dep_drop(i):
    return f"depdrop@{i}"

def tag_out_in(j, t, c):
    return f"oin@{j}@{t}@{c}"

def tag_out_out(j, t, c):
    return f"oout@{j}@{t}@{c}"

def tag_out_drop(j):
    return f"odrop@{j}"

def tag_rh_roadcap(ref, t):
    return f"roadcap@{ref}@{t}"

def tag_rh_statcap(ref, t):
    return f"statcap@{ref}@{t}"


@dataclass(frozen=True)
class RhAssembly:
    problem: LpProblem
    state: RhState
    forecasts: RhForecasts
    config: SimConfig
    first_step_out: dict     # (node, charge) -> ((task kind, edge index, tag), ...)


def _occupancy(route: PrecomputedRoute, road_edges, start_tau: int):
    """(edge index, entry step) pairs for a trip starting at start_tau."""
    tau = start_tau
    for ei in route.edge_indices:
        yield ei, tau
        tau += road_edges[ei].traversal_time


def assemble_rh(state: RhState, forecasts: RhForecasts, config: SimConfig) -> RhAssembly:
    """Build the window LP.

    Balance convention: outgoing columns carry +1, incoming -1, and the row
    equals the exogenous injection (idle vehicles at tau=1, en-route
    arrivals later).  Customer trips appear only through their endpoints;
    the fixed charge drop along the route ties pickup charge to delivery
    charge, which is what couples serving customers to later recharging.
    Every intensity row owns a drop slack at config.drop_penalty and the
    grid block (when present) owns shed slacks, so the LP stays feasible
    whenever dispatch-with-shedding is.
    """
    g = forecasts.wgraph
    fleet = forecasts.fleet
    road_links = g.road_links
    W, C = g.horizon, g.charge_levels
    bld = LpBuilder("rh")

    # empty-vehicle flow on every expanded edge
    for ei, e in enumerate(g.edges):
        cost = fleet.distance_cost * e.distance
        cost += fleet.battery_wear_cost * abs(e.charge_delta)
        if e.kind != "road" and forecasts.prices is not None:
            node, t, _ = g.nodes[e.tail]
            cost += forecasts.prices.at(node, t) * e.charge_delta
        bld.add_col(tag_rh_f0(ei), obj=cost)
    for v in g.road_order:
        for t in range(1, W):
            for c in range(1, C + 1):
                bld.add_col(tag_rh_hold(v, t, c))
    # terminal counts; below the threshold they exist only as priced slack
    for v in g.road_order:
        for c in range(1, C + 1):
            pen = 0.0 if c >= config.end_charge_threshold else config.drop_penalty
            bld.add_col(tag_rh_nf(v, c), obj=pen)

    inj = {}
    for (node, charge), n in state.idle.items():
        inj[(node, 1, charge)] = inj.get((node, 1, charge), 0.0) + float(n)
    for node, tau, charge, n in state.arrivals:
        if tau <= W:
            inj[(node, tau, charge)] = inj.get((node, tau, charge), 0.0) + float(n)

    for v in g.road_order:
        for t in range(1, W + 1):
            for c in range(1, C + 1):
                bld.add_row(tag_rh_bal(v, t, c), "=", inj.get((v, t, c), 0.0))

    for ei, e in enumerate(g.edges):
        col = bld.col(tag_rh_f0(ei))
        tv, tt, tc = g.nodes[e.tail]
        hv, ht, hc = g.nodes[e.head]
        bld.add_coef(bld.row(tag_rh_bal(tv, tt, tc)), col, 1.0)
        bld.add_coef(bld.row(tag_rh_bal(hv, ht, hc)), col, -1.0)
    for v in g.road_order:
        for t in range(1, W):
            for c in range(1, C + 1):
                col = bld.col(tag_rh_hold(v, t, c))
                bld.add_coef(bld.row(tag_rh_bal(v, t, c)), col, 1.0)
                bld.add_coef(bld.row(tag_rh_bal(v, t + 1, c)), col, -1.0)
    for v in g.road_order:
        for c in range(1, C + 1):
            bld.add_coef(bld.row(tag_rh_bal(v, W, c)), bld.col(tag_rh_nf(v, c)), 1.0)

    # congestion rows only where a link is actually capacitated
    capped = {ref for ref, link in enumerate(road_links)
              if math.isfinite(link.capacity)}
    road_rows = {}
    for ref in sorted(capped):
        cap = road_links[ref].capacity
        for t in range(1, W + 1):
            used = float(state.committed_road.get((ref, t), 0.0))
            road_rows[(ref, t)] = bld.add_row(tag_rh_roadcap(ref, t), "<",
                                              max(0.0, cap - used))
    for ei, e in enumerate(g.edges):
        if e.kind == "road" and e.ref in capped:
            t = g.nodes[e.tail][1]
            bld.add_coef(road_rows[(e.ref, t)], bld.col(tag_rh_f0(ei)), 1.0)

    stat_rows = {}
    for ref, st in enumerate(g.stations):
        if math.isfinite(st.capacity):
            for t in range(1, W):
                stat_rows[(ref, t)] = bld.add_row(tag_rh_statcap(ref, t), "<",
                                                  st.capacity)
    if stat_rows:
        for ei, e in enumerate(g.edges):
            if e.kind != "road":
                t = g.nodes[e.tail][1]
                row = stat_rows.get((e.ref, t))
                if row is not None:
                    bld.add_coef(row, bld.col(tag_rh_f0(ei)), 1.0)

    def trip_block(cin_tag, cout_tag, link_tag, origin, dest, tau, route,
                   wait_steps, r_int):
        """Columns for one (pickup step, charge) service option."""
        arrive = tau + route.travel_steps
        cost = (fleet.value_of_time * (wait_steps + route.travel_steps)
                + fleet.distance_cost * route.distance_km
                + fleet.battery_wear_cost * route.charge_swing)
        for c in range(route.charge_use + 1, C + 1):
            cin = bld.add_col(cin_tag(c), obj=cost)
            cout = bld.add_col(cout_tag(c))
            bld.add_coef(r_int, cin, 1.0)
            bld.add_coef(bld.row(tag_rh_bal(origin, tau, c)), cin, 1.0)
            bld.add_coef(bld.row(tag_rh_bal(dest, arrive, c - route.charge_use)),
                         cout, -1.0)
            link = bld.add_row(link_tag(c), "=", 0.0)
            bld.add_coef(link, cout, 1.0)
            bld.add_coef(link, cin, -1.0)
            if capped:
                for ref, t_enter in _occupancy(route, road_links, tau):
                    if ref in capped and t_enter <= W:
                        bld.add_coef(road_rows[(ref, t_enter)], cin, 1.0)

    for i, (origin, dest, tau, rate) in enumerate(forecasts.requests):
        route = route_for(forecasts.routes, origin, dest)
        r_int = bld.add_row(f"depint@{i}", "=", float(rate))
        bld.add_coef(r_int, bld.add_col(tag_dep_drop(i), obj=config.drop_penalty), 1.0)
        if tau + route.travel_steps <= W:
            trip_block(lambda c, i=i: tag_dep_in(i, c),
                       lambda c, i=i: tag_dep_out(i, c),
                       lambda c, i=i: f"deplink@{i}@{c}",
                       origin, dest, tau, route, wait_steps=0, r_int=r_int)

    for j, o_req in enumerate(state.outstanding):
        route = route_for(forecasts.routes, o_req.origin, o_req.destination)
        r_int = bld.add_row(f"oint@{j}", "=", o_req.rate)
        bld.add_coef(r_int, bld.add_col(tag_out_drop(j), obj=config.drop_penalty), 1.0)
        for tau in range(1, W - route.travel_steps + 1):
            trip_block(lambda c, j=j, tau=tau: tag_out_in(j, tau, c),
                       lambda c, j=j, tau=tau: tag_out_out(j, tau, c),
                       lambda c, j=j, tau=tau: f"olink@{j}@{tau}@{c}",
                       o_req.origin, o_req.destination, tau, route,
                       wait_steps=o_req.waited + tau - 1, r_int=r_int)

    if forecasts.grid is not None:
        add_dispatch_block(bld, forecasts.grid, {}, W,
                           shed_penalty=config.shed_penalty)
        step_seconds = forecasts.grid.step_seconds
        for ei, e in enumerate(g.edges):
            if e.kind == "road":
                continue
            node, t, _ = g.nodes[e.tail]
            bus = forecasts.bus_of_station[node]
            k_mw = fleet.level_energy * e.charge_delta / (step_seconds * 1e6)
            bld.add_coef(bld.row(tag_demand(bus, t)), bld.col(tag_rh_f0(ei)), -k_mw)

    first_out = {}
    for ei, e in enumerate(g.edges):
        v, t, c = g.nodes[e.tail]
        if t != 1:
            continue
        kind = REBALANCE if e.kind == "road" else (CHARGE if e.charge_delta > 0
                                                   else DISCHARGE)
        first_out.setdefault((v, c), []).append((kind, ei, tag_rh_f0(ei)))
    for v in g.road_order:
        for c in range(1, C + 1):
            hold_tag = tag_rh_hold(v, 1, c) if W > 1 else None
            first_out.setdefault((v, c), []).append((IDLE, -1, hold_tag))
    first_out = {k: tuple(vs) for k, vs in first_out.items()}

    return RhAssembly(problem=bld.build(), state=state, forecasts=forecasts,
                      config=config, first_step_out=first_out)


# --- sampling: fractional flows to integer vehicle tasks -----------------------

@dataclass
class Assignments:
    serves: list = field(default_factory=list)       # (agent id, customer, path)
    rebalances: list = field(default_factory=list)   # (agent id, road edge index)
    charges: list = field(default_factory=list)      # (agent id, station ref, rate)
    unserved: list = field(default_factory=list)     # customers left waiting


def _draw(rng, items, weights):
    total = sum(weights)
    if total <= 1e-12:
        return None
    u = rng.random() * total
    acc = 0.0
    for item, w in zip(items, weights):
        acc += w
        if u <= acc:
            return item
    return items[-1]


def materialize_count(rng, rate: float) -> int:
    """Ceil(rate) arrivals, the fractional head kept with matching odds.

    The expectation equals the rate exactly, and integer rates consume no
    randomness at all.
    """
    whole = int(math.floor(rate))
    frac = rate - whole
    if frac > 1e-12 and rng.random() < frac:
        whole += 1
    return whole


def _find_vehicle(idle_by_id: dict, routes: dict, origin, exact_charge,
                  min_charge_at_origin: int):
    """Exact-charge match at the origin, else the closest sufficient vehicle.

    Returns (agent, deadhead edge list) or (None, []).  Closest means fewest
    free-flow deadhead steps; ties break toward lower charge, then lower id.
    """
    at_origin = [a for a in idle_by_id.values()
                 if a.node == origin and a.charge == exact_charge]
    if at_origin:
        return min(at_origin, key=lambda a: a.id), []
    best = None
    for a in sorted(idle_by_id.values(), key=lambda a: a.id):
        if a.node == origin:
            dead, dead_charge, dead_steps = [], 0, 0
        else:
            r = routes.get((a.node, origin))
            if r is None:
                continue
            dead = list(r.edge_indices)
            dead_charge, dead_steps = r.charge_use, r.travel_steps
        if a.charge - dead_charge >= min_charge_at_origin:
            key = (dead_steps, a.charge, a.id)
            if best is None or key < best[0]:
                best = (key, a, dead)
    if best is None:
        return None, []
    return best[1], best[2]


def sample_actions(sol: LpSolution, asm: RhAssembly, agents, departing,
                   outstanding_pool, rng, lag: int = 0) -> Assignments:
    """Turn window flows at step 1+lag into integer tasks.

    departing lists (forecast request index, origin, destination, customer
    count) for requests whose customers materialize at the current world
    step.  lag is how many steps the world has advanced past the snapshot
    the solution was computed from; it is zero except in pipelined runs,
    where stale plans only act on the window step that lines up with now.
    Customers the distributions leave unmatched stay in the waiting pool.
    """
    problem = asm.problem
    cols = problem.col_index()
    routes = asm.forecasts.routes
    g = asm.forecasts.wgraph
    W, C = g.horizon, g.charge_levels
    out = Assignments()
    idle_by_id = {a.id: a for a in agents if a.idle}

    def value(tag):
        i = cols.get(tag)
        return max(0.0, float(sol.x[i])) if i is not None else 0.0

    def serve(customer, charge_pick, route):
        agent, deadhead = _find_vehicle(idle_by_id, routes, customer.origin,
                                        charge_pick, route.charge_use + 1)
        if agent is None:
            out.unserved.append(customer)
            return
        del idle_by_id[agent.id]
        out.serves.append((agent.id, customer,
                           deadhead + list(route.edge_indices)))

    now = asm.state.now + lag
    for i, origin, dest, count in departing:
        route = route_for(routes, origin, dest)
        levels = list(range(route.charge_use + 1, C + 1))
        masses = [value(tag_dep_in(i, c)) for c in levels]
        for _ in range(count):
            customer = Customer(origin, dest, born=now)
            pick = _draw(rng, levels, masses)
            if pick is None:
                out.unserved.append(customer)
            else:
                serve(customer, pick, route)

    # match live waiting groups to the groups the snapshot saw; with lag the
    # pool has aged, so live wait w corresponds to snapshot wait w - lag
    snap_index = {(str(r.origin), str(r.destination), r.waited): j
                  for j, r in enumerate(asm.state.outstanding)}
    live_groups = {}
    for c in outstanding_pool:
        live_groups.setdefault((str(c.origin), str(c.destination), c.waited),
                               []).append(c)
    for (o, d, w), members in sorted(live_groups.items()):
        j = snap_index.get((o, d, w - lag))
        if j is None:
            continue
        o_req = asm.state.outstanding[j]
        route = route_for(routes, o_req.origin, o_req.destination)
        cells = [(tau, c)
                 for tau in range(1, W - route.travel_steps + 1)
                 for c in range(route.charge_use + 1, C + 1)]
        masses = [value(tag_out_in(j, tau, c)) for tau, c in cells]
        for customer in sorted(members, key=lambda c: (c.born, id(c))):
            pick = _draw(rng, cells, masses)
            # a stale plan's "serve at once" intention executes late, at this
            # boundary; draws aimed further out re-enroll implicitly, since
            # the customer stays in the pool and ages one step
            if pick is not None and pick[0] <= 1 + lag:
                serve(customer, pick[1], route)

    station_slots = {ref: st.capacity for ref, st in enumerate(g.stations)}
    for agent in sorted(idle_by_id.values(), key=lambda a: a.id):
        options = asm.first_step_out.get((agent.node, agent.charge), ())
        kinds = [(kind, ei) for kind, ei, _ in options]
        weights = [value(tag) if tag is not None else 0.0
                   for _, _, tag in options]
        pick = _draw(rng, kinds, weights)
        if pick is None:
            continue
        kind, ei = pick
        if kind == REBALANCE:
            out.rebalances.append((agent.id, g.edges[ei].ref))
        elif kind in (CHARGE, DISCHARGE):
            ref = g.edges[ei].ref
            if station_slots[ref] < 1:
                continue    # integer draw overflowed a finite charger
            station_slots[ref] -= 1
            st = g.stations[ref]
            rate = st.charge_rate if kind == CHARGE else st.discharge_rate
            out.charges.append((agent.id, ref, rate))
    return out


# --- the world ------------------------------------------------------------------

@dataclass
class StepRecord:
    t: int
    vehicle_load: dict      # bus -> MW this step
    started: int            # service assignments made
    completions: int        # trips finished
    outstanding_after: int


@dataclass
class World:
    scenario: Scenario
    config: SimConfig
    routes: dict
    agents: list
    pool: list = field(default_factory=list)       # waiting customers
    t: int = 1
    completed: list = field(default_factory=list)  # (waited, travel steps)
    records: list = field(default_factory=list)

    def idle_counts(self) -> dict:
        counts = {}
        for a in self.agents:
            if a.idle:
                key = (a.node, a.charge)
                counts[key] = counts.get(key, 0) + 1
        return counts

    def enroute_arrivals(self) -> tuple:
        """Predicted (node, tau, charge, 1) for every vehicle on the move."""
        road = self.scenario.road
        out = []
        for a in self.agents:
            if not a.route:
                continue
            first = road.edges[a.route[0]]
            steps = a.edge_left if a.edge_left > 0 else first.traversal_time
            charge = a.charge - first.charge_cost
            for ei in a.route[1:]:
                steps += road.edges[ei].traversal_time
                charge -= road.edges[ei].charge_cost
            node = road.edges[a.route[-1]].head
            out.append((node, 1 + steps, charge, 1))
        return tuple(out)

    def committed_road(self) -> dict:
        """Future (edge, entry step) occupancy already promised to trips."""
        road = self.scenario.road
        out = {}
        for a in self.agents:
            if not a.route:
                continue
            tau = 1 if a.edge_left == 0 else 1 + a.edge_left
            for k, ei in enumerate(a.route):
                if k == 0 and a.edge_left > 0:
                    continue    # entered in the past; tau already skips it
                out[(ei, tau)] = out.get((ei, tau), 0) + 1
                tau += road.edges[ei].traversal_time
        return out


def step_world(world: World, assignments: Assignments, bus_of_station: dict,
               level_mw_per_rate: float) -> StepRecord:
    """Advance one step: start tasks, move vehicles, settle charges and loads."""
    road = world.scenario.road
    cfg = world.config
    agents = {a.id: a for a in world.agents}
    t = world.t

    for customer in assignments.unserved:
        if not any(c is customer for c in world.pool):
            world.pool.append(customer)
    for aid, customer, path in assignments.serves:
        a = agents[aid]
        a.task = SERVE
        a.route = list(path)
        a.payload = customer
        customer.assigned_at = t
        world.pool = [c for c in world.pool if c is not customer]
    for aid, ei in assignments.rebalances:
        a = agents[aid]
        a.task = REBALANCE
        a.route = [ei]

    vehicle_load = {}
    C = world.scenario.charge_levels
    for aid, ref, rate in assignments.charges:
        a = agents[aid]
        a.task = CHARGE if rate > 0 else DISCHARGE
        node = world.scenario.stations[ref].node
        bus = bus_of_station[node]
        vehicle_load[bus] = vehicle_load.get(bus, 0.0) + rate * level_mw_per_rate
        a.charge += rate
        if not 1 <= a.charge <= C:
            raise ScenarioError(f"vehicle {aid} charged outside 1..{C}")
        a.task = IDLE

    # vehicles entering a link this step; its travel time prices their crowd
    entering = [a for a in world.agents if a.route and a.edge_left == 0]
    flows = {}
    for a in entering:
        flows[a.route[0]] = flows.get(a.route[0], 0) + 1
    for a in entering:
        link = road.edges[a.route[0]]
        factor = 1.0
        if math.isfinite(link.capacity) and link.capacity > 0:
            factor = 1.0 + cfg.bpr_alpha * (flows[a.route[0]] / link.capacity) ** cfg.bpr_beta
        a.edge_left = max(1, int(math.ceil(link.traversal_time * factor - 1e-12)))
        a.node = None

    completions = 0
    for a in world.agents:
        if not a.route:
            continue
        a.edge_left -= 1
        if a.edge_left == 0:
            link = road.edges[a.route.pop(0)]
            a.charge -= link.charge_cost
            if not 1 <= a.charge <= C:
                raise ScenarioError(f"vehicle {a.id} drained outside 1..{C}")
            a.node = link.head
            if not a.route:
                if a.payload is not None:
                    c = a.payload
                    world.completed.append((c.waited, t - c.assigned_at + 1))
                    a.payload = None
                    completions += 1
                a.task = IDLE

    for c in world.pool:
        c.waited += 1

    rec = StepRecord(t=t, vehicle_load=vehicle_load,
                     started=len(assignments.serves),
                     completions=completions,
                     outstanding_after=len(world.pool))
    world.records.append(rec)
    world.t += 1
    return rec


# --- forecast slicing -----------------------------------------------------------

def _series_value(series, t: int) -> float:
    if isinstance(series, (int, float)):
        return float(series)
    return float(series[min(t, len(series)) - 1])


def _window_series(series, t0: int, w: int):
    if isinstance(series, (int, float)):
        return float(series)
    return tuple(_series_value(series, t0 + k) for k in range(w))


def _sliced_grid(grid: GridModel, t0: int, w: int,
                 demand_override: dict | None = None) -> GridModel:
    """Grid restricted to steps t0..t0+w-1, clamping series at their end."""
    gens = tuple(Generator(g.name, g.bus,
                           max_output=_window_series(g.max_output, t0, w),
                           min_output=_window_series(g.min_output, t0, w),
                           unit_cost=_window_series(g.unit_cost, t0, w),
                           ramp_up=_window_series(g.ramp_up, t0, w),
                           ramp_down=_window_series(g.ramp_down, t0, w))
                 for g in grid.generators)
    loads = []
    for l in grid.loads:
        if demand_override is None:
            demand = _window_series(l.demand, t0, w)
        else:
            demand = tuple(demand_override[(l.bus, t0 + k)] for k in range(w))
        loads.append(BusLoad(l.bus, demand=demand,
                             delivery_cap=_window_series(l.delivery_cap, t0, w)))
    return GridModel(grid.buses, grid.lines, gens, tuple(loads),
                     reference_bus=grid.reference_bus,
                     step_seconds=grid.step_seconds)


# --- episode reports -------------------------------------------------------------

@dataclass(frozen=True)
class SimReport:
    """Everything an episode produced, in plain comparable values."""

    mode: str
    steps: int
    fleet_size: int
    served: int
    dropped: int                # customers still waiting when the episode ended
    in_transit: int
    mean_customer_time_steps: float | None     # wait + travel among served
    vehicle_energy_mwh: float   # net energy the fleet drew from the grid
    vehicle_charge_mwh: float   # gross charging energy
    shed_mwh: float
    mean_lmp: float
    generation_cost: float
    tso_expenditure: float      # fleet's electricity bill at realized prices
    lmp: tuple                  # sorted (bus, t, $/MWh)
    exog_load: tuple            # sorted (bus, t, MW)
    vehicle_load: tuple         # sorted (bus, t, MW), negative = injection
    shed: tuple                 # sorted (bus, t, MW), zeros omitted
    outstanding_per_step: tuple
    served_per_step: tuple
    aborted: bool = False
    error: str = ""


def _empty_report(mode, fleet_size, error) -> SimReport:
    return SimReport(mode=mode, steps=0, fleet_size=fleet_size, served=0,
                     dropped=0, in_transit=0, mean_customer_time_steps=None,
                     vehicle_energy_mwh=0.0, vehicle_charge_mwh=0.0,
                     shed_mwh=0.0, mean_lmp=0.0, generation_cost=0.0,
                     tso_expenditure=0.0, lmp=(), exog_load=(), vehicle_load=(),
                     shed=(), outstanding_per_step=(), served_per_step=(),
                     aborted=True, error=error)


def _finish_report(world, scenario, cfg, mode, fleet_size, realized_exog,
                   vehicle_load_by_bus_t, served_per_step, outstanding_per_step,
                   steps, aborted=False, error="") -> SimReport:
    if steps < 1:
        return _empty_report(mode, fleet_size, error)
    grid = scenario.grid
    hours = grid.step_seconds / 3600.0
    egrid = _sliced_grid(grid, 1, steps, demand_override=realized_exog)
    # free disposal: sampled whole-vehicle discharges can overshoot the
    # system's realized demand, and spilled injection must not blow up the
    # settlement
    iso, _, _ = solve_dispatch(egrid, vehicle_load_by_bus_t, steps,
                               level_energy=scenario.fleet.level_energy,
                               shed_penalty=cfg.shed_penalty,
                               station_of_bus=scenario.station_of_bus,
                               free_disposal=True)

    lmp = tuple(sorted((str(b), t, float(v)) for (b, t), v in iso.lmp.items()))
    shed = tuple(sorted((str(b), t, float(v)) for (b, t), v in iso.shed.items()
                        if v > 1e-9))
    vload = tuple(sorted((str(b), t, float(v))
                         for (b, t), v in vehicle_load_by_bus_t.items()))
    exog = tuple(sorted((str(b), t, float(v))
                        for (b, t), v in realized_exog.items() if t <= steps))

    served = len(world.completed)
    mean_time = (sum(w + tr for w, tr in world.completed) / served
                 if served else None)
    in_transit = sum(1 for a in world.agents if a.payload is not None)
    net_mwh = sum(v for _, _, v in vload) * hours
    gross_mwh = sum(v for _, _, v in vload if v > 0) * hours
    shed_mwh = sum(v for _, _, v in shed) * hours
    mean_lmp = (sum(v for _, _, v in lmp) / len(lmp)) if lmp else 0.0
    expenditure = sum(iso.lmp.get((b, t), 0.0) * v * hours for b, t, v in vload)

    return SimReport(mode=mode, steps=steps, fleet_size=fleet_size,
                     served=served, dropped=len(world.pool),
                     in_transit=in_transit, mean_customer_time_steps=mean_time,
                     vehicle_energy_mwh=net_mwh, vehicle_charge_mwh=gross_mwh,
                     shed_mwh=shed_mwh, mean_lmp=mean_lmp,
                     generation_cost=float(iso.generation_cost),
                     tso_expenditure=float(expenditure),
                     lmp=lmp, exog_load=exog, vehicle_load=vload, shed=shed,
                     outstanding_per_step=tuple(outstanding_per_step),
                     served_per_step=tuple(served_per_step),
                     aborted=aborted, error=error)


# --- the episode loop -------------------------------------------------------------

def run_simulation(scenario: Scenario, mode: str = "coordinated",
                   config: SimConfig | None = None,
                   pipelined: bool = False) -> SimReport:
    """Run one episode in one mode; identical seeds share an identical world.

    Demand and power noise come from their own seeded streams, drawn every
    step in every mode, so baseline, uncoordinated, and coordinated runs
    with one seed face the same realized arrivals and exogenous loads.
    With pipelined=True each solve consumes the snapshot taken one decision
    epoch earlier (snapshot isolation): its assignments apply at the next
    boundary, and anything inconsistent with the live state is dropped.
    """
    if mode not in MODES:
        raise ScenarioError(f"unknown simulation mode {mode!r}; choose from {MODES}")
    cfg = config or scenario.sim
    episode = cfg.episode_steps
    grid = scenario.grid
    road = scenario.road
    level_mw = scenario.fleet.level_energy / (grid.step_seconds * 1e6)
    bus_of_station = {node: bus for bus, node in scenario.station_of_bus.items()}

    rng_demand = np.random.default_rng([cfg.seed, 1])
    rng_power = np.random.default_rng([cfg.seed, 2])
    rng_sample = np.random.default_rng([cfg.seed, 3])

    routes = precompute_routes(road)
    agents = [] if mode == "baseline" else materialize_agents(scenario.fleet)
    world = World(scenario, cfg, routes, agents=agents)
    fleet_size = len(agents)

    frozen_prices = None
    if mode == "uncoordinated":
        try:
            _, frozen_prices, _ = solve_dispatch(
                _sliced_grid(grid, 1, episode), None, episode,
                level_energy=scenario.fleet.level_energy,
                shed_penalty=cfg.shed_penalty,
                station_of_bus=scenario.station_of_bus)
        except LpError as exc:
            raise SimulationAborted(
                _empty_report(mode, fleet_size, f"baseline price solve: {exc}"), exc)

    wgraph = None
    if mode != "baseline":
        wgraph = build_expanded_graph(road, list(scenario.stations),
                                      cfg.lookahead_steps, scenario.charge_levels)

    realized_exog = {}
    vehicle_load_by_bus_t = {}
    served_per_step = []
    outstanding_per_step = []
    current = None      # (solution, assembly, dep_map) driving assignments
    pending = None      # freshly solved, not yet applied (pipelined only)

    def forecasts_at(t0, realized_counts):
        """Window view plus the forecast-index map for today's departures."""
        reqs = []
        dep_map = []
        for ri, r in enumerate(scenario.requests):
            tau = r.departure_time - t0 + 1
            if not (1 <= tau <= cfg.lookahead_steps) or r.departure_time > episode:
                continue
            rate = float(realized_counts.get(ri, r.rate)) if tau == 1 else r.rate
            dep_map.append((len(reqs), ri, tau))
            reqs.append((r.origin, r.destination, tau, rate))
        win_grid = None
        win_prices = None
        if mode == "coordinated":
            win_grid = _sliced_grid(grid, t0, cfg.lookahead_steps)
        else:
            win_prices = PriceTable(
                {(node, tau): frozen_prices.at(node, min(t0 + tau - 1, episode))
                 for node in bus_of_station
                 for tau in range(1, cfg.lookahead_steps + 1)})
        fc = RhForecasts(wgraph=wgraph, routes=routes, requests=tuple(reqs),
                         fleet=scenario.fleet, grid=win_grid, prices=win_prices,
                         bus_of_station=bus_of_station)
        return fc, tuple(dep_map)

    for t in range(1, episode + 1):
        # the exogenous world rolls the same dice in every mode
        realized_counts = {}
        for ri, r in enumerate(scenario.requests):
            if r.departure_time == t:
                eps = float(rng_demand.standard_normal())
                noisy = r.rate * max(0.0, 1.0 + cfg.transport_noise * eps)
                realized_counts[ri] = materialize_count(rng_demand, noisy)
        for l in grid.loads:
            eps = float(rng_power.standard_normal())
            realized_exog[(l.bus, t)] = (_series_value(l.demand, t)
                                         * max(0.0, 1.0 + cfg.power_noise * eps))

        assignments = Assignments()
        handled_departures = False
        if mode != "baseline":
            if (t - 1) % cfg.resolve_every_steps == 0:
                state = RhState(now=t, idle=world.idle_counts(),
                                arrivals=world.enroute_arrivals(),
                                outstanding=group_outstanding(world.pool),
                                committed_road=world.committed_road())
                fc, dep_map = forecasts_at(t, realized_counts)
                try:
                    asm = assemble_rh(state, fc, cfg)
                    sol = solve(asm.problem).require_optimal(f"window solve at t={t}")
                except LpError as exc:
                    raise SimulationAborted(
                        _finish_report(world, scenario, cfg, mode, fleet_size,
                                       realized_exog, vehicle_load_by_bus_t,
                                       served_per_step, outstanding_per_step,
                                       t - 1, aborted=True, error=str(exc)),
                        exc)
                if pipelined:
                    current, pending = pending, (sol, asm, dep_map)
                    if current is None:
                        current = pending   # bootstrap the first boundary
                else:
                    current = (sol, asm, dep_map)
            if current is not None:
                sol, asm, dep_map = current
                lag = t - asm.state.now
                departing = [(fi, scenario.requests[ri].origin,
                              scenario.requests[ri].destination,
                              realized_counts.get(ri, 0))
                             for fi, ri, tau in dep_map if tau == 1 + lag]
                if 0 <= lag < cfg.lookahead_steps:
                    handled_departures = True
                    assignments = sample_actions(sol, asm, world.agents,
                                                 departing, world.pool,
                                                 rng_sample, lag=lag)
        if not handled_departures:
            # no plan covers this step's arrivals; they queue for the next one
            for ri, n in sorted(realized_counts.items()):
                r = scenario.requests[ri]
                for _ in range(n):
                    assignments.unserved.append(
                        Customer(r.origin, r.destination, born=t))

        rec = step_world(world, assignments, bus_of_station, level_mw)
        for bus, mw in rec.vehicle_load.items():
            vehicle_load_by_bus_t[(bus, t)] = (vehicle_load_by_bus_t.get((bus, t), 0.0)
                                               + mw)
        served_per_step.append(rec.completions)
        outstanding_per_step.append(rec.outstanding_after)

    return _finish_report(world, scenario, cfg, mode, fleet_size, realized_exog,
                          vehicle_load_by_bus_t, served_per_step,
                          outstanding_per_step, episode)

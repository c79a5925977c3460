"""Deterministic scenario generators: micro, grid-ladder, and random.

All kinds are reproducible: the same (kind, params, seed) triple yields an
identical Scenario. The random kind guarantees request reachability and
dispatch feasibility by construction: every request gets dedicated vehicles
parked at its origin with enough charge for the trip, and the base generator
is sized above worst-case exogenous load plus the largest possible fleet draw.

Default economic constants are desk-scale stand-ins with realistic magnitudes:
value of time per US DOT guidance, per-mile operating cost per AAA, battery
wear from a compact EV pack price amortized over its cycle life, ramp limits
typical of nuclear and coal units, and an ERCOT-style value of lost load.
"""

from __future__ import annotations

import math

import numpy as np

from .gridlp import BusLoad, Generator, GridModel, Line
from .netmodel import (
    ChargingStation,
    FinalFleetState,
    FleetSpec,
    RoadEdge,
    RoadNetwork,
    ScenarioError,
    TripRequest,
)
from .scenario import Scenario, SimConfig

VALUE_OF_TIME_USD_PER_HOUR = 24.40
OPERATING_COST_USD_PER_MILE = 0.16
KM_PER_MILE = 1.609344
BATTERY_REPLACEMENT_USD = 15_734.0
BATTERY_LIFE_CYCLES = 1_000.0
NUCLEAR_RAMP_PER_HOUR = 0.10   # fraction of capacity
COAL_RAMP_PER_HOUR = 0.40
VALUE_OF_LOST_LOAD = 6000.0    # currency per MWh shed
TRANSPORT_NOISE_SIGMA = 0.10   # fraction of mean demand
POWER_NOISE_SIGMA = 0.05

STEP_SECONDS = 1800.0
LEVEL_ENERGY_J = 1.8e9         # 0.5 MWh per charge level


def wear_cost_per_level(charge_levels: int) -> float:
    """Battery depreciation per level moved: one cycle spans 2C level moves."""
    return BATTERY_REPLACEMENT_USD / (BATTERY_LIFE_CYCLES * 2 * charge_levels)


def _value_of_time_per_step(step_seconds: float) -> float:
    return VALUE_OF_TIME_USD_PER_HOUR * step_seconds / 3600.0


def _distance_cost_per_km() -> float:
    return OPERATING_COST_USD_PER_MILE / KM_PER_MILE


def _hop_distance(nodes, edges, origin):
    """Shortest hop count from origin to every node (unit traversal times)."""
    adj = {n: [] for n in nodes}
    for e in edges:
        adj[e.tail].append(e.head)
    dist = {origin: 0}
    frontier = [origin]
    while frontier:
        nxt = []
        for n in frontier:
            for m in adj[n]:
                if m not in dist:
                    dist[m] = dist[n] + 1
                    nxt.append(m)
        frontier = nxt
    return dist


def _fleet_for_requests(requests, dists, charge_levels):
    """Dedicated vehicles at each origin, charged for the trip plus reserve."""
    placement = {}
    for r in requests:
        hops = dists[r.origin][r.destination]
        key = (r.origin, min(charge_levels, hops + 1))
        placement[key] = placement.get(key, 0.0) + r.rate
    return placement


# --- micro -------------------------------------------------------------------

def _micro(params, seed):
    horizon = int(params.get("horizon", 4))
    levels = int(params.get("charge_levels", 3))
    road = RoadNetwork(
        ("a", "b"),
        (RoadEdge("a", "b", 1.5, 1, 1, capacity=math.inf),
         RoadEdge("b", "a", 1.5, 1, 1, capacity=math.inf)),
    )
    stations = (ChargingStation("a", 1, -1, math.inf),)
    fleet = FleetSpec(
        {("a", 1): 1.0, ("b", min(3, levels)): 1.0},
        FinalFleetState("min_charge", min_charge=1),
        battery_wear_cost=8.0, level_energy=LEVEL_ENERGY_J,
        value_of_time=25.0, distance_cost=0.1,
    )
    requests = (TripRequest("a", "b", 2, 1.0),
                TripRequest("b", "a", min(3, horizon), 1.0))
    grid = GridModel(
        buses=("b1", "b2"),
        lines=(Line("b1", "b2", reactance=0.1, flow_limit=50.0),),
        generators=(Generator("cheap", "b1", max_output=2.0, unit_cost=10.0),
                    Generator("dear", "b2", max_output=50.0, unit_cost=40.0)),
        loads=(BusLoad("b1", demand=0.2), BusLoad("b2", demand=1.5)),
        step_seconds=STEP_SECONDS,
    )
    sim = SimConfig(episode_steps=horizon, lookahead_steps=horizon,
                    end_charge_threshold=1, seed=seed)
    return Scenario("micro", horizon, STEP_SECONDS, levels, road, stations,
                    fleet, requests, grid, {"b1": "a"}, sim)


# --- grid-ladder -------------------------------------------------------------

def _grid_ladder(params, seed):
    k = int(params.get("road_nodes", 4))
    horizon = int(params.get("horizon", 6))
    levels = int(params.get("charge_levels", 4))
    tight = bool(params.get("tight", False))
    if k < 2:
        raise ScenarioError("grid-ladder needs road_nodes >= 2")
    if tight:
        return _grid_ladder_tight(k, int(params.get("horizon", 8)), levels, seed)

    nodes = tuple(f"r{i}" for i in range(k))
    edges = []
    for i in range(k - 1):
        edges.append(RoadEdge(nodes[i], nodes[i + 1], 2.0, 1, 1, capacity=math.inf))
        edges.append(RoadEdge(nodes[i + 1], nodes[i], 2.0, 1, 1, capacity=math.inf))
    road = RoadNetwork(nodes, tuple(edges))
    stations = tuple(ChargingStation(n, 1, -1, math.inf) for n in nodes)

    buses = tuple(f"g{i}" for i in range(k))
    lines = tuple(Line(buses[i], buses[i + 1], reactance=0.1, flow_limit=25.0)
                  for i in range(k - 1))
    demand = {b: tuple(round(0.6 + 0.1 * ((i + t) % 3), 2)
                       for t in range(horizon))
              for i, b in enumerate(buses)}
    exog_peak = max(sum(demand[b][t] for b in buses) for t in range(horizon))

    # commute out at step 1 and back at step 2, trip length capped by battery
    far = min(k - 1, levels - 1)
    requests = (TripRequest(nodes[0], nodes[far], 1, 1.0),
                TripRequest(nodes[far], nodes[0], 2, 1.0))
    dists = {nodes[0]: _hop_distance(nodes, edges, nodes[0]),
             nodes[far]: _hop_distance(nodes, edges, nodes[far])}
    placement = _fleet_for_requests(requests, dists, levels)
    fleet = FleetSpec(placement, FinalFleetState("min_charge", min_charge=1),
                      battery_wear_cost=wear_cost_per_level(levels),
                      level_energy=LEVEL_ENERGY_J,
                      value_of_time=_value_of_time_per_step(STEP_SECONDS),
                      distance_cost=round(_distance_cost_per_km(), 4))

    h = STEP_SECONDS / 3600.0
    level_mw = LEVEL_ENERGY_J / (STEP_SECONDS * 1e6)
    draw = sum(placement.values()) * max(s.charge_rate for s in stations) * level_mw
    base_cap = round(exog_peak + draw + 2.0, 2)
    base = Generator("base", buses[0], max_output=base_cap, unit_cost=10.0,
                     ramp_up=max(NUCLEAR_RAMP_PER_HOUR * base_cap * h, 1.0),
                     ramp_down=max(NUCLEAR_RAMP_PER_HOUR * base_cap * h, 1.0))
    peak = Generator("peak", buses[-1], max_output=30.0, unit_cost=45.0)
    grid = GridModel(buses, lines, (base, peak),
                     tuple(BusLoad(b, demand=demand[b]) for b in buses),
                     step_seconds=STEP_SECONDS)

    coupling = {buses[i]: nodes[i] for i in range(k)}
    sim = SimConfig(episode_steps=horizon, lookahead_steps=horizon,
                    end_charge_threshold=1, seed=seed)
    return Scenario("grid-ladder", horizon, STEP_SECONDS, levels, road, stations,
                    fleet, requests, grid, coupling, sim)


def _grid_ladder_tight(k, horizon, levels, seed):
    """Ladder variant where charging congests one weak line.

    The only charging station sits at the end of the chain, fed through the
    last line (8 MW) plus a small dear local unit.  Twenty vehicles each need
    one charge level before a bulk trip departs, and the cheap generator's
    cost dips at step 3, so a price-taking controller drops the entire 20 MW
    of charging on that step and overruns the 15 MW the far bus can supply.
    A grid-aware controller spreads the same energy under the line limit.
    The local unit costs half a percent over the base price, bounding the
    price impact of any charging pattern that stays within supply.
    """
    if k < 3:
        raise ScenarioError("tight grid-ladder needs road_nodes >= 3")
    if levels < 3:
        raise ScenarioError("tight grid-ladder needs charge_levels >= 3")
    if horizon < 8:
        raise ScenarioError("tight grid-ladder needs horizon >= 8")
    nodes = tuple(f"r{i}" for i in range(k))
    edges = []
    for i in range(k - 1):
        edges.append(RoadEdge(nodes[i], nodes[i + 1], 2.0, 1, 1, capacity=math.inf))
        edges.append(RoadEdge(nodes[i + 1], nodes[i], 2.0, 1, 1, capacity=math.inf))
    road = RoadNetwork(nodes, tuple(edges))
    stations = (ChargingStation(nodes[-1], 1, -1, math.inf),)

    fleet_size = 20.0
    fleet = FleetSpec({(nodes[-1], 2): fleet_size},
                      FinalFleetState("min_charge", min_charge=1),
                      battery_wear_cost=wear_cost_per_level(levels),
                      level_energy=LEVEL_ENERGY_J,
                      value_of_time=_value_of_time_per_step(STEP_SECONDS),
                      distance_cost=round(_distance_cost_per_km(), 4))
    # two hops out, so each vehicle must climb from charge 2 to 3 first
    requests = (TripRequest(nodes[-1], nodes[-3], 6, fleet_size),)

    buses = tuple(f"g{i}" for i in range(k))
    lines = tuple(Line(buses[i], buses[i + 1], reactance=0.1,
                       flow_limit=8.0 if i == k - 2 else 25.0)
                  for i in range(k - 1))
    demand = {b: tuple(round(0.6 + 0.1 * ((i + t) % 3), 2)
                       for t in range(horizon))
              for i, b in enumerate(buses)}
    base_cost = tuple(9.0 if t == 2 else 10.0 for t in range(horizon))
    base = Generator("base", buses[0], max_output=60.0, unit_cost=base_cost)
    local = Generator("local", buses[-1], max_output=7.0, unit_cost=10.05)
    grid = GridModel(buses, lines, (base, local),
                     tuple(BusLoad(b, demand=demand[b]) for b in buses),
                     step_seconds=STEP_SECONDS)

    coupling = {buses[-1]: nodes[-1]}
    sim = SimConfig(episode_steps=horizon, lookahead_steps=horizon,
                    end_charge_threshold=1, transport_noise=0.0,
                    power_noise=0.0, seed=seed)
    return Scenario("grid-ladder-tight", horizon, STEP_SECONDS, levels, road,
                    stations, fleet, requests, grid, coupling, sim)


# --- random ------------------------------------------------------------------

def _random(params, seed):
    rng = np.random.default_rng(seed)
    k = int(params.get("road_nodes", 4))
    n_bus = int(params.get("buses", 3))
    horizon = int(params.get("horizon", 6))
    levels = int(params.get("charge_levels", 4))
    n_req = int(params.get("requests", 2))
    n_stations = int(params.get("stations", min(2, n_bus, k)))
    if k < 2 or n_bus < 1 or n_stations < 1 or n_stations > min(n_bus, k):
        raise ScenarioError("random generator got inconsistent sizes")

    nodes = tuple(f"n{i}" for i in range(k))
    edges = []

    def connect(a, b):
        length = round(float(rng.uniform(0.5, 3.0)), 1)
        edges.append(RoadEdge(a, b, length, 1, 1, capacity=math.inf))
        edges.append(RoadEdge(b, a, length, 1, 1, capacity=math.inf))

    for i in range(1, k):
        connect(nodes[i], nodes[int(rng.integers(0, i))])
    pairs = {(e.tail, e.head) for e in edges}
    for i in range(k):
        for j in range(i + 1, k):
            if (nodes[i], nodes[j]) not in pairs and rng.random() < 0.25:
                connect(nodes[i], nodes[j])
    road = RoadNetwork(nodes, tuple(edges))

    station_nodes = [nodes[i] for i in rng.choice(k, size=n_stations, replace=False)]
    stations = tuple(ChargingStation(n, int(rng.integers(1, 3)) * 1, -1, math.inf)
                     for n in sorted(station_nodes))
    # symmetric rates keep the draw bound simple
    stations = tuple(ChargingStation(s.node, s.charge_rate, -s.charge_rate,
                                     s.capacity) for s in stations)

    buses = tuple(f"g{i}" for i in range(n_bus))
    lines = []
    for i in range(1, n_bus):
        lines.append(Line(buses[i], buses[int(rng.integers(0, i))],
                          reactance=round(float(rng.uniform(0.05, 0.2)), 2),
                          flow_limit=math.inf))
    coupled = [buses[i] for i in rng.choice(n_bus, size=n_stations, replace=False)]
    coupling = {bus: st.node for bus, st in zip(sorted(coupled), stations)}

    loads = tuple(BusLoad(b, demand=tuple(round(float(rng.uniform(0.3, 1.5)), 2)
                                          for _ in range(horizon)))
                  for b in buses)

    # requests whose trips fit both the horizon and the battery
    all_dists = {n: _hop_distance(nodes, edges, n) for n in nodes}
    max_hops = min(levels - 1, horizon - 1)
    requests = []
    for _ in range(n_req):
        for _try in range(60):
            o = nodes[int(rng.integers(0, k))]
            d = nodes[int(rng.integers(0, k))]
            hops = all_dists[o].get(d)
            if o != d and hops is not None and 1 <= hops <= max_hops:
                dep = int(rng.integers(1, max(2, horizon - hops + 1)))
                requests.append(TripRequest(o, d, dep,
                                            round(float(rng.uniform(0.2, 1.0)), 2)))
                break
    if not requests:
        raise ScenarioError("random generator could not place any request")
    requests = tuple(requests)

    placement = _fleet_for_requests(requests, all_dists, levels)
    roamer = (nodes[0], levels)
    placement[roamer] = placement.get(roamer, 0.0) + 1.0
    fleet = FleetSpec(placement, FinalFleetState("min_charge", min_charge=1),
                      battery_wear_cost=round(wear_cost_per_level(levels), 3),
                      level_energy=LEVEL_ENERGY_J,
                      value_of_time=round(_value_of_time_per_step(STEP_SECONDS), 2),
                      distance_cost=round(_distance_cost_per_km(), 4))

    level_mw = LEVEL_ENERGY_J / (STEP_SECONDS * 1e6)
    max_rate = max(s.charge_rate for s in stations)
    draw = sum(placement.values()) * max_rate * level_mw
    exog_peak = max(sum(l.demand[t] for l in loads) for t in range(horizon))
    gens = [Generator("base", buses[0],
                      max_output=round(exog_peak + draw + 1.0, 2),
                      unit_cost=round(float(rng.uniform(8.0, 14.0)), 2))]
    if n_bus > 1:
        gens.append(Generator("mid", buses[int(rng.integers(0, n_bus))],
                              max_output=round(exog_peak, 2),
                              unit_cost=round(float(rng.uniform(25.0, 45.0)), 2)))
    grid = GridModel(buses, tuple(lines), tuple(gens), loads,
                     step_seconds=STEP_SECONDS)

    sim = SimConfig(episode_steps=horizon, lookahead_steps=horizon,
                    end_charge_threshold=1, seed=seed)
    return Scenario(f"random-{seed}", horizon, STEP_SECONDS, levels, road,
                    stations, fleet, requests, grid, coupling, sim)


_KINDS = {"micro": _micro, "grid-ladder": _grid_ladder, "random": _random}


def generate_instance(kind: str, params: dict | None = None, seed: int = 0) -> Scenario:
    """Build a test scenario; identical inputs always yield identical output."""
    if kind not in _KINDS:
        raise ScenarioError(f"unknown instance kind {kind!r}; "
                            f"choose from {sorted(_KINDS)}")
    return _KINDS[kind](params or {}, seed)

"""Shared desk-scale instance builders."""

import math

from fleetgrid.gridlp import BusLoad, Generator, GridModel, Line
from fleetgrid.joint import CouplingMap
from fleetgrid.netmodel import (
    ChargingStation,
    FinalFleetState,
    FleetSpec,
    RoadEdge,
    RoadNetwork,
    TripRequest,
    build_expanded_graph,
)

HALF_HOUR = 1800.0
LEVEL_J = 1.8e9  # 0.5 MWh per charge level


def two_node_graph(horizon=4, charge_levels=3, station_rate=1, station_cap=math.inf):
    road = RoadNetwork(
        ("a", "b"),
        (RoadEdge("a", "b", 1.5, 1, 1, capacity=math.inf),
         RoadEdge("b", "a", 1.5, 1, 1, capacity=math.inf)),
    )
    st = ChargingStation("a", station_rate, -station_rate, station_cap)
    return build_expanded_graph(road, [st], horizon, charge_levels)


def two_bus_grid(horizon=4, cheap_cap=2.0, load2=1.5, line_limit=50.0):
    return GridModel(
        buses=("b1", "b2"),
        lines=(Line("b1", "b2", reactance=0.1, flow_limit=line_limit),),
        generators=(
            Generator("cheap", "b1", max_output=cheap_cap, unit_cost=10.0),
            Generator("dear", "b2", max_output=50.0, unit_cost=40.0),
        ),
        loads=(BusLoad("b1", demand=0.2), BusLoad("b2", demand=load2)),
        step_seconds=HALF_HOUR,
    )


def small_fleet(extra=None):
    dist = {("a", 1): 1.0, ("b", 3): 1.0}
    if extra:
        dist.update(extra)
    return FleetSpec(dist, FinalFleetState("min_charge", min_charge=1),
                     battery_wear_cost=0.05, level_energy=LEVEL_J,
                     value_of_time=6.0, distance_cost=0.1)


def two_requests():
    return [TripRequest("a", "b", 2, 1.0), TripRequest("b", "a", 2, 1.0)]


def micro_instance():
    """The standard 2-node/2-bus coupled test instance."""
    graph = two_node_graph()
    grid = two_bus_grid()
    fleet = small_fleet()
    cmap = CouplingMap(graph, {"b1": "a"}, HALF_HOUR)
    return graph, grid, fleet, two_requests(), cmap


def tipping_instance():
    """2-node/2-bus instance whose optimum sits strictly off every capacity kink.

    The fleet must buy one charge level in step 1 to cover its step-2 trip,
    and that megawatt tips the marginal unit from the cheap generator to the
    dear one, so negotiated prices have to travel. High battery wear keeps
    grid resale unprofitable, and waiting time is priced above the peak to
    off-peak spread so delaying the passenger past the expensive step never
    pays. That leaves both generators strictly interior at the optimum and
    makes the coupled prices unique.
    """
    graph = two_node_graph()
    grid = two_bus_grid(load2=1.5)
    fleet = FleetSpec({("a", 1): 1.0, ("b", 3): 1.0},
                      FinalFleetState("min_charge", min_charge=1),
                      battery_wear_cost=8.0, level_energy=LEVEL_J,
                      value_of_time=25.0, distance_cost=0.1)
    requests = [TripRequest("a", "b", 2, 1.0), TripRequest("b", "a", 3, 1.0)]
    cmap = CouplingMap(graph, {"b1": "a"}, HALF_HOUR)
    return graph, grid, fleet, requests, cmap

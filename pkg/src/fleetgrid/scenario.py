"""Scenario files: one versioned JSON document carrying every model input.

A scenario ties together the road network, charging stations, fleet, trip
requests, power grid, the station-to-bus coupling, and simulation settings.
Parsing is strict: unknown fields, type mismatches, and dangling references
are rejected with the JSON-pointer path of the offending element, and
save followed by load reproduces the original Scenario exactly.  Infinity is
spelled null in the file; per-step series may be written as a single number
or as a list with one entry per step.
"""

from __future__ import annotations

import importlib.resources
import json
import math
from dataclasses import dataclass, field

from .gridlp import BusLoad, Generator, GridError, GridModel, Line
from .joint import CouplingMap
from .netmodel import (
    ChargingStation,
    Diagnostic,
    FinalFleetState,
    FleetSpec,
    RoadEdge,
    RoadNetwork,
    ScenarioError,
    TripRequest,
    build_expanded_graph,
    validate_scenario,
)

FORMAT_NAME = "fleetgrid-scenario"
FORMAT_VERSION = 1


class SchemaError(ValueError):
    """A scenario file violation, located by a JSON pointer."""

    def __init__(self, pointer: str, message: str):
        self.pointer = pointer or "/"
        super().__init__(f"{self.pointer}: {message}")


def _esc(token) -> str:
    # JSON-pointer token escaping
    return str(token).replace("~", "~0").replace("/", "~1")


def _fail(ptr: str, msg: str):
    raise SchemaError(ptr or "/", msg)


# --- simulation settings -----------------------------------------------------

@dataclass(frozen=True)
class SimConfig:
    """Receding-horizon controller and world-stepping settings.

    The world advances one LP step at a time; the controller re-solves every
    `resolve_every_steps` world steps looking `lookahead_steps` ahead.
    """

    episode_steps: int = 8
    lookahead_steps: int = 8
    resolve_every_steps: int = 1
    end_charge_threshold: int = 1   # lowest admissible charge at the lookahead end
    drop_penalty: float = 1e4       # per request unit left unserved in the LP
    shed_penalty: float = 6000.0    # value of lost load, currency/MWh
    transport_noise: float = 0.10   # sigma as a fraction of mean demand
    power_noise: float = 0.05
    bpr_alpha: float = 0.15
    bpr_beta: float = 4.0
    seed: int = 0

    def __post_init__(self):
        for name in ("episode_steps", "lookahead_steps", "resolve_every_steps",
                     "end_charge_threshold"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ScenarioError(f"sim.{name} must be a positive integer")
        for name in ("drop_penalty", "shed_penalty", "transport_noise",
                     "power_noise", "bpr_alpha", "bpr_beta"):
            if getattr(self, name) < 0:
                raise ScenarioError(f"sim.{name} must be nonnegative")
        if not isinstance(self.seed, int):
            raise ScenarioError("sim.seed must be an integer")


# --- the aggregate -----------------------------------------------------------

@dataclass(frozen=True)
class Scenario:
    name: str
    horizon: int
    step_seconds: float
    charge_levels: int
    road: RoadNetwork
    stations: tuple
    fleet: FleetSpec
    requests: tuple
    grid: GridModel
    station_of_bus: dict    # bus -> road node hosting its station
    sim: SimConfig = field(default_factory=SimConfig)

    def __post_init__(self):
        object.__setattr__(self, "stations", tuple(self.stations))
        object.__setattr__(self, "requests", tuple(self.requests))
        station_nodes = {s.node for s in self.stations}
        buses = set(self.grid.buses)
        seen = set()
        for bus, node in self.station_of_bus.items():
            if bus not in buses:
                raise ScenarioError(f"coupling names unknown bus {bus!r}")
            if node not in station_nodes:
                raise ScenarioError(f"coupling maps {bus!r} to {node!r}, which hosts no station")
            if node in seen:
                raise ScenarioError(f"two buses mapped to the station at {node!r}")
            seen.add(node)
        missing = station_nodes - seen
        if missing:
            raise ScenarioError(f"stations without a bus: {sorted(map(str, missing))}")
        if self.sim.end_charge_threshold > self.charge_levels:
            raise ScenarioError("sim.end_charge_threshold exceeds charge_levels")

    def expand(self):
        """Build the time/charge-expanded graph and its grid coupling."""
        graph = build_expanded_graph(self.road, list(self.stations),
                                     self.horizon, self.charge_levels)
        cmap = CouplingMap(graph, dict(self.station_of_bus), self.step_seconds)
        return graph, cmap

    def validate(self) -> list:
        """Full diagnostic sweep; never raises."""
        out = validate_scenario(self.road, list(self.stations), self.fleet,
                                list(self.requests), self.horizon,
                                self.charge_levels)
        try:
            self.grid.check_connected()
        except GridError as exc:
            out.append(Diagnostic("error", str(exc)))
        return out


# --- field readers -----------------------------------------------------------

def _check_keys(obj, ptr, required, optional=()):
    if not isinstance(obj, dict):
        _fail(ptr, "expected an object")
    for key in obj:
        if key not in required and key not in optional:
            _fail(f"{ptr}/{_esc(key)}", "unknown field")
    for key in required:
        if key not in obj:
            _fail(ptr, f"missing required field {key!r}")


def _str_at(obj, key, ptr):
    v = obj[key]
    if not isinstance(v, str) or not v:
        _fail(f"{ptr}/{key}", "expected a nonempty string")
    return v


def _int_at(obj, key, ptr, minimum=None):
    v = obj[key]
    if isinstance(v, bool) or not isinstance(v, int):
        _fail(f"{ptr}/{key}", "expected an integer")
    if minimum is not None and v < minimum:
        _fail(f"{ptr}/{key}", f"must be >= {minimum}")
    return v


def _num(v, ptr, nonneg=False, allow_inf=False):
    if v is None:
        if allow_inf:
            return math.inf
        _fail(ptr, "null is not allowed here")
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        _fail(ptr, "expected a number")
    if not math.isfinite(v):
        _fail(ptr, "write infinity as null")
    if nonneg and v < 0:
        _fail(ptr, "must be nonnegative")
    return float(v)


def _num_at(obj, key, ptr, nonneg=False, allow_inf=False, default=None):
    if key not in obj:
        return default
    return _num(obj[key], f"{ptr}/{key}", nonneg=nonneg, allow_inf=allow_inf)


def _series_at(obj, key, ptr, horizon, nonneg=False, allow_inf=False, default=None):
    """A per-step quantity: one number, or a list with one entry per step."""
    if key not in obj:
        return default
    v = obj[key]
    here = f"{ptr}/{key}"
    if isinstance(v, list):
        if len(v) != horizon:
            _fail(here, f"series must have {horizon} entries, got {len(v)}")
        return tuple(_num(e, f"{here}/{i}", nonneg=nonneg, allow_inf=allow_inf)
                     for i, e in enumerate(v))
    return _num(v, here, nonneg=nonneg, allow_inf=allow_inf)


def _list_at(obj, key, ptr, min_len=0):
    v = obj[key]
    if not isinstance(v, list):
        _fail(f"{ptr}/{key}", "expected a list")
    if len(v) < min_len:
        _fail(f"{ptr}/{key}", f"needs at least {min_len} entries")
    return v


# --- parsing -----------------------------------------------------------------

def _parse_road(doc, nodes_ptr="/road"):
    _check_keys(doc, nodes_ptr, ("nodes", "edges"))
    raw_nodes = _list_at(doc, "nodes", nodes_ptr, min_len=1)
    nodes = []
    for i, n in enumerate(raw_nodes):
        if not isinstance(n, str) or not n:
            _fail(f"{nodes_ptr}/nodes/{i}", "node ids must be nonempty strings")
        if n in nodes:
            _fail(f"{nodes_ptr}/nodes/{i}", f"duplicate node id {n!r}")
        nodes.append(n)
    known = set(nodes)
    edges = []
    for i, e in enumerate(_list_at(doc, "edges", nodes_ptr)):
        ptr = f"{nodes_ptr}/edges/{i}"
        _check_keys(e, ptr, ("tail", "head", "length_km", "traversal_time",
                             "charge_cost"), optional=("capacity",))
        tail = _str_at(e, "tail", ptr)
        head = _str_at(e, "head", ptr)
        for end, val in (("tail", tail), ("head", head)):
            if val not in known:
                _fail(f"{ptr}/{end}", f"unknown road node {val!r}")
        edges.append(RoadEdge(
            tail, head,
            _num(e["length_km"], f"{ptr}/length_km", nonneg=True),
            _int_at(e, "traversal_time", ptr, minimum=1),
            _int_at(e, "charge_cost", ptr),
            _num_at(e, "capacity", ptr, nonneg=True, allow_inf=True,
                    default=math.inf),
        ))
    return RoadNetwork(tuple(nodes), tuple(edges)), known


def _parse_stations(doc, known_nodes):
    stations = []
    seen = set()
    for i, s in enumerate(doc):
        ptr = f"/stations/{i}"
        _check_keys(s, ptr, ("node", "charge_rate", "discharge_rate"),
                    optional=("capacity",))
        node = _str_at(s, "node", ptr)
        if node not in known_nodes:
            _fail(f"{ptr}/node", f"unknown road node {node!r}")
        if node in seen:
            _fail(f"{ptr}/node", f"second station at {node!r}")
        seen.add(node)
        stations.append(ChargingStation(
            node,
            _int_at(s, "charge_rate", ptr, minimum=1),
            _int_at(s, "discharge_rate", ptr),
            _num_at(s, "capacity", ptr, nonneg=True, allow_inf=True,
                    default=math.inf),
        ))
    return tuple(stations)


def _parse_counts(doc, ptr, known_nodes, charge_levels):
    out = {}
    for i, entry in enumerate(doc):
        here = f"{ptr}/{i}"
        _check_keys(entry, here, ("node", "charge", "count"))
        node = _str_at(entry, "node", here)
        if node not in known_nodes:
            _fail(f"{here}/node", f"unknown road node {node!r}")
        charge = _int_at(entry, "charge", here, minimum=1)
        if charge > charge_levels:
            _fail(f"{here}/charge", f"charge {charge} exceeds charge_levels")
        if (node, charge) in out:
            _fail(here, f"duplicate entry for node {node!r} charge {charge}")
        out[(node, charge)] = _num(entry["count"], f"{here}/count", nonneg=True)
    return out


def _parse_fleet(doc, known_nodes, charge_levels, level_energy):
    ptr = "/fleet"
    _check_keys(doc, ptr, ("initial_distribution", "final_state",
                           "battery_wear_cost", "value_of_time",
                           "distance_cost"))
    dist = _parse_counts(_list_at(doc, "initial_distribution", ptr, min_len=1),
                         f"{ptr}/initial_distribution", known_nodes, charge_levels)
    fs = doc["final_state"]
    fptr = f"{ptr}/final_state"
    if not isinstance(fs, dict) or "mode" not in fs:
        _fail(fptr, "expected an object with a 'mode' field")
    mode = _str_at(fs, "mode", fptr)
    if mode == "min_charge":
        _check_keys(fs, fptr, ("mode", "min_charge"))
        final = FinalFleetState("min_charge",
                                min_charge=_int_at(fs, "min_charge", fptr, minimum=1))
    elif mode == "fixed":
        _check_keys(fs, fptr, ("mode", "counts"))
        counts = _parse_counts(_list_at(fs, "counts", fptr, min_len=1),
                               f"{fptr}/counts", known_nodes, charge_levels)
        final = FinalFleetState("fixed", counts=counts)
    else:
        _fail(f"{fptr}/mode", f"unknown mode {mode!r}; use 'min_charge' or 'fixed'")
    return FleetSpec(
        dist, final,
        battery_wear_cost=_num(doc["battery_wear_cost"],
                               f"{ptr}/battery_wear_cost", nonneg=True),
        level_energy=level_energy,
        value_of_time=_num(doc["value_of_time"], f"{ptr}/value_of_time", nonneg=True),
        distance_cost=_num(doc["distance_cost"], f"{ptr}/distance_cost", nonneg=True),
    )


def _parse_requests(doc, known_nodes, horizon):
    out = []
    for i, r in enumerate(doc):
        ptr = f"/requests/{i}"
        _check_keys(r, ptr, ("origin", "destination", "departure_time", "rate"))
        origin = _str_at(r, "origin", ptr)
        dest = _str_at(r, "destination", ptr)
        for end, val in (("origin", origin), ("destination", dest)):
            if val not in known_nodes:
                _fail(f"{ptr}/{end}", f"unknown road node {val!r}")
        if origin == dest:
            _fail(ptr, "origin equals destination")
        dep = _int_at(r, "departure_time", ptr, minimum=1)
        if dep > horizon:
            _fail(f"{ptr}/departure_time", f"departure {dep} exceeds horizon")
        out.append(TripRequest(origin, dest, dep,
                               _num(r["rate"], f"{ptr}/rate", nonneg=True)))
    return tuple(out)


def _parse_grid(doc, horizon, step_seconds):
    ptr = "/grid"
    _check_keys(doc, ptr, ("buses", "lines", "generators", "loads"),
                optional=("reference_bus",))
    buses = []
    for i, b in enumerate(_list_at(doc, "buses", ptr, min_len=1)):
        if not isinstance(b, str) or not b:
            _fail(f"{ptr}/buses/{i}", "bus ids must be nonempty strings")
        if b in buses:
            _fail(f"{ptr}/buses/{i}", f"duplicate bus id {b!r}")
        buses.append(b)
    known = set(buses)
    reference = doc.get("reference_bus", buses[0])
    if reference not in known:
        _fail(f"{ptr}/reference_bus", f"unknown bus {reference!r}")

    lines = []
    for i, ln in enumerate(_list_at(doc, "lines", ptr)):
        here = f"{ptr}/lines/{i}"
        _check_keys(ln, here, ("bus_a", "bus_b", "reactance"),
                    optional=("flow_limit",))
        a = _str_at(ln, "bus_a", here)
        b = _str_at(ln, "bus_b", here)
        for end, val in (("bus_a", a), ("bus_b", b)):
            if val not in known:
                _fail(f"{here}/{end}", f"unknown bus {val!r}")
        lines.append(Line(a, b,
                          _num(ln["reactance"], f"{here}/reactance"),
                          _num_at(ln, "flow_limit", here, nonneg=True,
                                  allow_inf=True, default=math.inf)))

    gens = []
    names = set()
    for i, g in enumerate(_list_at(doc, "generators", ptr)):
        here = f"{ptr}/generators/{i}"
        _check_keys(g, here, ("name", "bus", "max_output"),
                    optional=("min_output", "unit_cost", "ramp_up", "ramp_down"))
        name = _str_at(g, "name", here)
        if name in names:
            _fail(f"{here}/name", f"duplicate generator name {name!r}")
        names.add(name)
        bus = _str_at(g, "bus", here)
        if bus not in known:
            _fail(f"{here}/bus", f"unknown bus {bus!r}")
        gens.append(Generator(
            name, bus,
            max_output=_series_at(g, "max_output", here, horizon, nonneg=True,
                                  allow_inf=True),
            min_output=_series_at(g, "min_output", here, horizon, nonneg=True,
                                  default=0.0),
            unit_cost=_series_at(g, "unit_cost", here, horizon, default=0.0),
            ramp_up=_series_at(g, "ramp_up", here, horizon, nonneg=True,
                               allow_inf=True, default=math.inf),
            ramp_down=_series_at(g, "ramp_down", here, horizon, nonneg=True,
                                 allow_inf=True, default=math.inf),
        ))

    loads = []
    load_buses = set()
    for i, l in enumerate(_list_at(doc, "loads", ptr)):
        here = f"{ptr}/loads/{i}"
        _check_keys(l, here, ("bus", "demand"), optional=("delivery_cap",))
        bus = _str_at(l, "bus", here)
        if bus not in known:
            _fail(f"{here}/bus", f"unknown bus {bus!r}")
        if bus in load_buses:
            _fail(f"{here}/bus", f"second load at bus {bus!r}")
        load_buses.add(bus)
        loads.append(BusLoad(
            bus,
            demand=_series_at(l, "demand", here, horizon),
            delivery_cap=_series_at(l, "delivery_cap", here, horizon,
                                    nonneg=True, allow_inf=True,
                                    default=math.inf),
        ))
    return GridModel(tuple(buses), tuple(lines), tuple(gens), tuple(loads),
                     reference_bus=reference, step_seconds=step_seconds)


def _parse_sim(doc):
    ptr = "/sim"
    fields = ("episode_steps", "lookahead_steps", "resolve_every_steps",
              "end_charge_threshold", "drop_penalty", "shed_penalty",
              "transport_noise", "power_noise", "bpr_alpha", "bpr_beta", "seed")
    _check_keys(doc, ptr, (), optional=fields)
    kwargs = {}
    for key in ("episode_steps", "lookahead_steps", "resolve_every_steps",
                "end_charge_threshold"):
        if key in doc:
            kwargs[key] = _int_at(doc, key, ptr, minimum=1)
    for key in ("drop_penalty", "shed_penalty", "transport_noise",
                "power_noise", "bpr_alpha", "bpr_beta"):
        if key in doc:
            kwargs[key] = _num(doc[key], f"{ptr}/{key}", nonneg=True)
    if "seed" in doc:
        kwargs["seed"] = _int_at(doc, "seed", ptr, minimum=0)
    return SimConfig(**kwargs)


def _domain(ptr, fn, *args):
    # constructor-level invariants surface as schema errors at the section
    try:
        return fn(*args)
    except (ScenarioError, GridError) as exc:
        _fail(ptr, str(exc))


def parse_scenario(doc) -> Scenario:
    _check_keys(doc, "", ("format", "version", "horizon", "step_seconds",
                          "charge_levels", "level_energy_joules", "road",
                          "stations", "fleet", "requests", "grid", "coupling"),
                optional=("name", "sim"))
    if doc["format"] != FORMAT_NAME:
        _fail("/format", f"expected {FORMAT_NAME!r}")
    if doc["version"] != FORMAT_VERSION:
        _fail("/version", f"unsupported version {doc['version']!r}; "
                          f"this build reads version {FORMAT_VERSION}")
    horizon = _int_at(doc, "horizon", "", minimum=1)
    charge_levels = _int_at(doc, "charge_levels", "", minimum=1)
    step_seconds = _num(doc["step_seconds"], "/step_seconds")
    if step_seconds <= 0:
        _fail("/step_seconds", "must be positive")
    level_energy = _num(doc["level_energy_joules"], "/level_energy_joules")
    if level_energy <= 0:
        _fail("/level_energy_joules", "must be positive")
    name = ""
    if "name" in doc:
        name = doc["name"]
        if not isinstance(name, str):
            _fail("/name", "expected a string")

    road, known_nodes = _domain("/road", _parse_road, doc["road"])
    raw_st = _list_at(doc, "stations", "")
    stations = _domain("/stations", _parse_stations, raw_st, known_nodes)
    fleet = _domain("/fleet", _parse_fleet, doc["fleet"], known_nodes,
                    charge_levels, level_energy)
    requests = _domain("/requests", _parse_requests,
                       _list_at(doc, "requests", ""), known_nodes, horizon)
    grid = _domain("/grid", _parse_grid, doc["grid"], horizon, step_seconds)

    coupling_doc = doc["coupling"]
    if not isinstance(coupling_doc, dict):
        _fail("/coupling", "expected an object mapping bus ids to station nodes")
    station_nodes = {s.node for s in stations}
    coupling = {}
    used = set()
    for bus, node in coupling_doc.items():
        here = f"/coupling/{_esc(bus)}"
        if bus not in set(grid.buses):
            _fail(here, f"unknown bus {bus!r}")
        if not isinstance(node, str) or node not in station_nodes:
            _fail(here, f"{node!r} hosts no charging station")
        if node in used:
            _fail(here, f"station at {node!r} already coupled to another bus")
        used.add(node)
        coupling[bus] = node
    uncoupled = station_nodes - used
    if uncoupled:
        _fail("/coupling", f"stations without a bus: {sorted(map(str, uncoupled))}")

    sim = _parse_sim(doc["sim"]) if "sim" in doc else SimConfig()
    try:
        return Scenario(name, horizon, step_seconds, charge_levels, road,
                        stations, fleet, requests, grid, coupling, sim)
    except (ScenarioError, GridError) as exc:
        # constructor-level invariants the field checks cannot see
        _fail("/", str(exc))


def load_scenario(path) -> Scenario:
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except ValueError as exc:
            raise SchemaError("/", f"not valid JSON: {exc}") from exc
    return parse_scenario(doc)


def bundled_scenario_path(name: str = "micro"):
    """Filesystem path of a scenario file shipped inside the package."""
    root = importlib.resources.files("fleetgrid") / "data" / f"{name}.json"
    if not root.is_file():
        raise FileNotFoundError(f"no bundled scenario named {name!r}")
    return root


# --- serialization -----------------------------------------------------------

def _jnum(v):
    return None if math.isinf(v) else v


def _jseries(v):
    if isinstance(v, (tuple, list)):
        return [_jnum(float(x)) for x in v]
    return _jnum(float(v))


def _counts_doc(counts):
    return [{"node": node, "charge": charge, "count": n}
            for (node, charge), n in sorted(counts.items(),
                                            key=lambda kv: (str(kv[0][0]), kv[0][1]))]


def scenario_to_doc(s: Scenario) -> dict:
    fs = s.fleet.final_state
    if fs.mode == "min_charge":
        final = {"mode": "min_charge", "min_charge": fs.min_charge}
    else:
        final = {"mode": "fixed", "counts": _counts_doc(fs.counts)}
    return {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "name": s.name,
        "horizon": s.horizon,
        "step_seconds": s.step_seconds,
        "charge_levels": s.charge_levels,
        "level_energy_joules": s.fleet.level_energy,
        "road": {
            "nodes": list(s.road.nodes),
            "edges": [{"tail": e.tail, "head": e.head, "length_km": e.length_km,
                       "traversal_time": e.traversal_time,
                       "charge_cost": e.charge_cost, "capacity": _jnum(e.capacity)}
                      for e in s.road.edges],
        },
        "stations": [{"node": st.node, "charge_rate": st.charge_rate,
                      "discharge_rate": st.discharge_rate,
                      "capacity": _jnum(st.capacity)} for st in s.stations],
        "fleet": {
            "initial_distribution": _counts_doc(s.fleet.initial_distribution),
            "final_state": final,
            "battery_wear_cost": s.fleet.battery_wear_cost,
            "value_of_time": s.fleet.value_of_time,
            "distance_cost": s.fleet.distance_cost,
        },
        "requests": [{"origin": r.origin, "destination": r.destination,
                      "departure_time": r.departure_time, "rate": r.rate}
                     for r in s.requests],
        "grid": {
            "buses": list(s.grid.buses),
            "reference_bus": s.grid.reference_bus,
            "lines": [{"bus_a": ln.bus_a, "bus_b": ln.bus_b,
                       "reactance": ln.reactance,
                       "flow_limit": _jnum(ln.flow_limit)} for ln in s.grid.lines],
            "generators": [{"name": g.name, "bus": g.bus,
                            "max_output": _jseries(g.max_output),
                            "min_output": _jseries(g.min_output),
                            "unit_cost": _jseries(g.unit_cost),
                            "ramp_up": _jseries(g.ramp_up),
                            "ramp_down": _jseries(g.ramp_down)}
                           for g in s.grid.generators],
            "loads": [{"bus": l.bus, "demand": _jseries(l.demand),
                       "delivery_cap": _jseries(l.delivery_cap)}
                      for l in s.grid.loads],
        },
        "coupling": {bus: node for bus, node in sorted(s.station_of_bus.items(),
                                                       key=lambda kv: str(kv[0]))},
        "sim": {
            "episode_steps": s.sim.episode_steps,
            "lookahead_steps": s.sim.lookahead_steps,
            "resolve_every_steps": s.sim.resolve_every_steps,
            "end_charge_threshold": s.sim.end_charge_threshold,
            "drop_penalty": s.sim.drop_penalty,
            "shed_penalty": s.sim.shed_penalty,
            "transport_noise": s.sim.transport_noise,
            "power_noise": s.sim.power_noise,
            "bpr_alpha": s.sim.bpr_alpha,
            "bpr_beta": s.sim.bpr_beta,
            "seed": s.sim.seed,
        },
    }


def save_scenario(s: Scenario, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(scenario_to_doc(s), fh, indent=2, sort_keys=True)
        fh.write("\n")


# --- discretization helpers --------------------------------------------------

def kwh_to_levels(kwh: float, level_energy_joules: float) -> int:
    """Half-up rounding of a raw energy figure onto the charge ladder."""
    levels = kwh * 3.6e6 / level_energy_joules
    return int(math.floor(levels + 0.5))


def duration_to_steps(seconds: float, step_seconds: float) -> int:
    """Ceiling rounding: travel times never get optimistic."""
    return max(1, int(math.ceil(seconds / step_seconds - 1e-12)))

"""DC power network model, economic dispatch LP, and marginal prices.

Dispatch minimizes generation cost over generator outputs and bus phase
angles under DC power flow.  Each load bus gets an explicit delivered-power
variable tied to the exogenous demand by an equality row; the joint problem
later splices vehicle charging terms into that same row.  Keeping delivery as
a variable (rather than folding the data into the balance rhs) is what makes
the delivery-cap row a real constraint with a dual, so the marginal price of
power at a bus decomposes as balance dual plus cap dual.

Units: power in MW, energy in MWh, one LP step lasting step_seconds.  The
objective is plain currency, so a demand-row dual is currency per MW-step and
is divided by the step's hour count to report $/MWh.
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .lpcore import LpBuilder, LpProblem, LpSolution, LpStatus, solve

log = logging.getLogger(__name__)

JOULES_PER_MWH = 3.6e9
WATTS_PER_MW = 1e6


class GridError(Exception):
    """Grid model or dispatch extraction violated a structural requirement."""


def _series(value, horizon: int, what: str) -> tuple[float, ...]:
    """Broadcast a scalar or validate a per-step sequence of length horizon."""
    if isinstance(value, (int, float)):
        return (float(value),) * horizon
    vals = tuple(float(v) for v in value)
    if len(vals) != horizon:
        raise GridError(f"{what}: expected {horizon} entries, got {len(vals)}")
    return vals


@dataclass(frozen=True)
class Line:
    bus_a: object
    bus_b: object
    reactance: float
    flow_limit: float  # MW; inf = uncapped

    def __post_init__(self):
        if self.reactance <= 0:
            raise GridError(f"line {self.bus_a!r}-{self.bus_b!r}: reactance must be positive")
        if self.flow_limit < 0:
            raise GridError(f"line {self.bus_a!r}-{self.bus_b!r}: negative flow limit")


@dataclass(frozen=True)
class Generator:
    name: str
    bus: object
    max_output: object          # MW, scalar or per-step sequence
    min_output: object = 0.0
    unit_cost: object = 0.0     # currency per MWh
    ramp_up: object = math.inf  # MW change allowed per step
    ramp_down: object = math.inf


@dataclass(frozen=True)
class BusLoad:
    bus: object
    demand: object              # MW, scalar or per-step sequence
    delivery_cap: object = math.inf


@dataclass(frozen=True)
class GridModel:
    buses: tuple
    lines: tuple[Line, ...]
    generators: tuple[Generator, ...]
    loads: tuple[BusLoad, ...]
    reference_bus: object = None  # default: first bus
    step_seconds: float = 3600.0

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "lines", tuple(self.lines))
        object.__setattr__(self, "generators", tuple(self.generators))
        object.__setattr__(self, "loads", tuple(self.loads))
        known = set(self.buses)
        if len(known) != len(self.buses):
            raise GridError("duplicate bus ids")
        for ln in self.lines:
            if ln.bus_a not in known or ln.bus_b not in known:
                raise GridError(f"line {ln.bus_a!r}-{ln.bus_b!r} references unknown bus")
        names = set()
        for g in self.generators:
            if g.bus not in known:
                raise GridError(f"generator {g.name!r} at unknown bus {g.bus!r}")
            if g.name in names:
                raise GridError(f"duplicate generator name {g.name!r}")
            names.add(g.name)
        load_buses = set()
        for l in self.loads:
            if l.bus not in known:
                raise GridError(f"load at unknown bus {l.bus!r}")
            if l.bus in load_buses:
                raise GridError(f"multiple loads at bus {l.bus!r}; merge them")
            load_buses.add(l.bus)
        if self.reference_bus is None:
            object.__setattr__(self, "reference_bus", self.buses[0])
        elif self.reference_bus not in known:
            raise GridError(f"reference bus {self.reference_bus!r} not in grid")
        if self.step_seconds <= 0:
            raise GridError("step_seconds must be positive")

    @property
    def step_hours(self) -> float:
        return self.step_seconds / 3600.0

    def check_connected(self) -> None:
        if len(self.buses) <= 1:
            return
        adj: dict = {b: [] for b in self.buses}
        for ln in self.lines:
            adj[ln.bus_a].append(ln.bus_b)
            adj[ln.bus_b].append(ln.bus_a)
        seen = {self.buses[0]}
        queue = deque(seen)
        while queue:
            for nxt in adj[queue.popleft()]:
                if nxt not in seen:
                    seen.add(nxt)
                    queue.append(nxt)
        if len(seen) != len(self.buses):
            missing = [b for b in self.buses if b not in seen]
            raise GridError(f"grid is disconnected; unreachable buses: {missing!r}")


# row/column tag helpers, shared with the joint assembler
def tag_gen(name, t):
    return f"p@{name}@{t}"

def tag_theta(bus, t):
    return f"th@{bus}@{t}"

def tag_delivered(bus, t):
    return f"dl@{bus}@{t}"

def tag_shed(bus, t):
    return f"shed@{bus}@{t}"

def tag_surplus(bus, t):
    return f"spill@{bus}@{t}"

def tag_balance(bus, t):
    return f"pbal@{bus}@{t}"

def tag_demand(bus, t):
    return f"dem@{bus}@{t}"

def tag_cap(bus, t):
    return f"delivcap@{bus}@{t}"


@dataclass(frozen=True)
class DispatchAssembly:
    """LpProblem plus the indexing needed to read a solution back."""

    problem: LpProblem
    grid: GridModel
    horizon: int
    shed_enabled: bool
    objective_offset: float = 0.0  # constant added to the LP objective


def add_dispatch_block(bld: LpBuilder, grid: GridModel, extra_load: dict,
                       horizon: int, shed_penalty: float | None,
                       free_disposal: bool = False) -> None:
    """Write dispatch variables and rows into an existing builder.

    The joint assembler reuses this block verbatim and then splices station
    flow terms into the demand rows, so dispatch structure lives here once.
    free_disposal adds a zero-cost surplus column per load bus, letting the
    bus absorb more power than it demands (curtailed vehicle injection); it
    also floors the LMP at zero wherever disposal is possible.
    """
    grid.check_connected()
    hours = grid.step_hours
    gen_series = []
    for g in grid.generators:
        pmax = _series(g.max_output, horizon, f"generator {g.name!r} max_output")
        pmin = _series(g.min_output, horizon, f"generator {g.name!r} min_output")
        cost = _series(g.unit_cost, horizon, f"generator {g.name!r} unit_cost")
        rup = _series(g.ramp_up, horizon, f"generator {g.name!r} ramp_up")
        rdn = _series(g.ramp_down, horizon, f"generator {g.name!r} ramp_down")
        for t in range(horizon):
            if pmin[t] > pmax[t]:
                raise GridError(f"generator {g.name!r}: min_output > max_output at step {t + 1}")
            if rup[t] < 0 or rdn[t] < 0:
                raise GridError(f"generator {g.name!r}: negative ramp limit")
        gen_series.append((pmax, pmin, cost, rup, rdn))

    for g, (pmax, pmin, cost, _, _) in zip(grid.generators, gen_series):
        for t in range(1, horizon + 1):
            bld.add_col(tag_gen(g.name, t), lb=pmin[t - 1], ub=pmax[t - 1],
                        obj=cost[t - 1] * hours)
    for bus in grid.buses:
        for t in range(1, horizon + 1):
            if bus == grid.reference_bus:
                bld.add_col(tag_theta(bus, t), lb=0.0, ub=0.0)
            else:
                bld.add_col(tag_theta(bus, t), lb=-math.inf, ub=math.inf)
    for l in grid.loads:
        for t in range(1, horizon + 1):
            bld.add_col(tag_delivered(l.bus, t), lb=-math.inf, ub=math.inf)
    if shed_penalty is not None:
        for l in grid.loads:
            for t in range(1, horizon + 1):
                bld.add_col(tag_shed(l.bus, t), lb=0.0, obj=shed_penalty * hours)

    # power balance per (bus, t): generation - delivery - net line outflow = 0
    for bus in grid.buses:
        for t in range(1, horizon + 1):
            bld.add_row(tag_balance(bus, t), "=", 0.0)
    for g in grid.generators:
        for t in range(1, horizon + 1):
            bld.add_coef(bld.row(tag_balance(g.bus, t)), bld.col(tag_gen(g.name, t)), 1.0)
    for l in grid.loads:
        for t in range(1, horizon + 1):
            bld.add_coef(bld.row(tag_balance(l.bus, t)), bld.col(tag_delivered(l.bus, t)), -1.0)
    for ln in grid.lines:
        sus = 1.0 / ln.reactance
        for t in range(1, horizon + 1):
            ra = bld.row(tag_balance(ln.bus_a, t))
            rb = bld.row(tag_balance(ln.bus_b, t))
            ca = bld.col(tag_theta(ln.bus_a, t))
            cb = bld.col(tag_theta(ln.bus_b, t))
            # flow a->b = (theta_a - theta_b)/x leaves a and enters b
            bld.add_coef(ra, ca, -sus)
            bld.add_coef(ra, cb, sus)
            bld.add_coef(rb, ca, sus)
            bld.add_coef(rb, cb, -sus)

    # delivered power matches exogenous demand (joint adds vehicle terms here)
    for l in grid.loads:
        dem = _series(l.demand, horizon, f"load at {l.bus!r} demand")
        cap = _series(l.delivery_cap, horizon, f"load at {l.bus!r} delivery_cap")
        for t in range(1, horizon + 1):
            extra = float(extra_load.get((l.bus, t), 0.0))
            r = bld.add_row(tag_demand(l.bus, t), "=", dem[t - 1] + extra)
            bld.add_coef(r, bld.col(tag_delivered(l.bus, t)), 1.0)
            if shed_penalty is not None:
                # shed power is demand the grid is excused from delivering;
                # at an interior shed level the demand dual pins to the penalty
                bld.add_coef(r, bld.col(tag_shed(l.bus, t)), 1.0)
            if free_disposal:
                bld.add_coef(r, bld.add_col(tag_surplus(l.bus, t)), -1.0)
            if math.isfinite(cap[t - 1]):
                rc = bld.add_row(tag_cap(l.bus, t), "<", cap[t - 1])
                bld.add_coef(rc, bld.col(tag_delivered(l.bus, t)), 1.0)

    load_buses = {l.bus for l in grid.loads}
    for (bus, t) in extra_load:
        if bus not in load_buses:
            raise GridError(f"extra load targets bus {bus!r} which has no load entry")
        if not (1 <= t <= horizon):
            raise GridError(f"extra load at step {t} outside 1..{horizon}")

    # thermal limits, both directions
    for i, ln in enumerate(grid.lines):
        if not math.isfinite(ln.flow_limit):
            continue
        sus = 1.0 / ln.reactance
        for t in range(1, horizon + 1):
            ca = bld.col(tag_theta(ln.bus_a, t))
            cb = bld.col(tag_theta(ln.bus_b, t))
            rf = bld.add_row(f"thermal+@{i}@{t}", "<", ln.flow_limit)
            bld.add_coef(rf, ca, sus)
            bld.add_coef(rf, cb, -sus)
            rb = bld.add_row(f"thermal-@{i}@{t}", "<", ln.flow_limit)
            bld.add_coef(rb, ca, -sus)
            bld.add_coef(rb, cb, sus)

    # ramping between consecutive steps
    for g, (_, _, _, rup, rdn) in zip(grid.generators, gen_series):
        for t in range(1, horizon):
            c0 = bld.col(tag_gen(g.name, t))
            c1 = bld.col(tag_gen(g.name, t + 1))
            if math.isfinite(rup[t - 1]):
                r = bld.add_row(f"rampup@{g.name}@{t}", "<", rup[t - 1])
                bld.add_coef(r, c1, 1.0)
                bld.add_coef(r, c0, -1.0)
            if math.isfinite(rdn[t - 1]):
                r = bld.add_row(f"rampdn@{g.name}@{t}", "<", rdn[t - 1])
                bld.add_coef(r, c0, 1.0)
                bld.add_coef(r, c1, -1.0)


def assemble_dispatch(grid: GridModel, extra_load: dict | None, horizon: int,
                      shed_penalty: float | None = None,
                      free_disposal: bool = False) -> DispatchAssembly:
    """Economic dispatch LP over generator outputs and phase angles.

    extra_load maps (bus, t) to MW added on top of the exogenous demand;
    entries may be negative (net injection by discharging vehicles).  With
    shed_penalty set, a nonnegative shed variable per load bus excuses the
    grid from part of the demand at that price per MWh, so overload degrades
    into priced shedding instead of infeasibility and a shedding bus prices
    at the penalty.  free_disposal likewise makes over-injection spill at
    zero cost instead of going infeasible.
    """
    if horizon < 1:
        raise GridError("horizon must be >= 1")
    bld = LpBuilder("dispatch")
    add_dispatch_block(bld, grid, dict(extra_load or {}), horizon, shed_penalty,
                       free_disposal=free_disposal)
    return DispatchAssembly(problem=bld.build(), grid=grid, horizon=horizon,
                            shed_enabled=shed_penalty is not None)


@dataclass
class IsoSolution:
    generation: dict           # (generator name, t) -> MW
    theta: dict                # (bus, t) -> radians
    line_flows: dict           # (line index, t) -> MW, positive a->b
    lmp: dict                  # (load bus, t) -> currency per MWh
    bus_energy_price: dict     # (bus, t) -> currency per MWh (balance dual)
    generation_cost: float     # currency over the horizon
    shed: dict = field(default_factory=dict)       # (bus, t) -> MW
    delivered: dict = field(default_factory=dict)  # (load bus, t) -> MW
    objective: float = 0.0

    @property
    def total_shed_mw(self) -> float:
        return float(sum(self.shed.values()))


@dataclass(frozen=True)
class PriceTable:
    """Electricity price per charge level at each (station node, time step).

    Charging pays the price, discharging earns it (symmetric rates).
    """

    prices: dict  # (station node, t) -> currency per charge level

    def at(self, station_node, t: int) -> float:
        return self.prices[(station_node, t)]


def extract_lmp(sol: LpSolution, assembly: DispatchAssembly, level_energy: float,
                station_of_bus: dict | None = None) -> tuple[IsoSolution, PriceTable]:
    """Read generation, flows, and prices out of a solved dispatch LP.

    LMP at a load bus is the demand-row dual: the cost of serving one more MW
    there for one step.  Stationarity of the free delivered-power variable
    makes it equal the balance dual plus the (sign-flipped) delivery-cap
    dual; both routes are computed and cross-checked.  level_energy (joules
    per charge level) converts $/MWh into $/level for the station price
    table, covering the stations named by station_of_bus.
    """
    sol.require_optimal("dispatch LP")
    grid, horizon = assembly.grid, assembly.horizon
    p = assembly.problem
    if sol.duals.size != p.nrows:
        raise GridError("solution lacks row duals for this assembly")
    hours = grid.step_hours
    cols, rows = p.col_index(), p.row_index()

    generation = {(g.name, t): float(sol.x[cols[tag_gen(g.name, t)]])
                  for g in grid.generators for t in range(1, horizon + 1)}
    theta = {(b, t): float(sol.x[cols[tag_theta(b, t)]])
             for b in grid.buses for t in range(1, horizon + 1)}
    flows = {(i, t): (theta[(ln.bus_a, t)] - theta[(ln.bus_b, t)]) / ln.reactance
             for i, ln in enumerate(grid.lines) for t in range(1, horizon + 1)}
    shed = {}
    if assembly.shed_enabled:
        shed = {(l.bus, t): float(sol.x[cols[tag_shed(l.bus, t)]])
                for l in grid.loads for t in range(1, horizon + 1)
                if abs(sol.x[cols[tag_shed(l.bus, t)]]) > 1e-9}
    delivered = {(l.bus, t): float(sol.x[cols[tag_delivered(l.bus, t)]])
                 for l in grid.loads for t in range(1, horizon + 1)}

    bus_price = {(b, t): float(sol.duals[rows[tag_balance(b, t)]]) / hours
                 for b in grid.buses for t in range(1, horizon + 1)}
    lmp = {}
    for l in grid.loads:
        for t in range(1, horizon + 1):
            y_dem = float(sol.duals[rows[tag_demand(l.bus, t)]])
            price = y_dem / hours
            cap_tag = tag_cap(l.bus, t)
            cap_dual = -float(sol.duals[rows[cap_tag]]) if cap_tag in rows else 0.0
            alt = bus_price[(l.bus, t)] + cap_dual / hours
            if abs(alt - price) > 1e-6 * (1 + abs(price)):
                raise GridError(
                    f"price decomposition mismatch at bus {l.bus!r}, t={t}: "
                    f"demand dual {price} vs balance+cap {alt}")
            lmp[(l.bus, t)] = price

    gen_cost = 0.0
    for g in grid.generators:
        cost = _series(g.unit_cost, horizon, "unit_cost")
        for t in range(1, horizon + 1):
            gen_cost += cost[t - 1] * generation[(g.name, t)] * hours

    iso = IsoSolution(generation=generation, theta=theta, line_flows=flows,
                      lmp=lmp, bus_energy_price=bus_price, generation_cost=gen_cost,
                      shed=shed, delivered=delivered,
                      objective=float(sol.objective) + assembly.objective_offset)
    _check_dispatch_physics(iso, assembly)

    prices = {}
    for bus, station in (station_of_bus or {}).items():
        for t in range(1, horizon + 1):
            if (bus, t) not in lmp:
                raise GridError(f"station bus {bus!r} carries no load entry, so it has no price")
            prices[(station, t)] = lmp[(bus, t)] * level_energy / JOULES_PER_MWH
    return iso, PriceTable(prices)


def _check_dispatch_physics(iso: IsoSolution, assembly: DispatchAssembly) -> None:
    grid, horizon = assembly.grid, assembly.horizon
    scale = max((abs(v) for v in iso.generation.values()), default=1.0)
    scale = max(scale, 1.0)
    gen_by_bus: dict = {}
    for g in grid.generators:
        for t in range(1, horizon + 1):
            gen_by_bus[(g.bus, t)] = gen_by_bus.get((g.bus, t), 0.0) + iso.generation[(g.name, t)]
    for b in grid.buses:
        for t in range(1, horizon + 1):
            inflow = 0.0
            for i, ln in enumerate(grid.lines):
                if ln.bus_b == b:
                    inflow += iso.line_flows[(i, t)]
                elif ln.bus_a == b:
                    inflow -= iso.line_flows[(i, t)]
            resid = (gen_by_bus.get((b, t), 0.0) + inflow
                     - iso.delivered.get((b, t), 0.0))
            if abs(resid) > 1e-8 * scale:
                raise GridError(f"power balance residual {resid} at bus {b!r}, t={t}")
    for i, ln in enumerate(grid.lines):
        if not math.isfinite(ln.flow_limit):
            continue
        for t in range(1, horizon + 1):
            if abs(iso.line_flows[(i, t)]) > ln.flow_limit + 1e-6 * max(1.0, ln.flow_limit):
                raise GridError(f"line {i} flow exceeds its limit at t={t}")


def solve_dispatch(grid: GridModel, extra_load: dict | None, horizon: int,
                   level_energy: float = 0.0, shed_penalty: float | None = None,
                   station_of_bus: dict | None = None,
                   free_disposal: bool = False) -> tuple[IsoSolution, PriceTable, LpSolution]:
    """Assemble, solve, and extract in one call."""
    assembly = assemble_dispatch(grid, extra_load, horizon, shed_penalty,
                                 free_disposal=free_disposal)
    sol = solve(assembly.problem)
    iso, prices = extract_lmp(sol, assembly, level_energy, station_of_bus)
    return iso, prices, sol


def perturbation_lmp_check(grid: GridModel, extra_load: dict | None, bus, t: int,
                           eps: float, horizon: int,
                           shed_penalty: float | None = None) -> float:
    """Finite-difference marginal price oracle: (C_G(load+eps) - C_G(load))/eps.

    Returns $/MWh.  Raises if either solve fails; used by tests to validate
    extract_lmp away from degenerate vertices.
    """
    base = assemble_dispatch(grid, extra_load, horizon, shed_penalty)
    base_sol = solve(base.problem).require_optimal("base dispatch")
    bumped_load = dict(extra_load or {})
    bumped_load[(bus, t)] = bumped_load.get((bus, t), 0.0) + eps
    bumped = assemble_dispatch(grid, bumped_load, horizon, shed_penalty)
    bumped_sol = solve(bumped.problem).require_optimal("perturbed dispatch")
    dc = (bumped_sol.objective - base_sol.objective) / eps
    return dc / grid.step_hours

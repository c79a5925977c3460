"""Distributed price negotiation between the fleet operator and the grid operator.

The two agents co-optimize without sharing private data: the fleet side
repeatedly solves its routing-and-charging LP against proposed electricity
prices and reveals only the induced per-bus charging schedule; the grid side
prices that schedule by relaxing its bus power-balance equalities and
delivery-cap inequalities, walking the multipliers along the constraint
residuals. Messages are framed JSON, identical whether the agents share a
process or talk over TCP, so transcripts from both modes can be compared
byte for byte.

Multiplier update at round k (one price per bus and step, in currency/MWh):

    balance multiplier  += step_k * (demand + vehicle load + net outflow - generation)
    cap multiplier       = max(0, cap multiplier + step_k * (delivered demand - cap))

The grid subproblem is solved lexicographically: first the relaxed cost, then,
among its optima, the dispatch with the smallest total balance residual. The
second stage makes exact fixed points reachable (at the true prices the
residual is zero, so the multipliers stop moving), which is what terminates
negotiation on decoupled or warm-started instances in a single round.

Two refinements keep desk-scale instances inside the iteration budget. In
diminishing mode the residual is normalized before stepping, so the multiplier
movement per round is exactly step_k in the 2-norm regardless of how large the
flapping generators make the raw residual. And when the fleet answers several
consecutive rounds with the bit-identical schedule, the grid side probes the
apparent fixed point: it prices a hard dispatch of that schedule and sends the
resulting marginal prices as an ordinary (non-terminating) proposal. If the
fleet's answer is unchanged, schedule and prices support each other and the
negotiation terminates on those exact prices instead of creeping toward them
at the subgradient rate.
"""

from __future__ import annotations

import json
import logging
import math
import socket
import struct
import time
from collections import deque
from dataclasses import dataclass, field

from .fleetlp import TsoSolution, solve_vrcp
from .gridlp import (
    GridModel,
    IsoSolution,
    JOULES_PER_MWH,
    PriceTable,
    _series,
    solve_dispatch,
    tag_gen,
    tag_theta,
)
from .joint import CouplingMap, coupling_loads
from .lpcore import LpBuilder, StatusError, solve

log = logging.getLogger(__name__)


class NegotiationError(Exception):
    """Subproblem failure or protocol violation during negotiation."""


class TransportError(Exception):
    """Malformed frame, schema violation, or socket failure."""


# --- messages -------------------------------------------------------------

@dataclass(frozen=True)
class ScheduleMsg:
    """Fleet side's proposed charging load, MW per coupled (bus, step)."""
    k: int
    loads: tuple  # ((bus, t, mw), ...) sorted

    def load_map(self) -> dict:
        return {(b, t): mw for b, t, mw in self.loads}


@dataclass(frozen=True)
class PriceMsg:
    """Grid side's proposed energy price, currency/MWh per coupled (bus, step)."""
    k: int
    prices: tuple  # ((bus, t, price), ...) sorted
    terminate: bool

    def price_map(self) -> dict:
        return {(b, t): p for b, t, p in self.prices}


_SCHEMA = {"schedule": {"kind", "k", "loads"}, "price": {"kind", "k", "prices", "terminate"}}


def encode_msg(msg) -> str:
    if isinstance(msg, ScheduleMsg):
        obj = {"kind": "schedule", "k": msg.k,
               "loads": [[b, t, float(v)] for b, t, v in msg.loads]}
    elif isinstance(msg, PriceMsg):
        obj = {"kind": "price", "k": msg.k,
               "prices": [[b, t, float(v)] for b, t, v in msg.prices],
               "terminate": bool(msg.terminate)}
    else:
        raise TransportError(f"cannot encode {type(msg).__name__}")
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def validate_frame(text: str) -> dict:
    """Schema-check one frame; anything beyond the two message kinds fails.

    This is the privacy guarantee in executable form: every logged frame is
    proven to carry nothing but the public schedule/price fields.
    """
    try:
        obj = json.loads(text)
    except ValueError as exc:
        raise TransportError(f"frame is not JSON: {exc}") from exc
    if not isinstance(obj, dict) or obj.get("kind") not in _SCHEMA:
        raise TransportError("frame kind must be 'schedule' or 'price'")
    kind = obj["kind"]
    if set(obj) != _SCHEMA[kind]:
        raise TransportError(f"{kind} frame has fields {sorted(obj)}, "
                             f"expected {sorted(_SCHEMA[kind])}")
    if not isinstance(obj["k"], int) or obj["k"] < 0:
        raise TransportError("frame round index must be a nonnegative integer")
    entries = obj["loads"] if kind == "schedule" else obj["prices"]
    if not isinstance(entries, list):
        raise TransportError(f"{kind} entries must be a list")
    for e in entries:
        if (not isinstance(e, list) or len(e) != 3 or not isinstance(e[1], int)
                or not isinstance(e[2], (int, float)) or not math.isfinite(e[2])):
            raise TransportError(f"bad entry {e!r}: want [bus, step, finite value]")
    if kind == "price" and not isinstance(obj["terminate"], bool):
        raise TransportError("price frame needs a boolean terminate flag")
    return obj


def decode_msg(text: str, expect: str | None = None):
    obj = validate_frame(text)
    if expect is not None and obj["kind"] != expect:
        raise TransportError(f"expected a {expect} frame, got {obj['kind']}")
    if obj["kind"] == "schedule":
        return ScheduleMsg(obj["k"], tuple((b, t, float(v)) for b, t, v in obj["loads"]))
    return PriceMsg(obj["k"], tuple((b, t, float(v)) for b, t, v in obj["prices"]),
                    obj["terminate"])


# --- negotiation state and options ----------------------------------------

@dataclass(frozen=True)
class NegotiationOptions:
    max_iter: int = 500
    tol: float = 1e-6               # MW, infinity norm of the coupled residual
    consecutive: int = 3            # rounds at tol before declaring convergence
    step_mode: str = "diminishing"  # "diminishing": a0/sqrt(k); "constant"
    step_size: float | None = None  # a0 override, or the constant step
    init: str = "baseline"          # "baseline" warm start | "zero"
    recovery_window: int = 10       # schedules averaged for primal recovery
    shed_penalty: float = 6000.0    # used if the recovery dispatch is infeasible
    probe_after: int = 3            # identical schedules before a fixed-point probe
    price_tol: float = 1e-3         # quality target asserted by callers
    gap: float = 1e-3               # relative social-cost target on convergence

    def __post_init__(self):
        if self.step_mode not in ("diminishing", "constant"):
            raise NegotiationError(f"unknown step_mode {self.step_mode!r}")
        if self.step_mode == "constant" and self.step_size is None:
            raise NegotiationError("constant step_mode needs an explicit step_size")
        if self.init not in ("baseline", "zero"):
            raise NegotiationError(f"unknown init {self.init!r}")


@dataclass
class NegotiationState:
    k: int = 0
    bal_mult: dict = field(default_factory=dict)   # (bus, t) -> currency/MWh
    cap_mult: dict = field(default_factory=dict)   # capped (bus, t) only, >= 0
    alpha0: float | None = None
    alpha: float = 0.0
    residual_history: list = field(default_factory=list)
    consec_ok: int = 0
    converged: bool = False
    best_social_cost: float | None = None
    schedule_window: deque = field(default_factory=deque)
    message_log: list = field(default_factory=list)
    recovery: IsoSolution | None = None
    # fixed-point probe bookkeeping
    last_loads: tuple | None = None
    repeat_count: int = 0
    probe_prices: tuple | None = None
    probe_dispatch: IsoSolution | None = None
    failed_probe: tuple | None = None


# --- fleet-side agent -------------------------------------------------------

class TsoAgent:
    """Holds the fleet's private data; answers price proposals with schedules."""

    def __init__(self, graph, requests, fleet, cmap: CouplingMap):
        self.graph = graph
        self.requests = requests
        self.fleet = fleet
        self.cmap = cmap
        self.coupled = self._coupled_keys()
        self.last_solution: TsoSolution | None = None
        self.last_schedule: ScheduleMsg | None = None

    def _coupled_keys(self):
        return tuple(sorted(((bus, t) for bus in self.cmap.station_of_bus
                             for t in range(1, self.graph.horizon + 1)),
                            key=lambda bt: (str(bt[0]), bt[1])))

    def tso_step(self, pmsg: PriceMsg) -> tuple:
        """Solve routing-and-charging at the proposed prices; emit only loads."""
        got = pmsg.price_map()
        if set(got) != set(self.coupled):
            raise NegotiationError("price message does not cover the coupled set")
        per_level = self.fleet.level_energy / JOULES_PER_MWH
        table = {}
        for (bus, t), mwh_price in got.items():
            station = self.cmap.station_of_bus[bus]
            table[(station, t)] = mwh_price * per_level
        try:
            tso, _, _ = solve_vrcp(self.graph, self.requests, self.fleet,
                                   PriceTable(table))
        except StatusError as exc:
            raise NegotiationError(f"fleet subproblem failed: {exc}") from exc
        loads = coupling_loads(tso, self.cmap, self.fleet.level_energy)
        msg = ScheduleMsg(pmsg.k + 1,
                          tuple((bus, t, float(loads.get((bus, t), 0.0)))
                                for bus, t in self.coupled))
        self.last_solution = tso
        self.last_schedule = msg
        return tso, msg


# --- grid-side agent -------------------------------------------------------

class IsoAgent:
    """Holds the grid's private data; prices proposed schedules by subgradient."""

    def __init__(self, grid: GridModel, coupled_buses, horizon: int,
                 opts: NegotiationOptions | None = None):
        self.grid = grid
        self.horizon = int(horizon)
        self.opts = opts or NegotiationOptions()
        load_buses = {l.bus for l in grid.loads}
        self.coupled_buses = tuple(sorted(set(coupled_buses), key=str))
        for bus in self.coupled_buses:
            if bus not in load_buses:
                raise NegotiationError(f"coupled bus {bus!r} has no load entry")
        self.exog = {}
        self.cap = {}
        for l in grid.loads:
            dem = _series(l.demand, self.horizon, f"load at {l.bus!r} demand")
            cap = _series(l.delivery_cap, self.horizon, f"load at {l.bus!r} delivery_cap")
            for t in range(1, self.horizon + 1):
                self.exog[(l.bus, t)] = dem[t - 1]
                if math.isfinite(cap[t - 1]):
                    self.cap[(l.bus, t)] = cap[t - 1]
        self.state = NegotiationState()
        self.state.schedule_window = deque(maxlen=self.opts.recovery_window)
        self._bal_keys = [(bus, t) for bus in grid.buses
                          for t in range(1, self.horizon + 1)]
        # price-scale floor for the auto step size: a tenth of the costliest
        # marginal unit, so multipliers can cross the whole merit order even
        # when the first residual happens to be large
        top = 0.0
        for g in grid.generators:
            top = max(top, max(_series(g.unit_cost, self.horizon, "unit_cost")))
        self._alpha_floor = (1.0 + top) / 10.0

    # multiplier bootstrap

    def initial_prices(self) -> PriceMsg:
        st = self.state
        if self.opts.init == "baseline":
            iso, _, _ = solve_dispatch(self.grid, {}, self.horizon)
            st.bal_mult = dict(iso.bus_energy_price)
            st.cap_mult = {key: max(0.0, iso.lmp[key] - iso.bus_energy_price[key])
                           for key in self.cap}
        else:
            st.bal_mult = {key: 0.0 for key in self._bal_keys}
            st.cap_mult = {key: 0.0 for key in self.cap}
        return PriceMsg(0, self._coupled_prices(), terminate=False)

    def _coupled_prices(self) -> tuple:
        st = self.state
        out = []
        for bus in self.coupled_buses:
            for t in range(1, self.horizon + 1):
                p = st.bal_mult.get((bus, t), 0.0) + st.cap_mult.get((bus, t), 0.0)
                out.append((bus, t, float(p)))
        return tuple(out)

    # relaxed subproblem, lexicographic two-stage

    def _line_bound(self, vload_total: float) -> float:
        total_gen = 0.0
        for g in self.grid.generators:
            pmax = _series(g.max_output, self.horizon, "max_output")
            m = max(pmax)
            if not math.isfinite(m):
                raise NegotiationError(
                    "negotiation needs finite generator capacities or line limits")
            total_gen += m
        total_load = sum(abs(v) for v in self.exog.values())
        return 2.0 * (total_gen + total_load + vload_total) + 10.0

    def _build_sub(self, vload: dict, phase2_opt: float | None):
        grid, T = self.grid, self.horizon
        h = grid.step_hours
        st = self.state
        bld = LpBuilder(name="grid_sub")
        obj1 = {}  # phase-1 objective per column, reused as the freeze row

        def add_obj(col_tag, coef):
            obj1[col_tag] = obj1.get(col_tag, 0.0) + coef

        for g in grid.generators:
            pmax = _series(g.max_output, T, "max_output")
            pmin = _series(g.min_output, T, "min_output")
            cost = _series(g.unit_cost, T, "unit_cost")
            for t in range(1, T + 1):
                bld.add_col(tag_gen(g.name, t), lb=pmin[t - 1], ub=pmax[t - 1])
                add_obj(tag_gen(g.name, t),
                        (cost[t - 1] - st.bal_mult[(g.bus, t)]) * h)
        for bus in grid.buses:
            for t in range(1, T + 1):
                if bus == grid.reference_bus:
                    bld.add_col(tag_theta(bus, t), lb=0.0, ub=0.0)
                else:
                    bld.add_col(tag_theta(bus, t), lb=-1e6, ub=1e6)
        surrogate = None
        for i, ln in enumerate(grid.lines):
            sus = 1.0 / ln.reactance
            limit = ln.flow_limit
            if not math.isfinite(limit):
                if surrogate is None:
                    surrogate = self._line_bound(sum(abs(v) for v in vload.values()))
                limit = surrogate
            for t in range(1, T + 1):
                ca = bld.col(tag_theta(ln.bus_a, t))
                cb = bld.col(tag_theta(ln.bus_b, t))
                dm = (st.bal_mult[(ln.bus_a, t)] - st.bal_mult[(ln.bus_b, t)]) * h * sus
                add_obj(tag_theta(ln.bus_a, t), dm)
                add_obj(tag_theta(ln.bus_b, t), -dm)
                rf = bld.add_row(f"thermal+@{i}@{t}", "<", limit)
                bld.add_coef(rf, ca, sus)
                bld.add_coef(rf, cb, -sus)
                rb = bld.add_row(f"thermal-@{i}@{t}", "<", limit)
                bld.add_coef(rb, ca, -sus)
                bld.add_coef(rb, cb, sus)
        for g in grid.generators:
            rup = _series(g.ramp_up, T, "ramp_up")
            rdn = _series(g.ramp_down, T, "ramp_down")
            for t in range(1, T):
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

        if phase2_opt is None:
            for tag, coef in obj1.items():
                bld.add_obj(bld.col(tag), coef)
        else:
            # stage two: among relaxed optima, minimize the balance residual
            fr = bld.add_row("freeze", "<",
                             phase2_opt + 1e-9 * (1.0 + abs(phase2_opt)))
            for tag, coef in obj1.items():
                bld.add_coef(fr, bld.col(tag), coef)
            for bus in grid.buses:
                for t in range(1, T + 1):
                    cp = bld.add_col(f"res+@{bus}@{t}", lb=0.0, obj=1.0)
                    cm = bld.add_col(f"res-@{bus}@{t}", lb=0.0, obj=1.0)
                    rhs = self.exog.get((bus, t), 0.0) + vload.get((bus, t), 0.0)
                    r = bld.add_row(f"rdef@{bus}@{t}", "=", rhs)
                    bld.add_coef(r, cp, 1.0)
                    bld.add_coef(r, cm, -1.0)
            for g in grid.generators:
                for t in range(1, T + 1):
                    bld.add_coef(bld.row(f"rdef@{g.bus}@{t}"),
                                 bld.col(tag_gen(g.name, t)), 1.0)
            for ln in grid.lines:
                sus = 1.0 / ln.reactance
                for t in range(1, T + 1):
                    ra = bld.row(f"rdef@{ln.bus_a}@{t}")
                    rb = bld.row(f"rdef@{ln.bus_b}@{t}")
                    ca = bld.col(tag_theta(ln.bus_a, t))
                    cb = bld.col(tag_theta(ln.bus_b, t))
                    bld.add_coef(ra, ca, -sus)
                    bld.add_coef(ra, cb, sus)
                    bld.add_coef(rb, ca, sus)
                    bld.add_coef(rb, cb, -sus)
        return bld.build(), obj1

    def _solve_relaxed(self, vload: dict):
        p1, _ = self._build_sub(vload, phase2_opt=None)
        try:
            s1 = solve(p1).require_optimal("grid relaxed subproblem")
        except StatusError as exc:
            raise NegotiationError(f"grid subproblem failed: {exc}") from exc
        p2, _ = self._build_sub(vload, phase2_opt=s1.objective)
        try:
            s2 = solve(p2).require_optimal("grid residual-selection stage")
        except StatusError as exc:
            raise NegotiationError(f"grid subproblem failed: {exc}") from exc
        residual = {}
        for bus in self.grid.buses:
            for t in range(1, self.horizon + 1):
                rp = s2.primal(p2, f"res+@{bus}@{t}")
                rm = s2.primal(p2, f"res-@{bus}@{t}")
                residual[(bus, t)] = rp - rm
        gen = {}
        for g in self.grid.generators:
            for t in range(1, self.horizon + 1):
                gen[(g.name, t)] = s2.primal(p2, tag_gen(g.name, t))
        theta = {(bus, t): s2.primal(p2, tag_theta(bus, t))
                 for bus in self.grid.buses for t in range(1, self.horizon + 1)}
        return gen, theta, residual, s1.objective

    def _step_solution(self, gen, theta, objective) -> IsoSolution:
        grid, T = self.grid, self.horizon
        h = grid.step_hours
        flows = {}
        for i, ln in enumerate(grid.lines):
            sus = 1.0 / ln.reactance
            for t in range(1, T + 1):
                flows[(i, t)] = sus * (theta[(ln.bus_a, t)] - theta[(ln.bus_b, t)])
        cost = 0.0
        for g in grid.generators:
            cs = _series(g.unit_cost, T, "unit_cost")
            for t in range(1, T + 1):
                cost += cs[t - 1] * h * gen[(g.name, t)]
        st = self.state
        price = {key: st.bal_mult.get(key, 0.0) + st.cap_mult.get(key, 0.0)
                 for key in self._bal_keys}
        return IsoSolution(generation=gen, theta=theta, line_flows=flows,
                           lmp=price, bus_energy_price=dict(st.bal_mult),
                           generation_cost=cost, shed={}, delivered={},
                           objective=objective)

    def _recover(self) -> IsoSolution:
        """Primal recovery: hard dispatch at the window-averaged schedule."""
        window = list(self.state.schedule_window)
        avg = {}
        for sched in window:
            for key, mw in sched.items():
                avg[key] = avg.get(key, 0.0) + mw / len(window)
        try:
            iso, _, _ = solve_dispatch(self.grid, avg, self.horizon)
        except StatusError:
            iso, _, _ = solve_dispatch(self.grid, avg, self.horizon,
                                       shed_penalty=self.opts.shed_penalty)
        return iso

    def _probe_candidate(self, vload: dict):
        """Exact prices for a stable schedule: duals of a hard dispatch of it."""
        try:
            iso, _, _ = solve_dispatch(self.grid, vload, self.horizon)
        except StatusError:
            try:
                iso, _, _ = solve_dispatch(self.grid, vload, self.horizon,
                                           shed_penalty=self.opts.shed_penalty)
            except StatusError:
                return None, None
        prices = tuple((bus, t, float(iso.lmp[(bus, t)]))
                       for bus in self.coupled_buses
                       for t in range(1, self.horizon + 1))
        return prices, iso

    @staticmethod
    def _loads_close(a: tuple, b: tuple) -> bool:
        if len(a) != len(b):
            return False
        return all(ea[:2] == eb[:2] and abs(ea[2] - eb[2]) <= 1e-9
                   for ea, eb in zip(a, b))

    def iso_step(self, smsg: ScheduleMsg):
        """One multiplier update; returns (IsoSolution, PriceMsg, state)."""
        st = self.state
        opts = self.opts
        if smsg.k != st.k + 1:
            raise NegotiationError(f"schedule round {smsg.k}, expected {st.k + 1}")
        vload = smsg.load_map()
        expected = {(bus, t) for bus in self.coupled_buses
                    for t in range(1, self.horizon + 1)}
        if set(vload) != expected:
            raise NegotiationError("schedule does not cover the coupled set")
        st.k = smsg.k
        st.schedule_window.append(dict(vload))

        if st.probe_prices is not None:
            # the previous round proposed exact dispatch prices for a stable
            # schedule; an unchanged answer certifies the fixed point
            prices, dispatch = st.probe_prices, st.probe_dispatch
            st.probe_prices = None
            st.probe_dispatch = None
            if st.last_loads is not None and self._loads_close(smsg.loads,
                                                               st.last_loads):
                st.converged = True
                st.recovery = dispatch
                st.residual_history.append(0.0)
                st.last_loads = smsg.loads
                return dispatch, PriceMsg(st.k, prices, terminate=True), st
            st.failed_probe = prices

        if st.last_loads is not None and self._loads_close(smsg.loads, st.last_loads):
            st.repeat_count += 1
        else:
            st.repeat_count = 0
        st.last_loads = smsg.loads

        gen, theta, residual, objective = self._solve_relaxed(vload)
        cap_res = {key: self.exog[key] + vload.get(key, 0.0) - self.cap[key]
                   for key in self.cap}
        parts = [abs(residual[key]) for key in self._bal_keys]
        parts += [max(0.0, v) for v in cap_res.values()]
        res_inf = max(parts) if parts else 0.0
        norm2 = math.sqrt(sum(x * x for x in parts))

        if st.alpha0 is None:
            if opts.step_size is not None:
                st.alpha0 = opts.step_size
            else:
                st.alpha0 = max(1.0 / max(norm2, 1e-9), self._alpha_floor)
        st.alpha = (st.alpha0 / math.sqrt(st.k) if opts.step_mode == "diminishing"
                    else st.alpha0)
        # diminishing mode moves the multipliers by exactly alpha in the 2-norm
        step = (st.alpha / max(norm2, 1e-9) if opts.step_mode == "diminishing"
                else st.alpha)

        for key in self._bal_keys:
            st.bal_mult[key] = st.bal_mult.get(key, 0.0) + step * residual[key]
        for key, g in cap_res.items():
            st.cap_mult[key] = max(0.0, st.cap_mult.get(key, 0.0) + step * g)

        st.residual_history.append(res_inf)
        st.consec_ok = st.consec_ok + 1 if res_inf <= opts.tol else 0
        scale = 1.0 + max((abs(v) for v in self.exog.values()), default=0.0)
        exact = res_inf <= 1e-12 * scale
        st.converged = exact or st.consec_ok >= opts.consecutive
        terminate = st.converged or st.k >= opts.max_iter

        if terminate:
            iso = self._recover()
            st.recovery = iso
            prices = tuple((bus, t, float(iso.lmp[(bus, t)]))
                           for bus in self.coupled_buses
                           for t in range(1, self.horizon + 1))
            msg = PriceMsg(st.k, prices, terminate=True)
            return iso, msg, st

        iso = self._step_solution(gen, theta, objective)
        if st.repeat_count >= opts.probe_after:
            prices, dispatch = self._probe_candidate(vload)
            if prices is not None and prices != st.failed_probe:
                st.probe_prices = prices
                st.probe_dispatch = dispatch
                return iso, PriceMsg(st.k, prices, terminate=False), st
        return iso, PriceMsg(st.k, self._coupled_prices(), terminate=False), st


# --- transports -------------------------------------------------------------

class TcpEndpoint:
    """Length-prefixed UTF-8 JSON frames over a connected socket."""

    def __init__(self, sock: socket.socket):
        self.sock = sock

    def send_frame(self, text: str) -> None:
        data = text.encode("utf-8")
        try:
            self.sock.sendall(struct.pack(">I", len(data)) + data)
        except OSError as exc:
            raise TransportError(f"send failed: {exc}") from exc

    def recv_frame(self) -> str:
        header = self._read_exact(4)
        (length,) = struct.unpack(">I", header)
        if length > 64 * 1024 * 1024:
            raise TransportError(f"frame of {length} bytes exceeds the limit")
        return self._read_exact(length).decode("utf-8")

    def _read_exact(self, n: int) -> bytes:
        buf = b""
        while len(buf) < n:
            try:
                chunk = self.sock.recv(n - len(buf))
            except OSError as exc:
                raise TransportError(f"recv failed: {exc}") from exc
            if not chunk:
                raise TransportError("connection closed mid-frame")
            buf += chunk
        return buf

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass


class RemoteIso:
    """Driver-side proxy for a grid agent served elsewhere."""

    def __init__(self, endpoint: TcpEndpoint):
        self.endpoint = endpoint

    def initial_frame(self) -> str:
        return self.endpoint.recv_frame()

    def reply_to_schedule(self, frame: str) -> str:
        self.endpoint.send_frame(frame)
        return self.endpoint.recv_frame()


class RemoteTso:
    """Driver-side proxy for a fleet agent served elsewhere."""

    def __init__(self, endpoint: TcpEndpoint):
        self.endpoint = endpoint

    def reply_to_price(self, frame: str) -> str:
        self.endpoint.send_frame(frame)
        return self.endpoint.recv_frame()

    def send_final(self, frame: str) -> None:
        # terminate frame gets no reply; the served side solves and closes
        self.endpoint.send_frame(frame)


def connect_agent(host: str, port: int, remote_role: str = "iso",
                  retries: int = 40, delay: float = 0.05):
    """Dial a served agent, retrying while it comes up."""
    last: Exception | None = None
    for _ in range(retries):
        try:
            sock = socket.create_connection((host, port), timeout=30.0)
            ep = TcpEndpoint(sock)
            return RemoteIso(ep) if remote_role == "iso" else RemoteTso(ep)
        except OSError as exc:
            last = exc
            time.sleep(delay)
    raise TransportError(f"cannot reach {host}:{port} after {retries} tries: {last}")


def serve_agent(agent, host: str = "127.0.0.1", port: int = 0, on_ready=None):
    """Serve one negotiation session for a local agent, then return.

    The grid agent speaks first (its initial price proposal); the fleet agent
    answers prices until one arrives with the terminate flag, solving once
    more at the final prices so its last plan reflects them.
    """
    srv = socket.create_server((host, port))
    try:
        if on_ready is not None:
            on_ready(srv.getsockname()[1])
        conn, _ = srv.accept()
    finally:
        srv.close()
    ep = TcpEndpoint(conn)
    transcript = []
    try:
        if isinstance(agent, IsoAgent):
            frame = encode_msg(agent.initial_prices())
            validate_frame(frame)
            transcript.append(frame)
            ep.send_frame(frame)
            while True:
                sframe = ep.recv_frame()
                smsg = decode_msg(sframe, "schedule")
                transcript.append(sframe)
                _, pmsg, _ = agent.iso_step(smsg)
                pframe = encode_msg(pmsg)
                validate_frame(pframe)
                transcript.append(pframe)
                ep.send_frame(pframe)
                if pmsg.terminate:
                    break
        elif isinstance(agent, TsoAgent):
            while True:
                pframe = ep.recv_frame()
                pmsg = decode_msg(pframe, "price")
                transcript.append(pframe)
                _, smsg = agent.tso_step(pmsg)
                if pmsg.terminate:
                    break
                sframe = encode_msg(smsg)
                validate_frame(sframe)
                transcript.append(sframe)
                ep.send_frame(sframe)
        else:
            raise NegotiationError(f"cannot serve {type(agent).__name__}")
    finally:
        ep.close()
    agent.transcript = tuple(transcript)
    return agent


# --- the negotiation driver -------------------------------------------------

@dataclass(frozen=True)
class NegotiationResult:
    converged: bool
    iterations: int
    prices: dict                    # coupled (bus, t) -> currency/MWh
    tso: TsoSolution | None
    iso: IsoSolution | None
    social_cost: float | None
    state: NegotiationState | None  # present when the grid agent ran locally
    transcript: tuple               # every frame, in order


def transcript_to_jsonl(frames) -> str:
    return "\n".join(frames) + ("\n" if frames else "")


def replay_transcript(text: str) -> list:
    """Re-validate a persisted transcript frame by frame; returns messages."""
    msgs = []
    expected_kind = "price"
    k_prev = -1
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        if expected_kind is None:
            raise TransportError(
                f"line {line_no}: frames present after the terminate flag")
        try:
            msg = decode_msg(line, expected_kind)
        except TransportError as exc:
            raise TransportError(f"line {line_no}: {exc}") from exc
        if msg.k < k_prev:
            raise TransportError(f"line {line_no}: round index went backwards")
        k_prev = msg.k
        msgs.append(msg)
        if isinstance(msg, PriceMsg):
            expected_kind = None if msg.terminate else "schedule"
        else:
            expected_kind = "price"
    return msgs


def run_negotiation(tso, iso, opts: NegotiationOptions | None = None,
                    fleet=None) -> NegotiationResult:
    """Drive the alternating exchange to convergence or the round limit.

    `tso`/`iso` are local agents or remote proxies. Local messages still pass
    through JSON encode/decode, so the logged transcript is byte-identical to
    a networked run of the same instance. Social cost is reported only when
    both agents run locally; nothing beyond the two message kinds is ever
    available across a process boundary.
    """
    local_iso = isinstance(iso, IsoAgent)
    local_tso = isinstance(tso, TsoAgent)
    if opts is None:
        opts = iso.opts if local_iso else NegotiationOptions()
    transcript = []

    def log(frame: str) -> str:
        validate_frame(frame)
        transcript.append(frame)
        return frame

    if local_iso:
        pframe = log(encode_msg(iso.initial_prices()))
    else:
        pframe = log(iso.initial_frame())
    pmsg = decode_msg(pframe, "price")

    rounds = 0
    while not pmsg.terminate:
        rounds += 1
        if rounds > opts.max_iter + 2:
            raise NegotiationError("negotiation exceeded the round limit")
        if local_tso:
            _, smsg = tso.tso_step(pmsg)
            sframe = log(encode_msg(smsg))
        else:
            sframe = log(tso.reply_to_price(pframe))
            smsg = decode_msg(sframe, "schedule")
        if local_iso:
            _, pmsg, _ = iso.iso_step(smsg)
            pframe = log(encode_msg(pmsg))
        else:
            pframe = log(iso.reply_to_schedule(sframe))
            pmsg = decode_msg(pframe, "price")

    final_tso: TsoSolution | None = None
    iso_final: IsoSolution | None = None
    social = None
    if local_tso:
        final_tso, final_sched = tso.tso_step(pmsg)  # final plan at final prices
        if local_iso:
            iso_final, social = _account(final_tso, final_sched, iso, fleet or tso.fleet)
    else:
        tso.send_final(pframe)  # unblock the served fleet agent
    state = iso.state if local_iso else None
    converged = state.converged if state is not None else pmsg.k < opts.max_iter
    if state is not None and social is not None:
        state.best_social_cost = social
    if state is not None:
        state.message_log = list(transcript)
    return NegotiationResult(converged=converged, iterations=pmsg.k,
                             prices=pmsg.price_map(), tso=final_tso,
                             iso=iso_final, social_cost=social, state=state,
                             transcript=tuple(transcript))


def _account(tso_sol: TsoSolution, sched: ScheduleMsg, iso: IsoAgent, fleet):
    """Hard dispatch at the fleet's final schedule; total social cost."""
    loads = {key: mw for key, mw in sched.load_map().items() if mw != 0.0}
    shed_cost = 0.0
    try:
        iso_sol, _, _ = solve_dispatch(iso.grid, loads, iso.horizon)
    except StatusError:
        iso_sol, _, _ = solve_dispatch(iso.grid, loads, iso.horizon,
                                       shed_penalty=iso.opts.shed_penalty)
        shed_cost = iso.opts.shed_penalty * iso.grid.step_hours * iso_sol.total_shed_mw
    social = (tso_sol.costs.objective(fleet, include_energy_cost=False)
              + iso_sol.generation_cost + shed_cost)
    return iso_sol, social

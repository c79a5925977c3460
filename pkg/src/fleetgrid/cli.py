"""Command-line surface: every subcommand reads a scenario file and writes
JSON results.

Exit codes: 0 on success, 1 when the instance itself is the problem (failed
validation, infeasible LP, failed equilibrium check, non-convergent
negotiation, aborted simulation), 2 on usage errors (bad arguments, missing
or malformed files).
"""

import argparse
import dataclasses
import json
import os
import sys

from .coordinator import (
    IsoAgent,
    NegotiationError,
    NegotiationOptions,
    TransportError,
    TsoAgent,
    connect_agent,
    run_negotiation,
    serve_agent,
    transcript_to_jsonl,
)
from .fleetlp import FleetLpError, cost_breakdown, solve_vrcp
from .gridlp import GridError, assemble_dispatch, solve_dispatch
from .joint import CouplingError, solve_pamod, solve_uncoordinated, verify_equilibrium
from .lpcore import LpError, write_mps
from .netmodel import ScenarioError
from .pathdecomp import (
    DecompositionError,
    decompose_solution,
    per_request_flows,
    route_sets_jsonl,
)
from .report import (
    format_table,
    mode_summary,
    render_figures,
    write_table_csv,
    write_timeseries_csv,
)
from .rhsim import MODES, RouteError, SimulationAborted, run_simulation
from .scenario import SchemaError, load_scenario

_DOMAIN_ERRORS = (ScenarioError, GridError, CouplingError, FleetLpError,
                  DecompositionError, NegotiationError, TransportError,
                  LpError, RouteError)


class UsageError(Exception):
    pass


def _emit(doc, out_path) -> None:
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if out_path:
        with open(out_path, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _write(path, text) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def _keyed(mapping) -> list:
    """{(key, t): v} -> sorted [[key, t, v], ...] rows for JSON."""
    return [[k, t, v] for (k, t), v in
            sorted(mapping.items(), key=lambda kv: (str(kv[0][0]), kv[0][1]))]


def _station_prices(prices) -> list:
    return _keyed(prices.prices)


def _dispatch_doc(iso, prices) -> dict:
    return {
        "generation_cost": iso.generation_cost,
        "objective": iso.objective,
        "lmp_per_mwh": _keyed(iso.lmp),
        "generation_mw": _keyed(iso.generation),
        "shed_mw": _keyed({k: v for k, v in iso.shed.items() if v > 1e-12}),
        "total_shed_mw": iso.total_shed_mw,
        "station_prices_per_level": _station_prices(prices),
    }


def _tso_doc(tso) -> dict:
    c = tso.costs
    return {
        "objective": tso.objective,
        "customer_travel_steps": c.customer_travel_steps,
        "vehicle_distance_km": c.vehicle_distance_km,
        "energy_cost": c.energy_cost,
        "battery_wear_cost": c.wear_cost,
        "departures": [[i, charge, v] for (i, charge), v
                       in sorted(tso.departures.items())],
    }


# --- subcommands --------------------------------------------------------------


def cmd_validate(args) -> int:
    scn = load_scenario(args.scenario)
    diags = scn.validate()
    ok = not any(d.severity == "error" for d in diags)
    _emit({
        "scenario": scn.name,
        "ok": ok,
        "diagnostics": [{"severity": d.severity, "message": d.message}
                        for d in diags],
    }, args.out)
    return 0 if ok else 1


def cmd_solve_dispatch(args) -> int:
    scn = load_scenario(args.scenario)
    iso, prices, _ = solve_dispatch(
        scn.grid, {}, scn.horizon, level_energy=scn.fleet.level_energy,
        shed_penalty=scn.sim.shed_penalty, station_of_bus=scn.station_of_bus)
    if args.mps:
        asm = assemble_dispatch(scn.grid, {}, scn.horizon,
                                shed_penalty=scn.sim.shed_penalty)
        _write(args.mps, write_mps(asm.problem))
    doc = {"scenario": scn.name, "dispatch": _dispatch_doc(iso, prices)}
    _emit(doc, args.out)
    return 0


def cmd_solve_vrcp(args) -> int:
    scn = load_scenario(args.scenario)
    graph, _ = scn.expand()
    # fleet plans against the exogenous-load price signal, as a lone
    # operator would before any load it adds moves the market
    _, prices, _ = solve_dispatch(
        scn.grid, {}, scn.horizon, level_energy=scn.fleet.level_energy,
        shed_penalty=scn.sim.shed_penalty, station_of_bus=scn.station_of_bus)
    tso, assembly, _ = solve_vrcp(graph, list(scn.requests), scn.fleet, prices)
    if args.mps:
        _write(args.mps, write_mps(assembly.problem))
    _emit({
        "scenario": scn.name,
        "fleet": _tso_doc(tso),
        "station_prices_per_level": _station_prices(prices),
    }, args.out)
    return 0


def cmd_solve_joint(args) -> int:
    scn = load_scenario(args.scenario)
    graph, cmap = scn.expand()
    joint = solve_pamod(graph, list(scn.requests), scn.fleet, scn.grid, cmap,
                        shed_penalty=scn.sim.shed_penalty)
    if args.mps:
        _write(args.mps, write_mps(joint.assembly.problem))
    _emit({
        "scenario": scn.name,
        "social_cost": joint.objective,
        "fleet": _tso_doc(joint.tso),
        "dispatch": _dispatch_doc(joint.iso, joint.prices),
        "fleet_load_mw": _keyed({k: v for k, v in joint.vehicle_load.items()
                                 if abs(v) > 1e-12}),
    }, args.out)
    return 0


def cmd_verify_equilibrium(args) -> int:
    scn = load_scenario(args.scenario)
    graph, cmap = scn.expand()
    joint = solve_pamod(graph, list(scn.requests), scn.fleet, scn.grid, cmap,
                        shed_penalty=scn.sim.shed_penalty)
    rep = verify_equilibrium(joint, graph, list(scn.requests), scn.fleet,
                             scn.grid, cmap, tol=args.tolerance)
    def gap(g):
        return {"agent": g.agent, "achieved": g.achieved, "optimum": g.optimum,
                "gap": g.gap, "relative_gap": g.rel_gap}
    _emit({
        "scenario": scn.name,
        "passed": rep.passed,
        "tolerance_used": rep.tol_used,
        "degenerate_duals": rep.degenerate,
        "fleet": gap(rep.tso),
        "generators": [gap(g) for g in rep.generators],
        "failures": rep.failures,
    }, args.out)
    return 0 if rep.passed else 1


def _parse_hostport(text: str) -> tuple:
    host, sep, port = text.rpartition(":")
    if not sep or not host or not port.isdigit():
        raise UsageError(f"expected HOST:PORT, got {text!r}")
    return host, int(port)


def cmd_negotiate(args) -> int:
    scn = load_scenario(args.scenario)
    graph, cmap = scn.expand()
    opts = NegotiationOptions(max_iter=args.max_iter)
    coupled = sorted(cmap.station_of_bus, key=str)

    def local_agent(role):
        if role == "fleet":
            return TsoAgent(graph, list(scn.requests), scn.fleet, cmap)
        return IsoAgent(scn.grid, coupled, graph.horizon, opts)

    if args.listen is not None:
        if not args.role:
            raise UsageError("--listen needs --role fleet|iso")
        agent = local_agent(args.role)
        served = serve_agent(agent, port=args.listen,
                             on_ready=lambda p: print(f"listening on {p}",
                                                      file=sys.stderr))
        if args.transcript:
            _write(args.transcript, transcript_to_jsonl(served.transcript))
        _emit({"scenario": scn.name, "served_role": args.role,
               "frames": len(served.transcript)}, args.out)
        return 0

    if args.connect is not None:
        if not args.role:
            raise UsageError("--connect needs --role fleet|iso")
        host, port = _parse_hostport(args.connect)
        remote_role = "iso" if args.role == "fleet" else "fleet"
        proxy = connect_agent(host, port, remote_role=remote_role)
        local = local_agent(args.role)
        tso, iso = (local, proxy) if args.role == "fleet" else (proxy, local)
        result = run_negotiation(tso, iso, opts)
    else:
        result = run_negotiation(local_agent("fleet"), local_agent("iso"),
                                 opts, fleet=scn.fleet)

    if args.transcript:
        _write(args.transcript, transcript_to_jsonl(result.transcript))
    _emit({
        "scenario": scn.name,
        "converged": result.converged,
        "iterations": result.iterations,
        "prices_per_mwh": _keyed(result.prices),
        "social_cost": result.social_cost,
        "frames": len(result.transcript),
    }, args.out)
    return 0 if result.converged else 1


def cmd_decompose_routes(args) -> int:
    scn = load_scenario(args.scenario)
    graph, cmap = scn.expand()
    joint = solve_pamod(graph, list(scn.requests), scn.fleet, scn.grid, cmap,
                        shed_penalty=scn.sim.shed_penalty)
    route_sets = decompose_solution(joint.tso, joint.assembly)

    # edge-wise reconstruction error across all requests together
    total = {}
    for flows in per_request_flows(route_sets).values():
        for ei, v in flows.items():
            total[ei] = total.get(ei, 0.0) + v
    bundled = {}
    for (_, ei), v in joint.tso.bundled.items():
        bundled[ei] = bundled.get(ei, 0.0) + v
    worst = max((abs(total.get(ei, 0.0) - v)
                 for ei, v in bundled.items()), default=0.0)
    worst = max(worst, max((abs(v) for ei, v in total.items()
                            if ei not in bundled), default=0.0))

    jsonl = route_sets_jsonl(route_sets, graph)
    if args.routes_out:
        _write(args.routes_out, jsonl)
    _emit({
        "scenario": scn.name,
        "requests": len(route_sets),
        "paths": sum(len(rs.paths) for rs in route_sets),
        "max_edge_reconstruction_error": worst,
        "route_sets": [json.loads(line) for line in jsonl.splitlines()],
    }, args.out)
    return 0


def cmd_simulate(args) -> int:
    scn = load_scenario(args.scenario)
    try:
        rep = run_simulation(scn, mode=args.mode, pipelined=args.pipelined)
    except SimulationAborted as exc:
        _emit({"scenario": scn.name,
               "summary": mode_summary(exc.report, scn.step_seconds),
               "report": dataclasses.asdict(exc.report)}, args.out)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    _emit({"scenario": scn.name,
           "summary": mode_summary(rep, scn.step_seconds),
           "report": dataclasses.asdict(rep)}, args.out)
    return 0


def cmd_report(args) -> int:
    scn = load_scenario(args.scenario)
    os.makedirs(args.outdir, exist_ok=True)
    reports = []
    failed = False
    for mode in MODES:
        try:
            reports.append(run_simulation(scn, mode=mode))
        except SimulationAborted as exc:
            reports.append(exc.report)
            failed = True

    table = format_table(reports, scn.step_seconds)
    write_table_csv(reports, scn.step_seconds, f"{args.outdir}/table.csv")
    write_timeseries_csv(reports, f"{args.outdir}/timeseries.csv")
    figures = render_figures(reports, args.outdir)
    _emit({
        "scenario": scn.name,
        "modes": [mode_summary(r, scn.step_seconds) for r in reports],
        "files": {"table": f"{args.outdir}/table.csv",
                  "timeseries": f"{args.outdir}/timeseries.csv",
                  **figures},
    }, f"{args.outdir}/results.json")
    sys.stdout.write(table)
    print(f"report written to {args.outdir}", file=sys.stderr)
    return 1 if failed else 0


# --- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="fleetgrid",
        description="Joint fleet-and-grid optimization toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("scenario", help="scenario JSON file")
        sp.add_argument("--out", help="write results JSON here instead of stdout")
        sp.set_defaults(func=func)
        return sp

    add("validate", cmd_validate, "check a scenario file and report diagnostics")

    sp = add("solve-dispatch", cmd_solve_dispatch,
             "economic dispatch of the grid under exogenous load only")
    sp.add_argument("--mps", help="also write the LP in MPS format")

    sp = add("solve-vrcp", cmd_solve_vrcp,
             "fleet routing/charging plan against exogenous-load prices")
    sp.add_argument("--mps", help="also write the LP in MPS format")

    sp = add("solve-joint", cmd_solve_joint,
             "joint fleet plus grid optimum with coupled prices")
    sp.add_argument("--mps", help="also write the LP in MPS format")

    sp = add("verify-equilibrium", cmd_verify_equilibrium,
             "check that the joint optimum is self-enforcing at its prices")
    sp.add_argument("--tolerance", type=float, default=1e-5)

    sp = add("negotiate", cmd_negotiate,
             "run the fleet/grid price negotiation, optionally over TCP")
    sp.add_argument("--listen", type=int, metavar="PORT",
                    help="serve the local agent for one session")
    sp.add_argument("--connect", metavar="HOST:PORT",
                    help="drive a negotiation against a served agent")
    sp.add_argument("--role", choices=("fleet", "iso"),
                    help="which agent runs locally (with --listen/--connect)")
    sp.add_argument("--max-iter", type=int, default=500)
    sp.add_argument("--transcript", help="write the frame transcript (JSON lines)")

    sp = add("decompose-routes", cmd_decompose_routes,
             "split the joint flow into per-request weighted routes")
    sp.add_argument("--routes-out", help="write route sets as JSON lines")

    sp = add("simulate", cmd_simulate,
             "run one receding-horizon episode")
    sp.add_argument("--mode", choices=MODES, default="coordinated")
    sp.add_argument("--pipelined", action="store_true",
                    help="apply each plan one decision boundary late")

    sp = add("report", cmd_report,
             "simulate all modes and render tables, CSV series, and figures")
    sp.add_argument("--outdir", default="fleetgrid-report")

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except SchemaError as exc:
        print(f"scenario error: {exc}", file=sys.stderr)
        return 2
    except _DOMAIN_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

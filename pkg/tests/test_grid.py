"""Dispatch LP tests: analytic price oracles, perturbation checks, physics."""

import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from fleetgrid.gridlp import (
    BusLoad,
    Generator,
    GridError,
    GridModel,
    Line,
    assemble_dispatch,
    extract_lmp,
    perturbation_lmp_check,
    solve_dispatch,
)
from fleetgrid.lpcore import solve


def one_bus_grid(load=50.0, cap=math.inf, step_seconds=3600.0):
    return GridModel(
        buses=("b1",),
        lines=(),
        generators=(Generator("g1", "b1", max_output=100.0, unit_cost=10.0),),
        loads=(BusLoad("b1", demand=load, delivery_cap=cap),),
        step_seconds=step_seconds,
    )


def two_bus_grid(line_limit=30.0, load=50.0):
    return GridModel(
        buses=("b1", "b2"),
        lines=(Line("b1", "b2", reactance=0.1, flow_limit=line_limit),),
        generators=(
            Generator("cheap", "b1", max_output=100.0, unit_cost=10.0),
            Generator("dear", "b2", max_output=100.0, unit_cost=50.0),
        ),
        loads=(BusLoad("b2", demand=load),),
    )


def test_single_bus_marginal_cost():
    iso, _, sol = solve_dispatch(one_bus_grid(), {}, horizon=1)
    assert_allclose(iso.generation[("g1", 1)], 50.0, atol=1e-9)
    assert_allclose(iso.generation_cost, 500.0, atol=1e-7)
    assert_allclose(iso.lmp[("b1", 1)], 10.0, atol=1e-8)
    assert sol.kkt["gap"] <= 1e-6


def test_single_bus_lmp_scales_out_step_length():
    # half-hour steps: same MW, half the energy, same $/MWh price
    iso, _, _ = solve_dispatch(one_bus_grid(step_seconds=1800.0), {}, horizon=1)
    assert_allclose(iso.generation_cost, 250.0, atol=1e-7)
    assert_allclose(iso.lmp[("b1", 1)], 10.0, atol=1e-8)


def test_two_bus_congestion_splits_prices():
    iso, _, _ = solve_dispatch(two_bus_grid(), {}, horizon=1)
    assert_allclose(iso.generation[("cheap", 1)], 30.0, atol=1e-7)
    assert_allclose(iso.generation[("dear", 1)], 20.0, atol=1e-7)
    assert_allclose(iso.line_flows[(0, 1)], 30.0, atol=1e-7)
    assert_allclose(iso.lmp[("b2", 1)], 50.0, atol=1e-7)
    assert_allclose(iso.bus_energy_price[("b1", 1)], 10.0, atol=1e-7)


def test_two_bus_uncongested_single_price():
    iso, _, _ = solve_dispatch(two_bus_grid(line_limit=500.0), {}, horizon=1)
    assert_allclose(iso.generation[("cheap", 1)], 50.0, atol=1e-7)
    assert_allclose(iso.lmp[("b2", 1)], 10.0, atol=1e-7)


def test_zero_load_zero_cost():
    iso, _, _ = solve_dispatch(one_bus_grid(load=0.0), {}, horizon=3)
    assert iso.generation_cost == pytest.approx(0.0, abs=1e-9)
    assert all(v == pytest.approx(0.0, abs=1e-9) for v in iso.generation.values())


def test_perturbation_oracle_one_and_two_bus():
    assert_allclose(perturbation_lmp_check(one_bus_grid(), {}, "b1", 1, 1.0, horizon=1),
                    10.0, atol=1e-7)
    assert_allclose(perturbation_lmp_check(two_bus_grid(), {}, "b2", 1, 0.1, horizon=1),
                    50.0, atol=1e-6)


def test_binding_delivery_cap_raises_lmp_above_balance_dual():
    grid = one_bus_grid(load=50.0, cap=50.0)
    assembly = assemble_dispatch(grid, {}, 1)
    sol = solve(assembly.problem).require_optimal()
    iso, _ = extract_lmp(sol, assembly, level_energy=0.0)
    # cap binds exactly at the demand: degenerate point, but decomposition
    # must still reconcile (checked inside extract_lmp); with headroom gone
    # the cap dual appears once demand pushes past it, so test at cap - eps
    grid2 = one_bus_grid(load=49.0, cap=50.0)
    iso2, _, _ = solve_dispatch(grid2, {}, 1)
    assert_allclose(iso2.lmp[("b1", 1)], 10.0, atol=1e-8)
    assert iso.lmp[("b1", 1)] >= iso.bus_energy_price[("b1", 1)] - 1e-9


def test_extra_load_and_negative_injection():
    grid = one_bus_grid(load=50.0)
    iso, _, _ = solve_dispatch(grid, {("b1", 1): 25.0}, horizon=1)
    assert_allclose(iso.generation[("g1", 1)], 75.0, atol=1e-8)
    iso, _, _ = solve_dispatch(grid, {("b1", 1): -20.0}, horizon=1)
    assert_allclose(iso.generation[("g1", 1)], 30.0, atol=1e-8)
    with pytest.raises(GridError):
        solve_dispatch(grid, {("nowhere", 1): 5.0}, horizon=1)


def test_ramp_limits_bind_across_steps():
    # demand jumps 10 -> 80 but ramping allows +20 MW per step; the expensive
    # peaker covers the shortfall
    grid = GridModel(
        buses=("b1",),
        lines=(),
        generators=(
            Generator("slow", "b1", max_output=100.0, unit_cost=10.0, ramp_up=20.0, ramp_down=20.0),
            Generator("peak", "b1", max_output=100.0, unit_cost=100.0),
        ),
        loads=(BusLoad("b1", demand=[10.0, 80.0]),),
    )
    iso, _, _ = solve_dispatch(grid, {}, horizon=2)
    assert_allclose(iso.generation[("slow", 2)] - iso.generation[("slow", 1)], 20.0, atol=1e-7)
    assert_allclose(iso.generation[("peak", 2)],
                    80.0 - iso.generation[("slow", 2)], atol=1e-7)
    # marginal unit at t=2 is the peaker
    assert_allclose(iso.lmp[("b1", 2)], 100.0, atol=1e-6)


def test_shed_slack_keeps_overload_feasible_and_prices_at_penalty():
    grid = GridModel(
        buses=("b1",),
        lines=(),
        generators=(Generator("g1", "b1", max_output=40.0, unit_cost=10.0),),
        loads=(BusLoad("b1", demand=50.0),),
    )
    # without slack: infeasible
    from fleetgrid.lpcore import LpStatus
    bare = assemble_dispatch(grid, {}, 1)
    assert solve(bare.problem).status is LpStatus.INFEASIBLE
    iso, _, _ = solve_dispatch(grid, {}, 1, shed_penalty=6000.0)
    assert_allclose(iso.shed[("b1", 1)], 10.0, atol=1e-7)
    assert_allclose(iso.lmp[("b1", 1)], 6000.0, atol=1e-5)


def test_free_disposal_absorbs_net_over_injection():
    # extra_load below -demand means more power pushed in than consumed;
    # generators cannot run negative, so the bare LP has no feasible point
    from fleetgrid.lpcore import LpStatus
    grid = one_bus_grid(load=1.0)
    over = {("b1", 1): -3.0}
    bare = assemble_dispatch(grid, over, 1)
    assert solve(bare.problem).status is LpStatus.INFEASIBLE
    iso, _, _ = solve_dispatch(grid, over, 1, free_disposal=True)
    assert_allclose(iso.generation[("g1", 1)], 0.0, atol=1e-9)
    assert_allclose(iso.generation_cost, 0.0, atol=1e-9)
    # surplus power is worthless, so the price floors at zero
    assert_allclose(iso.lmp[("b1", 1)], 0.0, atol=1e-8)


def test_free_disposal_is_inert_when_supply_still_binds():
    grid = one_bus_grid(load=1.0)
    mild = {("b1", 1): -0.5}
    plain, _, _ = solve_dispatch(grid, mild, 1)
    spilly, _, _ = solve_dispatch(grid, mild, 1, free_disposal=True)
    assert_allclose(plain.generation[("g1", 1)], 0.5, atol=1e-9)
    assert_allclose(spilly.generation[("g1", 1)], 0.5, atol=1e-9)
    assert_allclose(plain.lmp[("b1", 1)], 10.0, atol=1e-8)
    assert_allclose(spilly.lmp[("b1", 1)], 10.0, atol=1e-8)


def test_reference_bus_choice_is_physically_irrelevant():
    rng = np.random.default_rng(4)
    buses = tuple(f"n{i}" for i in range(4))
    lines = (Line("n0", "n1", 0.1, 40.0), Line("n1", "n2", 0.2, 40.0),
             Line("n2", "n3", 0.1, 40.0), Line("n0", "n3", 0.3, 40.0))
    gens = (Generator("g0", "n0", 80.0, unit_cost=12.0),
            Generator("g2", "n2", 80.0, unit_cost=31.0))
    loads = (BusLoad("n1", 30.0), BusLoad("n3", 25.0))
    results = []
    for ref in buses:
        grid = GridModel(buses, lines, gens, loads, reference_bus=ref)
        iso, _, _ = solve_dispatch(grid, {}, horizon=2)
        results.append(iso)
    base = results[0]
    for other in results[1:]:
        for key in base.generation:
            assert abs(base.generation[key] - other.generation[key]) <= 1e-7
        for key in base.line_flows:
            assert abs(base.line_flows[key] - other.line_flows[key]) <= 1e-7
        for key in base.lmp:
            assert abs(base.lmp[key] - other.lmp[key]) <= 1e-7
        assert abs(base.generation_cost - other.generation_cost) <= 1e-7
        # theta differs by a per-time-slice constant shift only
        for t in (1, 2):
            shifts = {round(base.theta[(b, t)] - other.theta[(b, t)], 9) for b in buses}
            assert len(shifts) == 1


def test_random_four_bus_lmps_match_perturbation():
    rng = np.random.default_rng(12)
    checked = 0
    attempts = 0
    while checked < 10 and attempts < 60:
        attempts += 1
        buses = tuple(range(4))
        lines = (Line(0, 1, float(rng.uniform(0.05, 0.3)), float(rng.uniform(20, 60))),
                 Line(1, 2, float(rng.uniform(0.05, 0.3)), float(rng.uniform(20, 60))),
                 Line(2, 3, float(rng.uniform(0.05, 0.3)), float(rng.uniform(20, 60))),
                 Line(3, 0, float(rng.uniform(0.05, 0.3)), float(rng.uniform(20, 60))))
        gens = (Generator("g0", 0, float(rng.uniform(60, 120)), unit_cost=float(rng.uniform(5, 20))),
                Generator("g2", 2, float(rng.uniform(60, 120)), unit_cost=float(rng.uniform(25, 60))))
        loads = (BusLoad(1, float(rng.uniform(10, 40))), BusLoad(3, float(rng.uniform(10, 40))))
        grid = GridModel(buses, lines, gens, loads)
        try:
            iso, _, _ = solve_dispatch(grid, {}, horizon=1)
        except Exception:
            continue
        scale = max(sum(l.demand for l in loads), 1.0)
        eps = 1e-3 * scale
        ok = True
        for bus in (1, 3):
            up = perturbation_lmp_check(grid, {}, bus, 1, eps, horizon=1)
            down = perturbation_lmp_check(grid, {}, bus, 1, -eps, horizon=1)
            if abs(up - down) > 1e-6 * (1 + abs(up)):
                ok = False  # degenerate vertex: one-sided prices disagree, skip
                break
            assert abs(iso.lmp[(bus, 1)] - up) <= 0.01 * (1 + abs(up)), \
                f"LMP {iso.lmp[(bus, 1)]} vs perturbation {up}"
        if ok:
            checked += 1
    assert checked == 10


def test_duality_gap_and_balance_residuals():
    grid = two_bus_grid()
    assembly = assemble_dispatch(grid, {}, 3)
    sol = solve(assembly.problem).require_optimal()
    assert sol.kkt["gap"] <= 1e-6
    assert sol.kkt["primal"] <= 1e-6
    extract_lmp(sol, assembly, 0.0)  # runs the physics checks internally


def test_disconnected_grid_rejected_before_assembly():
    grid = GridModel(
        buses=("b1", "b2"),
        lines=(),
        generators=(Generator("g1", "b1", 10.0, unit_cost=1.0),),
        loads=(BusLoad("b2", 5.0),),
    )
    with pytest.raises(GridError, match="disconnected"):
        assemble_dispatch(grid, {}, 1)


def test_station_price_table_converts_units():
    # LMP 10 $/MWh, 1.8e9 J per level -> 0.5 MWh -> 5 $/level
    iso, prices, _ = solve_dispatch(one_bus_grid(), {}, 1, level_energy=1.8e9,
                                    station_of_bus={"b1": "s1"})
    assert_allclose(prices.at("s1", 1), 5.0, atol=1e-9)


def test_case_study_style_ramp_rates():
    # nuclear 10%/hr and coal 40%/hr of capacity, half-hour steps
    t_steps = 6
    nuc_cap, coal_cap = 1000.0, 500.0
    grid = GridModel(
        buses=("hub",),
        lines=(),
        generators=(
            Generator("nuclear", "hub", nuc_cap, unit_cost=8.0,
                      ramp_up=nuc_cap * 0.10 / 2, ramp_down=nuc_cap * 0.10 / 2),
            Generator("coal", "hub", coal_cap, unit_cost=22.0,
                      ramp_up=coal_cap * 0.40 / 2, ramp_down=coal_cap * 0.40 / 2),
        ),
        loads=(BusLoad("hub", [600, 700, 800, 900, 1000, 1100]),),
        step_seconds=1800.0,
    )
    iso, _, _ = solve_dispatch(grid, {}, horizon=t_steps)
    for g, cap, frac in (("nuclear", nuc_cap, 0.10), ("coal", coal_cap, 0.40)):
        for t in range(1, t_steps):
            delta = iso.generation[(g, t + 1)] - iso.generation[(g, t)]
            assert abs(delta) <= cap * frac / 2 + 1e-6

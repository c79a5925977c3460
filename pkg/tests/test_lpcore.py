"""LP engine tests: dual sign convention, oracle agreement, KKT, MPS round trip."""

import itertools
import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from fleetgrid.lpcore import (
    BadProblemError,
    LpBuilder,
    LpStatus,
    SolutionFormatError,
    SolveOptions,
    basis_signature,
    mps_names,
    read_solution_file,
    solve,
    write_mps,
)


def build_simple(sense, rhs, obj=1.0, lb=0.0, ub=math.inf):
    b = LpBuilder("simple")
    j = b.add_col("x", lb=lb, ub=ub, obj=obj)
    i = b.add_row("r", sense, rhs)
    b.add_coef(i, j, 1.0)
    return b.build()


# --- dual sign convention: dual == d(objective)/d(rhs) ----------------------

def test_ge_row_dual_is_positive_in_minimization():
    p = build_simple(">", 3.0)
    sol = solve(p).require_optimal()
    assert_allclose(sol.x, [3.0])
    assert_allclose(sol.objective, 3.0)
    assert_allclose(sol.dual(p, "r"), 1.0, atol=1e-9)


def test_eq_row_dual():
    p = build_simple("=", 3.0)
    sol = solve(p).require_optimal()
    assert_allclose(sol.dual(p, "r"), 1.0, atol=1e-9)


def test_le_row_dual_is_negative_when_binding():
    # max x == min -x; raising the cap lowers the objective
    p = build_simple("<", 5.0, obj=-1.0)
    sol = solve(p).require_optimal()
    assert_allclose(sol.x, [5.0])
    assert_allclose(sol.dual(p, "r"), -1.0, atol=1e-9)


def test_mixed_senses_duals_map_back_to_original_rows():
    b = LpBuilder()
    x = b.add_col("x", obj=1.0)
    y = b.add_col("y", obj=2.0)
    z = b.add_col("z", obj=4.0)
    r1 = b.add_row("need", ">", 4.0)   # x + y >= 4
    r2 = b.add_row("link", "=", 2.0)   # y + z = 2
    r3 = b.add_row("cap", "<", 3.0)    # x - z <= 3
    b.add_coef(r1, x, 1.0)
    b.add_coef(r1, y, 1.0)
    b.add_coef(r2, y, 1.0)
    b.add_coef(r2, z, 1.0)
    b.add_coef(r3, x, 1.0)
    b.add_coef(r3, z, -1.0)
    p = b.build()
    sol = solve(p).require_optimal()
    assert_allclose(sol.objective, 6.0, atol=1e-9)
    assert_allclose([sol.primal(p, "x"), sol.primal(p, "y"), sol.primal(p, "z")],
                    [2.0, 2.0, 0.0], atol=1e-9)
    # hand-perturbed marginals
    assert_allclose(sol.dual(p, "need"), 1.0, atol=1e-9)
    assert_allclose(sol.dual(p, "link"), 1.0, atol=1e-9)
    assert_allclose(sol.dual(p, "cap"), 0.0, atol=1e-9)
    # z sits at its lower bound with reduced cost c_z - a_z'y = 4 - 1 = 3
    assert_allclose(sol.reduced_costs[2], 3.0, atol=1e-9)


def test_reduced_cost_at_lower_bound():
    b = LpBuilder()
    b.add_col("x", lb=1.0, obj=2.0)
    b.add_row("free", "<", 100.0)
    b.add_coef(0, 0, 1.0)
    sol = solve(b.build()).require_optimal()
    assert_allclose(sol.x, [1.0])
    assert_allclose(sol.reduced_costs, [2.0], atol=1e-9)


def test_capacity_dual_two_resources():
    # min 2x+3y s.t. x+y >= 10, x <= 6: marginal demand served by y at 3,
    # marginal capacity swaps y for x saving 1.
    b = LpBuilder()
    x = b.add_col("x", obj=2.0)
    y = b.add_col("y", obj=3.0)
    dem = b.add_row("demand", ">", 10.0)
    cap = b.add_row("xcap", "<", 6.0)
    b.add_coef(dem, x, 1.0)
    b.add_coef(dem, y, 1.0)
    b.add_coef(cap, x, 1.0)
    p = b.build()
    sol = solve(p).require_optimal()
    assert_allclose(sol.objective, 24.0, atol=1e-9)
    assert_allclose(sol.dual(p, "demand"), 3.0, atol=1e-9)
    assert_allclose(sol.dual(p, "xcap"), -1.0, atol=1e-9)


# --- statuses ---------------------------------------------------------------

def test_infeasible_status():
    b = LpBuilder()
    b.add_col("x", obj=1.0)
    lo = b.add_row("lo", ">", 3.0)
    hi = b.add_row("hi", "<", 2.0)
    b.add_coef(lo, 0, 1.0)
    b.add_coef(hi, 0, 1.0)
    sol = solve(b.build())
    assert sol.status is LpStatus.INFEASIBLE
    with pytest.raises(Exception):
        sol.require_optimal()


def test_unbounded_status():
    b = LpBuilder()
    b.add_col("x", obj=-1.0)
    b.add_row("r", ">", 0.0)
    b.add_coef(0, 0, 1.0)
    assert solve(b.build()).status is LpStatus.UNBOUNDED


def test_iteration_limit_status():
    rng = np.random.default_rng(7)
    b = LpBuilder()
    n, m = 20, 15
    for j in range(n):
        b.add_col(f"x{j}", obj=float(rng.uniform(-1, 1)), ub=10.0)
    A = rng.uniform(0, 1, size=(m, n))
    for i in range(m):
        b.add_row(f"r{i}", "<", float(n))
        for j in range(n):
            b.add_coef(i, j, float(A[i, j]))
    sol = solve(b.build(), SolveOptions(maxiter=1, presolve=False))
    assert sol.status is LpStatus.ITERATION_LIMIT


# --- builder validation -----------------------------------------------------

def test_builder_rejects_duplicate_tags_and_bad_data():
    b = LpBuilder()
    b.add_col("x")
    with pytest.raises(BadProblemError):
        b.add_col("x")
    b.add_row("r", "<", 1.0)
    with pytest.raises(BadProblemError):
        b.add_row("r", "<", 1.0)
    with pytest.raises(BadProblemError):
        b.add_row("bad-sense", "<=", 1.0)
    with pytest.raises(BadProblemError):
        b.add_row("nanrhs", "<", math.nan)
    with pytest.raises(BadProblemError):
        b.add_col("crossed", lb=2.0, ub=1.0)
    with pytest.raises(BadProblemError):
        b.add_coef(0, 0, math.inf)


# --- vertex enumeration oracle ----------------------------------------------

def vertex_optimum(c, A, b, U):
    """Brute-force optimum of min c'x s.t. Ax <= b, 0 <= x <= U.

    Enumerates every choice of n active constraints from rows and bounds,
    solves the square system, and keeps the best feasible vertex.
    """
    n = len(c)
    cands = [(A[i], b[i]) for i in range(A.shape[0])]
    eye = np.eye(n)
    cands += [(eye[j], 0.0) for j in range(n)]
    cands += [(eye[j], U[j]) for j in range(n)]
    best = math.inf
    for picks in itertools.combinations(range(len(cands)), n):
        G = np.array([cands[k][0] for k in picks])
        h = np.array([cands[k][1] for k in picks])
        if abs(np.linalg.det(G)) < 1e-10:
            continue
        x = np.linalg.solve(G, h)
        if (A @ x <= b + 1e-9).all() and (x >= -1e-9).all() and (x <= U + 1e-9).all():
            best = min(best, float(c @ x))
    return best


def random_instance(rng):
    n = int(rng.integers(2, 6))
    m = int(rng.integers(2, 7))
    A = rng.uniform(-1, 2, size=(m, n))
    b = rng.uniform(0.5, 4.0, size=m)  # b > 0 keeps x = 0 feasible
    c = rng.uniform(-2, 2, size=n)
    U = rng.uniform(1.0, 5.0, size=n)
    return c, A, b, U


def as_problem(c, A, b, U):
    bld = LpBuilder("rand")
    for j in range(len(c)):
        bld.add_col(f"x{j}", lb=0.0, ub=float(U[j]), obj=float(c[j]))
    for i in range(A.shape[0]):
        bld.add_row(f"r{i}", "<", float(b[i]))
        for j in range(len(c)):
            bld.add_coef(i, j, float(A[i, j]))
    return bld.build()


def test_100_random_lps_match_vertex_enumeration_oracle():
    rng = np.random.default_rng(42)
    for k in range(100):
        c, A, b, U = random_instance(rng)
        oracle = vertex_optimum(c, A, b, U)
        assert math.isfinite(oracle)
        sol = solve(as_problem(c, A, b, U)).require_optimal()
        assert abs(sol.objective - oracle) <= 1e-6 * (1 + abs(oracle)), f"instance {k}"


def test_kkt_residuals_within_documented_tolerances():
    rng = np.random.default_rng(3)
    for _ in range(25):
        c, A, b, U = random_instance(rng)
        sol = solve(as_problem(c, A, b, U)).require_optimal()
        for key in ("primal", "stationarity", "complementarity", "dual_sign", "gap"):
            assert sol.kkt[key] <= 1e-6, (key, sol.kkt)


def test_larger_instances_against_interior_point():
    # supplement to the enumeration corpus: dual simplex vs a different
    # algorithm on sizes where enumeration is out of reach
    from scipy.optimize import linprog

    rng = np.random.default_rng(11)
    for _ in range(5):
        n, m = 50, 50
        A = rng.uniform(-1, 2, size=(m, n))
        b = rng.uniform(1.0, 5.0, size=m)
        c = rng.uniform(-2, 2, size=n)
        U = rng.uniform(1.0, 5.0, size=n)
        sol = solve(as_problem(c, A, b, U)).require_optimal()
        ref = linprog(c, A_ub=A, b_ub=b, bounds=np.column_stack([np.zeros(n), U]),
                      method="highs-ipm")
        assert ref.status == 0
        assert abs(sol.objective - ref.fun) <= 1e-6 * (1 + abs(ref.fun))


# --- determinism and basis stability ----------------------------------------

def test_repeat_solve_is_bitwise_identical():
    rng = np.random.default_rng(5)
    c, A, b, U = random_instance(rng)
    p = as_problem(c, A, b, U)
    s1, s2 = solve(p), solve(p)
    assert s1.objective == s2.objective
    assert s1.x.tobytes() == s2.x.tobytes()
    assert s1.duals.tobytes() == s2.duals.tobytes()
    assert s1.iterations == s2.iterations


def test_objective_scaling_keeps_basis_signature():
    rng = np.random.default_rng(9)
    c, A, b, U = random_instance(rng)
    p1 = as_problem(c, A, b, U)
    p2 = as_problem(c * 1000.0, A, b, U)
    s1 = solve(p1).require_optimal()
    s2 = solve(p2).require_optimal()
    assert basis_signature(p1, s1) == basis_signature(p2, s2)
    assert_allclose(s2.objective, s1.objective * 1000.0, rtol=1e-9)


# --- MPS export and external solution import --------------------------------

def mps_fixture():
    b = LpBuilder("tiny")
    x = b.add_col("ship_warehouse_a", lb=0.0, ub=4.0, obj=2.0)
    y = b.add_col("ship_warehouse_b", obj=3.0)
    z = b.add_col("free_var", lb=-math.inf, ub=math.inf, obj=0.5)
    dem = b.add_row("demand_total", ">", 5.0)
    bal = b.add_row("balance_node_1", "=", 0.0)
    b.add_coef(dem, x, 1.0)
    b.add_coef(dem, y, 1.0)
    b.add_coef(bal, y, 1.0)
    b.add_coef(bal, z, -1.0)
    return b.build()


def test_write_mps_golden():
    p = mps_fixture()
    expected = """NAME          tiny
ROWS
 N  COST
 G  demand_t
 E  balance_
COLUMNS
    ship_war  COST                 2   demand_t             1
    ship_w_1  COST                 3   demand_t             1
    ship_w_1  balance_             1
    free_var  COST               0.5   balance_            -1
RHS
    RHS       demand_t             5
BOUNDS
 UP BND       ship_war             4
 FR BND       free_var
ENDATA
"""
    assert write_mps(p) == expected


def test_mps_name_truncation_is_deterministic_and_unique():
    tags = [f"station_flow_{k}" for k in range(40)]
    b = LpBuilder()
    for t in tags:
        b.add_col(t)
    b.add_row("r", "<", 1.0)
    b.add_coef(0, 0, 1.0)
    names, _ = mps_names(b.build())
    assert len(set(names)) == len(names)
    assert all(len(nm) <= 8 for nm in names)
    # same tags, same names
    b2 = LpBuilder()
    for t in tags:
        b2.add_col(t)
    b2.add_row("r", "<", 1.0)
    b2.add_coef(0, 0, 1.0)
    assert mps_names(b2.build())[0] == names


def test_read_solution_file_round_trip():
    p = mps_fixture()
    native = solve(p).require_optimal()
    cols, rows = mps_names(p)
    lines = ["# external solver output", "status optimal",
             f"objective {float(native.objective)!r}"]
    lines += [f"col {nm} {float(native.x[j])!r} {float(native.reduced_costs[j])!r}"
              for j, nm in enumerate(cols)]
    lines += [f"row {nm} {float(native.duals[i])!r}" for i, nm in enumerate(rows)]
    ext = read_solution_file("\n".join(lines), p)
    assert ext.status is LpStatus.OPTIMAL
    assert_allclose(ext.objective, native.objective, rtol=0, atol=0)
    assert_allclose(ext.x, native.x, rtol=0, atol=0)
    assert_allclose(ext.duals, native.duals, rtol=0, atol=0)
    for key, val in ext.kkt.items():
        assert val <= 1e-6, (key, val)


def test_read_solution_file_errors_carry_line_numbers():
    p = mps_fixture()
    with pytest.raises(SolutionFormatError) as err:
        read_solution_file("status optimal\ncol nosuch 1.0\n", p)
    assert err.value.line_no == 2
    with pytest.raises(SolutionFormatError) as err:
        read_solution_file("status optimal\nobjective notafloat\n", p)
    assert err.value.line_no == 2
    with pytest.raises(SolutionFormatError):
        read_solution_file("objective 1.0\n", p)  # no status record
    with pytest.raises(SolutionFormatError) as err:
        read_solution_file("status optimal\nfrob x 1\n", p)
    assert err.value.line_no == 2

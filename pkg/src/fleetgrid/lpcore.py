"""Sparse linear programs with primal/dual results.

Every optimization module in the package assembles an :class:`LpProblem`
(triplet matrix, row senses, bounds, objective, and string tags that make
rows and columns addressable by name) and hands it to :func:`solve`.  The
solver backend is HiGHS dual simplex via scipy; simplex is deliberate, since
the marginal prices the grid module extracts are exact basis duals.

Dual sign convention: the dual reported for a row is the derivative of the
optimal objective with respect to that row's right-hand side.  Binding ``>=``
rows therefore carry nonnegative duals in a minimization and binding ``<=``
rows nonpositive ones.
"""

from __future__ import annotations

import math
import re
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

SENSES = ("=", "<", ">")


class LpStatus(Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    UNBOUNDED = "Unbounded"
    ITERATION_LIMIT = "IterationLimit"


class LpError(Exception):
    """Base class for LP-layer failures."""


class BadProblemError(LpError):
    """The problem violates a structural invariant (dimensions, tags, NaN)."""


class StatusError(LpError):
    """An operation required an Optimal solution but got something else."""

    def __init__(self, status: LpStatus, detail: str = ""):
        self.status = status
        super().__init__(f"solution status is {status.value}" + (f": {detail}" if detail else ""))


class SolutionFormatError(LpError):
    """External solution file did not parse; carries the 1-based line number."""

    def __init__(self, line_no: int, message: str):
        self.line_no = line_no
        super().__init__(f"line {line_no}: {message}")


@dataclass(frozen=True)
class LpProblem:
    """Immutable sparse LP: min obj'x  s.t.  A x {=,<,>} rhs,  lb <= x <= ub."""

    obj: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    a_rows: np.ndarray
    a_cols: np.ndarray
    a_vals: np.ndarray
    senses: tuple[str, ...]
    rhs: np.ndarray
    col_tags: tuple[str, ...]
    row_tags: tuple[str, ...]
    name: str = "lp"

    @property
    def ncols(self) -> int:
        return self.obj.size

    @property
    def nrows(self) -> int:
        return self.rhs.size

    def matrix(self) -> sp.csr_matrix:
        """Constraint matrix as CSR (duplicate triplets summed)."""
        m = sp.coo_matrix(
            (self.a_vals, (self.a_rows, self.a_cols)), shape=(self.nrows, self.ncols)
        )
        return m.tocsr()

    def row_index(self) -> dict[str, int]:
        return {t: i for i, t in enumerate(self.row_tags)}

    def col_index(self) -> dict[str, int]:
        return {t: i for i, t in enumerate(self.col_tags)}


class LpBuilder:
    """Incremental construction of an LpProblem with tag bookkeeping."""

    def __init__(self, name: str = "lp"):
        self.name = name
        self._obj: list[float] = []
        self._lb: list[float] = []
        self._ub: list[float] = []
        self._col_tags: list[str] = []
        self._col_ix: dict[str, int] = {}
        self._senses: list[str] = []
        self._rhs: list[float] = []
        self._row_tags: list[str] = []
        self._row_ix: dict[str, int] = {}
        self._trip_r: list[int] = []
        self._trip_c: list[int] = []
        self._trip_v: list[float] = []

    def add_col(self, tag: str, lb: float = 0.0, ub: float = math.inf, obj: float = 0.0) -> int:
        if tag in self._col_ix:
            raise BadProblemError(f"duplicate column tag {tag!r}")
        if not (lb <= ub):
            raise BadProblemError(f"column {tag!r} has lb > ub ({lb} > {ub})")
        if not math.isfinite(obj):
            raise BadProblemError(f"column {tag!r} has non-finite objective {obj}")
        j = len(self._col_tags)
        self._col_ix[tag] = j
        self._col_tags.append(tag)
        self._lb.append(lb)
        self._ub.append(ub)
        self._obj.append(obj)
        return j

    def add_row(self, tag: str, sense: str, rhs: float) -> int:
        if sense not in SENSES:
            raise BadProblemError(f"row {tag!r}: sense must be one of {SENSES}, got {sense!r}")
        if tag in self._row_ix:
            raise BadProblemError(f"duplicate row tag {tag!r}")
        if not math.isfinite(rhs):
            raise BadProblemError(f"row {tag!r} has non-finite rhs {rhs}")
        i = len(self._row_tags)
        self._row_ix[tag] = i
        self._row_tags.append(tag)
        self._senses.append(sense)
        self._rhs.append(rhs)
        return i

    def add_coef(self, row: int, col: int, val: float) -> None:
        if val == 0.0:
            return
        if not math.isfinite(val):
            raise BadProblemError(
                f"non-finite coefficient at row {self._row_tags[row]!r}, "
                f"col {self._col_tags[col]!r}"
            )
        self._trip_r.append(row)
        self._trip_c.append(col)
        self._trip_v.append(val)

    def add_obj(self, col: int, delta: float) -> None:
        self._obj[col] += delta

    def col(self, tag: str) -> int:
        return self._col_ix[tag]

    def row(self, tag: str) -> int:
        return self._row_ix[tag]

    def has_col(self, tag: str) -> bool:
        return tag in self._col_ix

    def has_row(self, tag: str) -> bool:
        return tag in self._row_ix

    def build(self) -> LpProblem:
        def frozen(a, dtype=float):
            arr = np.asarray(a, dtype=dtype)
            arr.setflags(write=False)
            return arr

        return LpProblem(
            obj=frozen(self._obj),
            lb=frozen(self._lb),
            ub=frozen(self._ub),
            a_rows=frozen(self._trip_r, dtype=np.int64),
            a_cols=frozen(self._trip_c, dtype=np.int64),
            a_vals=frozen(self._trip_v),
            senses=tuple(self._senses),
            rhs=frozen(self._rhs),
            col_tags=tuple(self._col_tags),
            row_tags=tuple(self._row_tags),
            name=self.name,
        )


@dataclass
class SolveOptions:
    maxiter: int | None = None
    time_limit: float | None = None
    presolve: bool = True


def with_rhs(problem: LpProblem, updates: Mapping[str, float]) -> LpProblem:
    """Copy of the problem with some rows' right-hand sides replaced."""
    rhs = problem.rhs.copy()
    ix = problem.row_index()
    for tag, val in updates.items():
        if not math.isfinite(val):
            raise BadProblemError(f"row {tag!r}: non-finite rhs {val}")
        rhs[ix[tag]] = val
    rhs.setflags(write=False)
    return LpProblem(obj=problem.obj, lb=problem.lb, ub=problem.ub,
                     a_rows=problem.a_rows, a_cols=problem.a_cols,
                     a_vals=problem.a_vals, senses=problem.senses, rhs=rhs,
                     col_tags=problem.col_tags, row_tags=problem.row_tags,
                     name=problem.name)


@dataclass
class LpSolution:
    status: LpStatus
    objective: float
    x: np.ndarray
    duals: np.ndarray
    reduced_costs: np.ndarray
    iterations: int
    wall_time: float
    message: str = ""
    kkt: dict[str, float] = field(default_factory=dict)

    def require_optimal(self, context: str = "") -> "LpSolution":
        if self.status is not LpStatus.OPTIMAL:
            raise StatusError(self.status, context or self.message)
        return self

    def primal(self, problem: LpProblem, tag: str) -> float:
        return float(self.x[problem.col_index()[tag]])

    def dual(self, problem: LpProblem, tag: str) -> float:
        return float(self.duals[problem.row_index()[tag]])


_SCIPY_STATUS = {
    0: LpStatus.OPTIMAL,
    1: LpStatus.ITERATION_LIMIT,
    2: LpStatus.INFEASIBLE,
    3: LpStatus.UNBOUNDED,
    4: LpStatus.ITERATION_LIMIT,  # numerical trouble surfaces as a capped run
}


def _split_rows(problem: LpProblem):
    """Partition rows into equalities and <= inequalities (>= rows negated)."""
    senses = np.array(problem.senses)
    eq_mask = senses == "="
    le_mask = senses == "<"
    ge_mask = senses == ">"
    a = problem.matrix()
    a_eq = a[np.flatnonzero(eq_mask)] if eq_mask.any() else None
    b_eq = problem.rhs[eq_mask] if eq_mask.any() else None
    ub_parts = []
    ub_rhs = []
    if le_mask.any():
        ub_parts.append(a[np.flatnonzero(le_mask)])
        ub_rhs.append(problem.rhs[le_mask])
    if ge_mask.any():
        ub_parts.append(-a[np.flatnonzero(ge_mask)])
        ub_rhs.append(-problem.rhs[ge_mask])
    a_ub = sp.vstack(ub_parts).tocsr() if ub_parts else None
    b_ub = np.concatenate(ub_rhs) if ub_rhs else None
    return a_eq, b_eq, a_ub, b_ub, eq_mask, le_mask, ge_mask


def solve(problem: LpProblem, opts: SolveOptions | None = None) -> LpSolution:
    """Solve to optimality, reporting primal values, row duals and reduced costs.

    Deterministic for a fixed problem: same status, same objective, same basis.
    On numerical failure the solve is retried once without presolve before the
    run is reported as IterationLimit with the backend's diagnostic message.
    """
    opts = opts or SolveOptions()
    if problem.ncols == 0:
        raise BadProblemError("problem has no columns")
    a_eq, b_eq, a_ub, b_ub, eq_mask, le_mask, ge_mask = _split_rows(problem)
    bounds = np.column_stack([problem.lb, problem.ub])
    sopts: dict = {"presolve": opts.presolve}
    if opts.maxiter is not None:
        sopts["maxiter"] = opts.maxiter
    if opts.time_limit is not None:
        sopts["time_limit"] = opts.time_limit

    t0 = time.perf_counter()
    res = linprog(problem.obj, A_ub=a_ub, b_ub=b_ub, A_eq=a_eq, b_eq=b_eq,
                  bounds=bounds, method="highs-ds", options=sopts)
    if res.status == 4 and opts.presolve:
        sopts["presolve"] = False
        res = linprog(problem.obj, A_ub=a_ub, b_ub=b_ub, A_eq=a_eq, b_eq=b_eq,
                      bounds=bounds, method="highs-ds", options=sopts)
    wall = time.perf_counter() - t0

    status = _SCIPY_STATUS.get(res.status, LpStatus.ITERATION_LIMIT)
    n, m = problem.ncols, problem.nrows
    x = np.zeros(n)
    duals = np.zeros(m)
    rc = np.zeros(n)
    objective = math.nan
    if status is LpStatus.OPTIMAL:
        x = np.asarray(res.x, dtype=float)
        objective = float(res.fun)
        # scipy marginals are d(obj)/d(rhs) of the row as passed; >= rows were
        # negated on both sides, which flips the sign back here.
        if eq_mask.any():
            duals[eq_mask] = res.eqlin.marginals
        ineq_marg = np.asarray(res.ineqlin.marginals, dtype=float) if (le_mask.any() or ge_mask.any()) else np.zeros(0)
        n_le = int(le_mask.sum())
        if n_le:
            duals[le_mask] = ineq_marg[:n_le]
        if ge_mask.any():
            duals[ge_mask] = -ineq_marg[n_le:]
        rc = np.asarray(res.lower.marginals, dtype=float) + np.asarray(res.upper.marginals, dtype=float)
    sol = LpSolution(
        status=status,
        objective=objective,
        x=x,
        duals=duals,
        reduced_costs=rc,
        iterations=int(res.nit) if res.nit is not None else 0,
        wall_time=wall,
        message=str(res.message),
    )
    if status is LpStatus.OPTIMAL:
        sol.kkt = check_kkt(problem, sol)
    return sol


def check_kkt(problem: LpProblem, sol: LpSolution) -> dict[str, float]:
    """Scaled KKT residuals of a claimed-optimal solution.

    Returns primal feasibility, stationarity, complementary slackness and the
    primal-dual objective gap, each normalized by the relevant data magnitude
    so tolerances are scale-free.
    """
    a = problem.matrix()
    x, y, z = sol.x, sol.duals, sol.reduced_costs
    ax = a @ x
    senses = np.array(problem.senses)
    scale_b = 1.0 + (np.abs(problem.rhs).max() if problem.nrows else 0.0) + (np.abs(ax).max() if problem.nrows else 0.0)

    primal = 0.0
    comp = 0.0
    dual_sign = 0.0
    for i in range(problem.nrows):
        r = ax[i] - problem.rhs[i]
        s = senses[i]
        if s == "=":
            primal = max(primal, abs(r))
        elif s == "<":
            primal = max(primal, max(r, 0.0))
            comp = max(comp, abs(y[i] * min(r, 0.0)))
            dual_sign = max(dual_sign, max(y[i], 0.0))
        else:
            primal = max(primal, max(-r, 0.0))
            comp = max(comp, abs(y[i] * max(r, 0.0)))
            dual_sign = max(dual_sign, max(-y[i], 0.0))
    lo_viol = np.where(np.isfinite(problem.lb), problem.lb - x, -np.inf)
    hi_viol = np.where(np.isfinite(problem.ub), x - problem.ub, -np.inf)
    bound_viol = max(float(np.max(lo_viol, initial=0.0)), float(np.max(hi_viol, initial=0.0)))
    primal = max(primal, bound_viol)

    # stationarity: obj = A'y + z
    grad = problem.obj - a.T @ y - z
    scale_c = 1.0 + float(np.abs(problem.obj).max(initial=0.0))
    stationarity = float(np.abs(grad).max(initial=0.0)) / scale_c

    # bound complementarity: positive rc pins x to lb, negative rc to ub
    gap_lo = np.where(np.isfinite(problem.lb), x - problem.lb, np.inf)
    gap_hi = np.where(np.isfinite(problem.ub), problem.ub - x, np.inf)
    pos = np.maximum(z, 0.0)
    neg = np.maximum(-z, 0.0)
    with np.errstate(invalid="ignore"):
        comp_b = np.maximum(
            np.where(np.isinf(gap_lo), pos, pos * gap_lo),
            np.where(np.isinf(gap_hi), neg, neg * gap_hi),
        )
    comp = max(comp, float(np.max(comp_b, initial=0.0)))
    comp_scale = 1.0 + abs(sol.objective) if math.isfinite(sol.objective) else 1.0

    dual_obj = float(y @ problem.rhs)
    fin_lb = np.isfinite(problem.lb)
    fin_ub = np.isfinite(problem.ub)
    dual_obj += float(np.maximum(z, 0.0)[fin_lb] @ problem.lb[fin_lb])
    dual_obj += float(np.minimum(z, 0.0)[fin_ub] @ problem.ub[fin_ub])
    gap = abs(sol.objective - dual_obj) / (1.0 + abs(sol.objective))

    return {
        "primal": primal / scale_b,
        "stationarity": stationarity,
        "complementarity": comp / comp_scale,
        "dual_sign": dual_sign / scale_c,
        "gap": gap,
    }


def basis_signature(problem: LpProblem, sol: LpSolution, tol: float = 1e-7) -> bytes:
    """Pattern of active bounds and binding rows; stable across objective scaling."""
    a = problem.matrix()
    ax = a @ sol.x
    scale = 1.0 + float(np.abs(problem.rhs).max(initial=0.0))
    at_lb = np.isfinite(problem.lb) & (np.abs(sol.x - problem.lb) <= tol * (1 + np.abs(problem.lb)))
    at_ub = np.isfinite(problem.ub) & (np.abs(sol.x - problem.ub) <= tol * (1 + np.abs(problem.ub)))
    binding = np.abs(ax - problem.rhs) <= tol * scale
    return np.packbits(np.concatenate([at_lb, at_ub, binding]).astype(np.uint8)).tobytes()


# ---------------------------------------------------------------------------
# MPS export and external-solution import.

_NAME_RE = re.compile(r"[^A-Za-z0-9_]")
_B36 = "0123456789ABCDEFGHIJKLMNOPQRSTUVWXYZ"


def _b36(k: int) -> str:
    s = ""
    while True:
        s = _B36[k % 36] + s
        k //= 36
        if k == 0:
            return s


def _short_names(tags: Iterable[str], width: int = 8) -> list[str]:
    """Deterministic 8-char names: sanitize, truncate, suffix collisions.

    A tag that truncates into an already-used name gets ``_K`` appended where
    K counts collisions of that prefix in base36, shrinking the prefix to fit.
    """
    out: list[str] = []
    used: set[str] = set()
    bumps: dict[str, int] = {}
    for tag in tags:
        base = _NAME_RE.sub("_", tag) or "X"
        cand = base[:width]
        while cand in used:
            k = bumps.get(cand, 0) + 1
            bumps[cand] = k
            suffix = "_" + _b36(k)
            cand = base[: width - len(suffix)] + suffix
        used.add(cand)
        out.append(cand)
    return out


def mps_names(problem: LpProblem) -> tuple[list[str], list[str]]:
    """(column names, row names) used by write_mps, in index order."""
    return _short_names(problem.col_tags), _short_names(problem.row_tags)


def _fmt12(v: float) -> str:
    for spec in (".10g", ".8g", ".6g"):
        s = format(v, spec)
        if len(s) <= 12:
            return s
    return format(v, ".5e")


def write_mps(problem: LpProblem) -> str:
    """Fixed-format MPS text; numbers keep >= 6 significant digits.

    The objective row is named COST.  Round-tripping through an external
    solver reproduces objectives to about 1e-6 relative, limited by the
    12-character value fields.
    """
    col_names, row_names = mps_names(problem)
    senses_mps = {"=": "E", "<": "L", ">": "G"}
    lines = [f"NAME          {problem.name[:60]}", "ROWS", " N  COST"]
    for nm, sense in zip(row_names, problem.senses):
        lines.append(f" {senses_mps[sense]}  {nm}")

    by_col: dict[int, dict[int, float]] = {}
    for r, c, v in zip(problem.a_rows, problem.a_cols, problem.a_vals):
        by_col.setdefault(int(c), {})
        by_col[int(c)][int(r)] = by_col[int(c)].get(int(r), 0.0) + float(v)

    lines.append("COLUMNS")
    for j, cname in enumerate(col_names):
        entries: list[tuple[str, float]] = []
        if problem.obj[j] != 0.0:
            entries.append(("COST", float(problem.obj[j])))
        for r in sorted(by_col.get(j, {})):
            val = by_col[j][r]
            if val != 0.0:
                entries.append((row_names[r], val))
        for a in range(0, len(entries), 2):
            chunk = entries[a:a + 2]
            line = f"    {cname:<10}{chunk[0][0]:<10}{_fmt12(chunk[0][1]):>12}"
            if len(chunk) == 2:
                line += f"   {chunk[1][0]:<10}{_fmt12(chunk[1][1]):>12}"
            lines.append(line)

    lines.append("RHS")
    for i, rname in enumerate(row_names):
        if problem.rhs[i] != 0.0:
            lines.append(f"    RHS       {rname:<10}{_fmt12(float(problem.rhs[i])):>12}")

    lines.append("BOUNDS")
    for j, cname in enumerate(col_names):
        lo, hi = float(problem.lb[j]), float(problem.ub[j])
        if lo == 0.0 and math.isinf(hi):
            continue  # MPS default bound
        if lo == hi:
            lines.append(f" FX BND       {cname:<10}{_fmt12(lo):>12}")
            continue
        if math.isinf(lo) and math.isinf(hi):
            lines.append(f" FR BND       {cname}")
            continue
        if math.isinf(lo):
            lines.append(f" MI BND       {cname:<10}")
        elif lo != 0.0:
            lines.append(f" LO BND       {cname:<10}{_fmt12(lo):>12}")
        if not math.isinf(hi):
            lines.append(f" UP BND       {cname:<10}{_fmt12(hi):>12}")
    lines.append("ENDATA")
    return "\n".join(lines) + "\n"


def read_solution_file(text: str, problem: LpProblem) -> LpSolution:
    """Parse the documented external-solution format against a problem.

    Format, one record per line (blank lines and ``#`` comments ignored)::

        status optimal|infeasible|unbounded|iterationlimit
        objective <float>
        col <mps-name> <primal> [<reduced cost>]
        row <mps-name> <dual>

    Names are the MPS names from :func:`mps_names`.  Unknown names and
    malformed records raise :class:`SolutionFormatError` with the line number.
    The result plugs into the same extract_* paths as a native solve,
    enabling an external solver as a drop-in backend.
    """
    col_names, row_names = mps_names(problem)
    col_ix = {nm: j for j, nm in enumerate(col_names)}
    row_ix = {nm: i for i, nm in enumerate(row_names)}
    status: LpStatus | None = None
    objective = math.nan
    x = np.zeros(problem.ncols)
    duals = np.zeros(problem.nrows)
    rc = np.zeros(problem.ncols)
    status_words = {s.value.lower(): s for s in LpStatus}

    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        kind = parts[0].lower()
        try:
            if kind == "status":
                status = status_words[parts[1].lower()]
            elif kind == "objective":
                objective = float(parts[1])
            elif kind == "col":
                j = col_ix[parts[1]]
                x[j] = float(parts[2])
                if len(parts) > 3:
                    rc[j] = float(parts[3])
            elif kind == "row":
                duals[row_ix[parts[1]]] = float(parts[2])
            else:
                raise SolutionFormatError(ln, f"unknown record kind {parts[0]!r}")
        except SolutionFormatError:
            raise
        except KeyError as exc:
            raise SolutionFormatError(ln, f"unknown name {exc.args[0]!r}") from None
        except (IndexError, ValueError):
            raise SolutionFormatError(ln, f"malformed record: {raw!r}") from None
    if status is None:
        raise SolutionFormatError(0, "missing status record")
    sol = LpSolution(status=status, objective=objective, x=x, duals=duals,
                     reduced_costs=rc, iterations=0, wall_time=0.0,
                     message="external solution file")
    if status is LpStatus.OPTIMAL:
        sol.kkt = check_kkt(problem, sol)
    return sol

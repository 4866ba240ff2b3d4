"""Parameterized convex cone programs: build, audit, compile once, re-solve.

Thin typed layer over cvxpy that keeps an exact scalar-row ledger of what was
emitted (needed for the model-size accounting), enforces an affine/conic
discipline at build time, and reports duals of tagged equalities with the
sign convention d(optimum)/d(rhs), so cut formulas can use them directly.
"""

import time
import warnings
from dataclasses import dataclass

import cvxpy as cp
import numpy as np


class ConicProgramError(ValueError):
    """Non-convex or malformed construct, reported at build/compile time."""


@dataclass
class SolverOptions:
    solver: str = "CLARABEL"
    feas_tol: float = 1e-8
    gap_tol: float = 1e-8
    max_iter: int = 200000
    verbose: bool = False
    fallback: str = "SCS"


def _size(expr):
    return int(np.prod(expr.shape)) if hasattr(expr, "shape") else 1


class ConicProgram:
    """Named variable blocks, affine rows, cone memberships, scalar parameters.

    Every add_* call is audited immediately (affine where affine is required,
    parameters only in coefficient-affine positions) and recorded in the row
    ledger: one count per scalar equality/inequality row, one per cone
    membership. `label` groups rows for structural comparison of two programs.
    """

    def __init__(self, name=""):
        self.name = name
        self.variables = {}
        self.parameters = {}
        self.constraints = []
        self.tagged = {}              # tag -> constraint object
        self.ledger = []              # (label, kind, rows)
        self._objective = 0
        self.n_equality_rows = 0
        self.n_inequality_rows = 0
        self.n_cone_constraints = 0

    # -- declaration -------------------------------------------------------

    def add_variable(self, name, shape=(), nonneg=False, boolean=False):
        if name in self.variables:
            raise ConicProgramError("duplicate variable block %r" % name)
        v = cp.Variable(shape, name=name, nonneg=nonneg, boolean=boolean)
        self.variables[name] = v
        return v

    def add_parameter(self, name, shape=(), value=None):
        if name in self.parameters:
            raise ConicProgramError("duplicate parameter %r" % name)
        p = cp.Parameter(shape, name=name)
        if value is not None:
            p.value = value
        self.parameters[name] = p
        return p

    # -- constraints -------------------------------------------------------

    def _audit_affine(self, expr, where):
        if not expr.is_affine():
            raise ConicProgramError("%s: expression is not affine in %s" % (where, self.name))

    def add_equality(self, lhs, rhs, tag=None, label=None):
        lhs, rhs = cp.Expression.cast_to_const(lhs), cp.Expression.cast_to_const(rhs)
        self._audit_affine(lhs - rhs, label or tag or "equality")
        con = lhs == rhs
        self.constraints.append(con)
        rows = _size(con.expr)
        self.n_equality_rows += rows
        self.ledger.append((label or tag or "eq", "eq", rows))
        if tag is not None:
            if tag in self.tagged:
                raise ConicProgramError("duplicate tag %r" % tag)
            self.tagged[tag] = con
        return con

    def add_inequality(self, lhs, rhs, label=None):
        """lhs <= rhs, both affine."""
        lhs, rhs = cp.Expression.cast_to_const(lhs), cp.Expression.cast_to_const(rhs)
        self._audit_affine(lhs - rhs, label or "inequality")
        con = lhs <= rhs
        self.constraints.append(con)
        rows = _size(con.expr)
        self.n_inequality_rows += rows
        self.ledger.append((label or "ineq", "ineq", rows))
        return con

    def add_box(self, expr, lo, hi, label=None):
        self.add_inequality(lo, expr, label=label)
        self.add_inequality(expr, hi, label=label)

    def add_soc(self, vector, scalar, label=None):
        """One membership per column: ||vector|| <= scalar elementwise over axis 0."""
        vector = cp.Expression.cast_to_const(vector)
        scalar = cp.Expression.cast_to_const(scalar)
        self._audit_affine(vector, label or "soc")
        self._audit_affine(scalar, label or "soc")
        if vector.ndim <= 1:
            con = cp.SOC(cp.reshape(scalar, (), order="F"), vector)
            count = 1
        else:
            con = cp.SOC(scalar, vector, axis=0)
            count = _size(scalar)
        self.constraints.append(con)
        self.n_cone_constraints += count
        self.ledger.append((label or "soc", "soc", count))
        return con

    def add_rotated_soc(self, x, y, z, label=None):
        """2xy >= ||z||^2 with x, y >= 0, one membership per column.

        Encoded as the plain cone ||(sqrt(2) z, x - y)|| <= x + y, which the
        identity (x+y)^2 - (x-y)^2 = 4xy makes equivalent.
        """
        x = cp.Expression.cast_to_const(x)
        y = cp.Expression.cast_to_const(y)
        z = cp.Expression.cast_to_const(z)
        for e in (x, y, z):
            self._audit_affine(e, label or "rotated soc")
        if z.ndim <= 1 and x.ndim == 0:
            zv = cp.reshape(z, (_size(z),), order="F")
            stacked = cp.hstack([np.sqrt(2.0) * zv, cp.reshape(x - y, (1,), order="F")])
            con = cp.SOC(cp.reshape(x + y, (), order="F"), stacked)
            count = 1
        else:
            # columns are independent memberships; z gains one row for x - y
            stacked = cp.vstack([np.sqrt(2.0) * cp.reshape(z, (1, _size(z)), order="F")
                                 if z.ndim == 1 else np.sqrt(2.0) * z,
                                 cp.reshape(x - y, (1, _size(x)), order="F")])
            con = cp.SOC(cp.reshape(x + y, (_size(x),), order="F"), stacked, axis=0)
            count = _size(x)
        self.constraints.append(con)
        self.n_cone_constraints += count
        self.ledger.append((label or "rsoc", "soc", count))
        return con

    # -- objective ---------------------------------------------------------

    def add_objective(self, expr, label=None):
        expr = cp.Expression.cast_to_const(expr)
        if not expr.is_convex():
            raise ConicProgramError("%s: objective term is not convex" % (label or "objective"))
        self._objective = self._objective + expr

    # -- accounting --------------------------------------------------------

    @property
    def n_variables(self):
        return sum(_size(v) for v in self.variables.values())

    @property
    def n_parameters(self):
        return sum(_size(p) for p in self.parameters.values())

    @property
    def n_constraints(self):
        return self.n_equality_rows + self.n_inequality_rows + self.n_cone_constraints

    def manifest(self):
        """Aggregated (label, kind) -> rows map for structural comparison."""
        out = {}
        for label, kind, rows in self.ledger:
            key = (label, kind)
            out[key] = out.get(key, 0) + rows
        return out


@dataclass
class ConicSolutionRecord:
    status: str                   # optimal | infeasible | unbounded | numerical_failure
    values: dict
    objective: float
    duals: dict
    solve_time: float
    solver: str = ""
    duality_gap: float = None
    message: str = ""


class CompiledProgram:
    """Solver-ready wrapper; parameter updates re-use the cached canonical form.

    Immutable once built except for the cvxpy parameter slots, which act as
    the per-process solve workspace (fork-based workers each own a copy, so
    concurrent solves cannot interfere).
    """

    def __init__(self, program):
        self.program = program
        self.problem = cp.Problem(cp.Minimize(program._objective), program.constraints)
        self._audit()

    def _audit(self):
        if not self.problem.is_dcp(dpp=True):
            for con in self.program.constraints:
                if not con.is_dcp(dpp=True):
                    raise ConicProgramError(
                        "non-convex or non-parametric-affine constraint in %s: %s"
                        % (self.program.name or "program", con))
            raise ConicProgramError(
                "objective of %s fails the convexity audit" % (self.program.name or "program"))

    def solve(self, parameter_values=None, options=None):
        return solve(self, parameter_values, options)


def compile_program(program):
    """Audit and canonicalize once; later solves only refresh parameter data."""
    return CompiledProgram(program)


_STATUS = {
    cp.OPTIMAL: "optimal",
    cp.INFEASIBLE: "infeasible",
    cp.UNBOUNDED: "unbounded",
    # an inaccurate optimum is only accepted after the fallback solver got
    # its chance to upgrade it; boundary-of-feasibility solves land here
    cp.OPTIMAL_INACCURATE: "optimal",
    cp.INFEASIBLE_INACCURATE: "infeasible",
    cp.UNBOUNDED_INACCURATE: "unbounded",
}


def _solver_args(options):
    if options.solver == "CLARABEL":
        return dict(solver="CLARABEL",
                    tol_feas=options.feas_tol,
                    tol_gap_abs=options.gap_tol,
                    tol_gap_rel=options.gap_tol,
                    max_iter=min(options.max_iter, 10000))
    if options.solver == "SCS":
        return dict(solver="SCS", eps=options.feas_tol, max_iters=options.max_iter)
    return dict(solver=options.solver)


def _complementarity_gap(constraints):
    """Sum of <dual, slack> over all constraints; the primal-dual gap at a
    KKT-feasible pair, up to the solver's stationarity residual."""
    total = 0.0
    for con in constraints:
        dv = con.dual_value
        if dv is None:
            return None
        if isinstance(con, cp.constraints.second_order.SOC):
            t, X = con.args[0].value, con.args[1].value
            total += float(np.asarray(t).ravel() @ np.asarray(dv[0]).ravel()
                           + np.asarray(X).ravel() @ np.asarray(dv[1]).ravel())
        elif isinstance(con, cp.constraints.zero.Equality):
            total += float(np.asarray(con.expr.value).ravel() @ np.asarray(dv).ravel())
        else:
            # lhs <= rhs: slack is -(lhs - rhs)
            total += float(-np.asarray(con.expr.value).ravel() @ np.asarray(dv).ravel())
    return abs(total)


def solve(compiled, parameter_values=None, options=None):
    """Solve a compiled program; returns a ConicSolutionRecord.

    Tagged-equality duals are sign-flipped from cvxpy's convention so each
    reported multiplier is the sensitivity of the optimum to the constraint's
    right-hand side.
    """
    options = options or SolverOptions()
    program = compiled.program
    parameter_values = parameter_values or {}
    for name, value in parameter_values.items():
        if name not in program.parameters:
            raise ConicProgramError("unknown parameter %r" % name)
        program.parameters[name].value = value
    missing = [name for name, p in program.parameters.items() if p.value is None]
    if missing:
        raise ConicProgramError("unassigned parameters: %s" % ", ".join(missing))

    # warm_start=False: a re-solved program must depend only on the parameter
    # values, never on which anchors it happened to solve before. Inaccurate
    # statuses are processed below, so the advisory warning is noise here.
    t0 = time.perf_counter()
    status, message = None, ""
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message="Solution may be inaccurate")
        try:
            compiled.problem.solve(**_solver_args(options), warm_start=False,
                                   verbose=options.verbose)
            status = compiled.problem.status
        except cp.error.SolverError as exc:
            message = str(exc)
        if status in (None, cp.SOLVER_ERROR, cp.OPTIMAL_INACCURATE) and options.fallback \
                and options.fallback != options.solver:
            retry = SolverOptions(solver=options.fallback, feas_tol=options.feas_tol,
                                  gap_tol=options.gap_tol, max_iter=options.max_iter,
                                  verbose=options.verbose, fallback="")
            try:
                compiled.problem.solve(**_solver_args(retry), warm_start=False,
                                       verbose=retry.verbose)
                status = compiled.problem.status
            except cp.error.SolverError as exc:
                message = message + "; fallback: " + str(exc) if message else str(exc)
                status = None
    wall = time.perf_counter() - t0

    mapped = _STATUS.get(status, "numerical_failure")
    solver_name = getattr(compiled.problem.solver_stats, "solver_name", "") \
        if compiled.problem.solver_stats else ""
    if mapped != "optimal":
        return ConicSolutionRecord(mapped, {}, float("nan"), {}, wall, solver_name,
                                   message=message or ("solver status: %s" % status))

    values = {name: np.array(v.value) for name, v in program.variables.items()}
    duals = {}
    for tag, con in program.tagged.items():
        dv = con.dual_value
        if dv is None:
            raise ConicProgramError("dual missing for tagged equality %r" % tag)
        duals[tag] = -np.atleast_1d(np.asarray(dv, dtype=float))
    stats_time = compiled.problem.solver_stats.solve_time \
        if compiled.problem.solver_stats and compiled.problem.solver_stats.solve_time else wall
    note = "accepted inaccurate optimum" if status == cp.OPTIMAL_INACCURATE else ""
    return ConicSolutionRecord("optimal", values, float(compiled.problem.value), duals,
                               stats_time, solver_name,
                               _complementarity_gap(program.constraints),
                               message=note)

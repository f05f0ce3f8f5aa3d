"""Linear-programming substrate: standard-form problems, a solve contract,
and brute-force polytope oracles.

Every min/max the robust machinery performs goes through :func:`solve_lp`,
which wraps scipy's HiGHS backend behind a solver-agnostic contract
(feasibility tolerance 1e-8 absolute, duality gap 1e-6 relative,
deterministic output for identical input). The vertex-enumeration helpers
exist so that the dual reformulations elsewhere in the package can always be
cross-checked against an independent brute-force route.
"""

from __future__ import annotations

import itertools
import json
import os
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

#: FLEXASSESS_SOLVER_TOL overrides the feasibility tolerance process-wide
FEASIBILITY_TOL = float(os.environ.get("FLEXASSESS_SOLVER_TOL", 1e-8))
DUALITY_GAP_TOL = 1e-6

#: enumerate_box_vertices refuses dimensions above this (2^d blowup guard)
MAX_VERTEX_ENUM_DIM = 16


class LpError(Exception):
    """Base class for LP-layer failures."""


class LpNumericalError(LpError):
    """Solver hit its iteration limit or otherwise failed to converge."""


class LpUnboundedError(LpError):
    """The requested optimum is unbounded."""


class EmptyPolytopeError(LpError):
    """Operation requires a nonempty polytope."""


class DimensionTooLargeError(LpError):
    """Vertex enumeration requested above the dimension guard."""


def _as_matrix(a, n_cols: int | None = None):
    """Coerce to a 2-D float array (or pass through a scipy sparse matrix)."""
    if a is None:
        return None
    if sp.issparse(a):
        return a.tocsr().astype(float)
    arr = np.atleast_2d(np.asarray(a, dtype=float))
    if n_cols is not None and arr.size == 0:
        arr = arr.reshape(0, n_cols)
    return arr


def _as_vector(v):
    if v is None:
        return None
    return np.asarray(v, dtype=float).ravel()


@dataclass
class LinearProgram:
    """A minimization LP in standard inequality/equality form.

        min  objective_coeffs @ x
        s.t. ineq_matrix @ x <= ineq_rhs
             eq_matrix   @ x == eq_rhs
             lower_bounds <= x <= upper_bounds

    Matrices may be dense ndarrays or scipy sparse matrices; bounds use
    +/-inf for free coordinates.
    """

    objective_coeffs: np.ndarray
    ineq_matrix: np.ndarray | sp.spmatrix | None = None
    ineq_rhs: np.ndarray | None = None
    eq_matrix: np.ndarray | sp.spmatrix | None = None
    eq_rhs: np.ndarray | None = None
    lower_bounds: np.ndarray | None = None
    upper_bounds: np.ndarray | None = None

    def __post_init__(self):
        self.objective_coeffs = _as_vector(self.objective_coeffs)
        n = self.objective_coeffs.size
        self.ineq_matrix = _as_matrix(self.ineq_matrix, n)
        self.ineq_rhs = _as_vector(self.ineq_rhs)
        self.eq_matrix = _as_matrix(self.eq_matrix, n)
        self.eq_rhs = _as_vector(self.eq_rhs)
        if self.lower_bounds is None:
            self.lower_bounds = np.full(n, -np.inf)
        else:
            self.lower_bounds = _as_vector(self.lower_bounds)
        if self.upper_bounds is None:
            self.upper_bounds = np.full(n, np.inf)
        else:
            self.upper_bounds = _as_vector(self.upper_bounds)

        if self.ineq_matrix is not None:
            if self.ineq_matrix.shape[1] != n:
                raise ValueError(
                    f"ineq_matrix has {self.ineq_matrix.shape[1]} columns, "
                    f"objective has {n}")
            if self.ineq_rhs is None or self.ineq_rhs.size != self.ineq_matrix.shape[0]:
                raise ValueError("ineq_rhs length does not match ineq_matrix rows")
        elif self.ineq_rhs is not None and self.ineq_rhs.size:
            raise ValueError("ineq_rhs given without ineq_matrix")
        if self.eq_matrix is not None:
            if self.eq_matrix.shape[1] != n:
                raise ValueError(
                    f"eq_matrix has {self.eq_matrix.shape[1]} columns, "
                    f"objective has {n}")
            if self.eq_rhs is None or self.eq_rhs.size != self.eq_matrix.shape[0]:
                raise ValueError("eq_rhs length does not match eq_matrix rows")
        elif self.eq_rhs is not None and self.eq_rhs.size:
            raise ValueError("eq_rhs given without eq_matrix")
        if self.lower_bounds.size != n or self.upper_bounds.size != n:
            raise ValueError("bound vectors must match objective length")
        both = np.isfinite(self.lower_bounds) & np.isfinite(self.upper_bounds)
        if np.any(self.lower_bounds[both] > self.upper_bounds[both]):
            raise ValueError("lower_bounds exceed upper_bounds")

    @property
    def num_variables(self) -> int:
        return self.objective_coeffs.size

    def to_json(self) -> str:
        """Debug dump with documented field names for external cross-checks.

        Schema: ``c``, ``A_ub``, ``b_ub``, ``A_eq``, ``b_eq``, ``lb``, ``ub``
        (matrices row-major nested lists, absent blocks null, infinities as
        the strings "inf"/"-inf").
        """
        def mat(a):
            if a is None:
                return None
            if sp.issparse(a):
                a = a.toarray()
            return np.asarray(a).tolist()

        def vec(v):
            if v is None:
                return None
            return [x if np.isfinite(x) else ("inf" if x > 0 else "-inf")
                    for x in np.asarray(v, dtype=float)]

        return json.dumps({
            "c": vec(self.objective_coeffs),
            "A_ub": mat(self.ineq_matrix),
            "b_ub": vec(self.ineq_rhs),
            "A_eq": mat(self.eq_matrix),
            "b_eq": vec(self.eq_rhs),
            "lb": vec(self.lower_bounds),
            "ub": vec(self.upper_bounds),
        })


@dataclass
class LpSolution:
    """Outcome of :func:`solve_lp`.

    ``status`` is one of {"optimal", "infeasible", "unbounded"}; ``primal``
    and ``objective_value`` are meaningful only when optimal. ``dual_ineq``
    holds the nonnegative multipliers of the inequality rows.
    """

    status: str
    primal: np.ndarray | None = None
    objective_value: float = np.nan
    dual_ineq: np.ndarray | None = field(default=None, repr=False)


def solve_lp(lp: LinearProgram) -> LpSolution:
    """Solve a LinearProgram; deterministic for identical input.

    Falls back from the simplex backend to interior-point when the former
    cannot certify a status (the fallback order is fixed, so the overall
    mapping from input to output stays deterministic).

    Raises:
        LpNumericalError: iteration limit exceeded or solver breakdown.
    """
    res = None
    for method in ("highs", "highs-ipm"):
        res = linprog(
            c=lp.objective_coeffs,
            A_ub=lp.ineq_matrix,
            b_ub=lp.ineq_rhs,
            A_eq=lp.eq_matrix,
            b_eq=lp.eq_rhs,
            bounds=np.column_stack([lp.lower_bounds, lp.upper_bounds]),
            method=method,
        )
        if res.status in (0, 2, 3):
            break
    if res.status == 0:
        dual = None
        if lp.ineq_matrix is not None and res.ineqlin is not None:
            # HiGHS reports nonpositive marginals for <= rows; flip sign so
            # dual_ineq matches the Lagrangian convention (>= 0).
            dual = np.maximum(-np.asarray(res.ineqlin.marginals, dtype=float), 0.0)
        return LpSolution(
            status="optimal",
            primal=np.asarray(res.x, dtype=float),
            objective_value=float(res.fun),
            dual_ineq=dual,
        )
    if res.status == 2:
        return LpSolution(status="infeasible")
    if res.status == 3:
        return LpSolution(status="unbounded")
    raise LpNumericalError(f"LP solver failed to converge: {res.message}")


@dataclass
class Polytope:
    """H-representation polytope {x : H x - g <= 0}."""

    H: np.ndarray
    g: np.ndarray

    def __post_init__(self):
        self.H = np.atleast_2d(np.asarray(self.H, dtype=float))
        self.g = np.asarray(self.g, dtype=float).ravel()
        if self.H.shape[0] != self.g.size:
            raise ValueError(
                f"H has {self.H.shape[0]} rows but g has {self.g.size} entries")

    @property
    def dim(self) -> int:
        return self.H.shape[1]

    @property
    def num_rows(self) -> int:
        return self.H.shape[0]

    def contains(self, x, tol: float = FEASIBILITY_TOL) -> bool:
        x = np.asarray(x, dtype=float).ravel()
        return bool(np.all(self.H @ x - self.g <= tol))

    def is_empty(self) -> bool:
        sol = solve_lp(LinearProgram(
            objective_coeffs=np.zeros(self.dim),
            ineq_matrix=self.H, ineq_rhs=self.g))
        return sol.status == "infeasible"

    def is_bounded(self) -> bool:
        """Check boundedness by maximizing +/- each coordinate."""
        if self.is_empty():
            return True
        for i in range(self.dim):
            for sign in (1.0, -1.0):
                c = np.zeros(self.dim)
                c[i] = sign
                sol = solve_lp(LinearProgram(
                    objective_coeffs=-c, ineq_matrix=self.H, ineq_rhs=self.g))
                if sol.status == "unbounded":
                    return False
        return True


def enumerate_box_vertices(lower, upper) -> list[np.ndarray]:
    """All distinct corners of the box [lower, upper].

    Guarded at dimension <= MAX_VERTEX_ENUM_DIM; degenerate coordinates
    (lower == upper) collapse, so fewer than 2^d points can come back.
    """
    lower = np.asarray(lower, dtype=float).ravel()
    upper = np.asarray(upper, dtype=float).ravel()
    if lower.size != upper.size:
        raise ValueError("lower and upper must have the same length")
    d = lower.size
    if d > MAX_VERTEX_ENUM_DIM:
        raise DimensionTooLargeError(
            f"box vertex enumeration limited to dimension {MAX_VERTEX_ENUM_DIM}, got {d}")
    if np.any(lower > upper):
        raise ValueError("lower must be <= upper elementwise")
    vertices = []
    seen = set()
    for mask in itertools.product((0, 1), repeat=d):
        v = np.where(np.asarray(mask, dtype=bool), upper, lower)
        key = v.tobytes()
        if key not in seen:
            seen.add(key)
            vertices.append(v)
    return vertices


def enumerate_polytope_vertices(P: Polytope, tol: float = 1e-9) -> list[np.ndarray]:
    """Brute-force vertex enumeration of a bounded H-polytope.

    Solves every d-subset of active rows; exponential, intended for the
    small verification instances only (dim <= 4 or so).
    """
    d = P.dim
    if d > 8:
        raise DimensionTooLargeError(
            f"polytope vertex enumeration intended for small dims, got {d}")
    if P.is_empty():
        raise EmptyPolytopeError("cannot enumerate vertices of an empty polytope")
    vertices: list[np.ndarray] = []
    for rows in itertools.combinations(range(P.num_rows), d):
        A = P.H[list(rows)]
        b = P.g[list(rows)]
        if abs(np.linalg.det(A)) < 1e-12:
            continue
        x = np.linalg.solve(A, b)
        if P.contains(x, tol=tol):
            if not any(np.allclose(x, v, atol=1e-8) for v in vertices):
                vertices.append(x)
    return vertices


def max_over_polytope(c, P: Polytope) -> tuple[float, np.ndarray]:
    """max{c @ x : x in P} with its argmax.

    Raises:
        EmptyPolytopeError: P has no feasible point.
        LpUnboundedError: the maximum is +inf in direction c.
    """
    c = np.asarray(c, dtype=float).ravel()
    sol = solve_lp(LinearProgram(
        objective_coeffs=-c, ineq_matrix=P.H, ineq_rhs=P.g))
    if sol.status == "infeasible":
        raise EmptyPolytopeError("max over an empty polytope")
    if sol.status == "unbounded":
        raise LpUnboundedError("polytope unbounded in the objective direction")
    return -sol.objective_value, sol.primal

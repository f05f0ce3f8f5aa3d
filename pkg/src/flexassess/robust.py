"""Robust flexibility assessment.

Semi-infinite problem: find the largest flexible-power set such that for
every adversarial adjustment profile in it and every forecast error in the
disturbance box there exists an admissible RES input keeping the room inside
its comfort band. The input is parameterized as an affine decision rule

    u = v + K wt + P dt        (P strictly lower block triangular)

and each robust constraint row is made finite by replacing its inner
maximizations over the two polytopes with their LP duals, which turns
row-wise worst cases into extra nonnegative dual variables tied by equality
constraints. With the set amplitudes (gamma1, gamma2) frozen the result is
one feasibility LP; the amplitude search is a bisection over gamma1, whose
monotonicity follows from set inclusion.

Everything here is verifiable two ways: :func:`worst_case_row_values`
evaluates the primal worst case of each row directly via
:func:`flexassess.lpcore.max_over_polytope`, and
:func:`vertex_policy_feasible` re-derives feasibility from scratch by
enumerating uncertainty vertices. The duality route must agree with both.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .constraints import (DisturbanceUncertainty, FlexibilitySet,
                          OperatingConstraints)
from .lpcore import (LinearProgram, Polytope, enumerate_box_vertices,
                     enumerate_polytope_vertices, max_over_polytope, solve_lp)
from .thermal import LiftedModel


class NominalInfeasibleError(Exception):
    """Even the zero-flexibility problem has no robust feasible policy."""


def strictly_lower_block_mask(N: int, m: int, p: int) -> np.ndarray:
    """Boolean (mN x pN) mask of entries an SL matrix may populate.

    Block (i, j) is allowed iff j < i: the input at step i may use only
    forecast errors realized strictly before it.
    """
    mask = np.zeros((m * N, p * N), dtype=bool)
    for i in range(N):
        if i > 0:
            mask[i * m:(i + 1) * m, :i * p] = True
    return mask


def causal_gain_mask(M: np.ndarray, N: int, m: int) -> np.ndarray:
    """Boolean (mN x h) mask for a causal DR gain K.

    Entry (step block i, profile index j) is allowed iff the profile entry is
    applied strictly before step i. Used only when the ``causal_K``
    sensitivity flag is on; by default K is unrestricted because the DR
    profile is communicated before the window starts.
    """
    placed = np.argmax(np.asarray(M), axis=0)
    h = M.shape[1]
    mask = np.zeros((m * N, h), dtype=bool)
    for i in range(N):
        for j in range(h):
            if placed[j] < i:
                mask[i * m:(i + 1) * m, j] = True
    return mask


@dataclass
class AffinePolicy:
    """Affine decision rule u = v + K wt + P dt.

    P must be strictly lower block triangular with m x p blocks (exact
    zeros); violating entries are rejected at construction. K is
    unrestricted: the DR profile is known before the activation window.
    """

    v: np.ndarray
    K: np.ndarray
    P: np.ndarray
    m: int = 1
    p: int = 2

    def __post_init__(self):
        self.v = np.asarray(self.v, dtype=float).ravel()
        self.K = np.atleast_2d(np.asarray(self.K, dtype=float))
        self.P = np.atleast_2d(np.asarray(self.P, dtype=float))
        mN = self.v.size
        if self.K.shape[0] != mN or self.P.shape[0] != mN:
            raise ValueError("K and P must have one row per input entry")
        if mN % self.m or self.P.shape[1] % self.p:
            raise ValueError("dimensions inconsistent with block sizes m, p")
        N = mN // self.m
        if self.P.shape[1] != self.p * N:
            raise ValueError(f"P must be {mN} x {self.p * N}")
        allowed = strictly_lower_block_mask(N, self.m, self.p)
        if np.any(self.P[~allowed] != 0.0):
            raise ValueError("P violates the strictly-lower-block-triangular "
                             "(nonanticipativity) structure")

    @property
    def N(self) -> int:
        return self.v.size // self.m

    @property
    def h(self) -> int:
        return self.K.shape[1]

    def input_for(self, wt, dt) -> np.ndarray:
        """Full stacked input for a realized profile and error sequence."""
        return (self.v + self.K @ np.asarray(wt, dtype=float).ravel()
                + self.P @ np.asarray(dt, dtype=float).ravel())


@dataclass
class AssessmentSets:
    """Bundle of the three constraint families one assessment works with."""

    flex: FlexibilitySet
    dist: DisturbanceUncertainty
    oper: OperatingConstraints

    def __post_init__(self):
        if self.flex.M is None:
            raise ValueError("flexibility set needs a placement matrix M")

    def with_gamma(self, gamma1: float, gamma2: float) -> "AssessmentSets":
        return AssessmentSets(flex=self.flex.with_gamma(gamma1, gamma2),
                              dist=self.dist, oper=self.oper)


@dataclass
class _RowSystem:
    """All robust constraint rows in one uniform shape.

    Row r of the robust problem reads, for policy (v, K, P),

        V[r] @ v  +  max over the flexible set of (V[r] K + Cw[r]) wt
                  +  max over the error box of (V[r] P + Cd[r]) dt  <=  rhs[r]

    with the state rows first, then input rows, then mixed rows.
    """

    V: np.ndarray
    Cw: np.ndarray
    Cd: np.ndarray
    rhs: np.ndarray
    l_x: int
    l_u: int
    l_uw: int

    @property
    def total(self) -> int:
        return self.V.shape[0]


def build_row_system(lifted: LiftedModel, sets: AssessmentSets, x0,
                     w_bar, d_hat) -> _RowSystem:
    """Collapse the comfort/input/mixed constraints into the uniform row form."""
    oper = sets.oper
    M = sets.flex.M
    N = lifted.horizon_N
    x0 = np.asarray(x0, dtype=float).ravel()
    w_bar = np.asarray(w_bar, dtype=float).ravel()
    d_hat = np.asarray(d_hat, dtype=float).ravel()
    if x0.size != lifted.n:
        raise ValueError(f"x0 must have length {lifted.n}")
    if w_bar.size != N:
        raise ValueError(f"w_bar must have length {N}")
    if d_hat.size != lifted.p * N:
        raise ValueError(f"d_hat must have length {lifted.p * N}")
    if M.shape[0] != N:
        raise ValueError("placement matrix horizon mismatch")
    if sets.dist.horizon_N != N or sets.dist.p != lifted.p:
        raise ValueError("disturbance set dimensions mismatch the lifted model")

    GxFu = oper.G_x @ lifted.F_u
    state_V = GxFu
    state_Cw = oper.G_x @ (lifted.F_w @ M)
    state_Cd = oper.G_x @ lifted.F_d
    state_rhs = oper.g_x - oper.G_x @ (lifted.F_x @ x0 + lifted.F_d @ d_hat
                                       + lifted.F_w @ w_bar)

    input_V = oper.G_u
    input_Cw = np.zeros((oper.l_u, sets.flex.h))
    input_Cd = np.zeros((oper.l_u, lifted.p * N))
    input_rhs = oper.g_u.copy()

    mixed_V = oper.L_u
    mixed_Cw = oper.L_w @ M
    mixed_Cd = np.zeros((oper.l_uw, lifted.p * N))
    mixed_rhs = oper.g_uw - oper.L_w @ w_bar

    return _RowSystem(
        V=np.vstack([state_V, input_V, mixed_V]),
        Cw=np.vstack([state_Cw, input_Cw, mixed_Cw]),
        Cd=np.vstack([state_Cd, input_Cd, mixed_Cd]),
        rhs=np.concatenate([state_rhs, input_rhs, mixed_rhs]),
        l_x=oper.l_x, l_u=oper.l_u, l_uw=oper.l_uw)


def worst_case_row_values(policy: AffinePolicy, lifted: LiftedModel,
                          sets: AssessmentSets, x0, w_bar, d_hat) -> np.ndarray:
    """Primal worst-case residual of every robust row at a fixed policy.

    Entry r is nominal residual plus the maxima of the row's profile and
    error terms over their polytopes (each solved as an LP). The row is
    robustly satisfied iff the value is <= 0. Ordering: state rows, input
    rows, mixed rows.
    """
    rows = build_row_system(lifted, sets, x0, w_bar, d_hat)
    W = sets.flex.as_polytope()
    D = sets.dist.as_polytope()
    values = np.empty(rows.total)
    for r in range(rows.total):
        c_w = rows.V[r] @ policy.K + rows.Cw[r]
        c_d = rows.V[r] @ policy.P + rows.Cd[r]
        w_max, _ = max_over_polytope(c_w, W)
        d_max, _ = max_over_polytope(c_d, D)
        values[r] = rows.V[r] @ policy.v - rows.rhs[r] + w_max + d_max
    return values


def dualize_row(c_w, c_d, W: Polytope, D: Polytope,
                ) -> tuple[LinearProgram, LinearProgram]:
    """LP duals of one row's two inner maximizations.

    Returns the pair (min g_w @ y : H_w^T y = c_w, y >= 0) and
    (min g_d @ y : H_d^T y = c_d, y >= 0); by strong duality their optima
    equal the corresponding primal maxima over W and D.
    """
    c_w = np.asarray(c_w, dtype=float).ravel()
    c_d = np.asarray(c_d, dtype=float).ravel()
    lp_w = LinearProgram(
        objective_coeffs=W.g,
        eq_matrix=W.H.T, eq_rhs=c_w,
        lower_bounds=np.zeros(W.num_rows))
    lp_d = LinearProgram(
        objective_coeffs=D.g,
        eq_matrix=D.H.T, eq_rhs=c_d,
        lower_bounds=np.zeros(D.num_rows))
    return lp_w, lp_d


@dataclass
class FixedDisturbancePolicy:
    """Offline-fixed error-rejection part of the decision rule.

    Holds one SL matrix P, the per-row disturbance duals, and the resulting
    constant worst-case margins; assessments run in fixed mode drop the
    (P, disturbance-dual) variables and their equality rows entirely.
    """

    P: np.ndarray
    duals: np.ndarray          # one l_d-row of multipliers per robust row
    margins: np.ndarray        # g_d @ duals per robust row

    @property
    def dual_count(self) -> int:
        return self.duals.size


@dataclass
class RobustProgram:
    """An assembled dual-reformulation feasibility LP plus its bookkeeping.

    In full mode the variables are the policy (v, K, P; P's forbidden
    entries pinned to zero through equal bounds) followed by one pair of
    dual blocks per robust row: a flexible-set multiplier of size 4h-2 and
    an error-box multiplier of size l_d. The dual variable count therefore
    exceeds the policy-only problem by exactly
    (4h-2)*(l_x+l_u+l_uw) + l_d*(l_x+l_u+l_uw).

    Fixed mode drops P, every error-box multiplier, and the l_d-side
    equality rows, folding precomputed worst-case margins into the
    right-hand sides.
    """

    lp: LinearProgram
    gamma1: float
    gamma2: float
    m: int
    p: int
    N: int
    h: int
    l_x: int
    l_u: int
    l_uw: int
    fixed: FixedDisturbancePolicy | None = None

    @property
    def l_total(self) -> int:
        return self.l_x + self.l_u + self.l_uw

    @property
    def n_w_rows(self) -> int:
        return 4 * self.h - 2

    @property
    def l_d(self) -> int:
        return 2 * self.p * self.N

    @property
    def policy_variable_count(self) -> int:
        mN = self.m * self.N
        count = mN + mN * self.h
        if self.fixed is None:
            count += mN * self.p * self.N
        return count

    @property
    def dual_variable_count(self) -> int:
        per_row = self.n_w_rows
        if self.fixed is None:
            per_row += self.l_d
        return per_row * self.l_total

    @property
    def num_variables(self) -> int:
        return self.lp.num_variables

    @property
    def num_eq_rows(self) -> int:
        return 0 if self.lp.eq_matrix is None else self.lp.eq_matrix.shape[0]

    @property
    def num_ineq_rows(self) -> int:
        return 0 if self.lp.ineq_matrix is None else self.lp.ineq_matrix.shape[0]

    def extract_policy(self, primal: np.ndarray) -> AffinePolicy:
        mN = self.m * self.N
        v = primal[:mN]
        K = primal[mN:mN + mN * self.h].reshape(mN, self.h)
        if self.fixed is None:
            pN = self.p * self.N
            P = primal[mN + mN * self.h:mN + mN * self.h + mN * pN].reshape(mN, pN)
            P = np.where(strictly_lower_block_mask(self.N, self.m, self.p), P, 0.0)
        else:
            P = self.fixed.P
        return AffinePolicy(v=v, K=K, P=P, m=self.m, p=self.p)


class ReformulationBuilder:
    """Caches everything gamma-independent so bisection probes are cheap.

    The constraint pattern (sparsity, equality matrix, bounds, right-hand
    sides) never changes across gamma probes; only the coefficient values of
    the flexible-set multipliers in the inequality rows carry gamma. Those
    slots are rebuilt per probe from the fixed 0/1 pattern of g_w.
    """

    def __init__(self, lifted: LiftedModel, sets: AssessmentSets, x0, w_bar,
                 d_hat, fixed: FixedDisturbancePolicy | None = None,
                 causal_K: bool = False):
        self.lifted = lifted
        self.sets = sets
        self.fixed = fixed
        self.m, self.p, self.N = lifted.m, lifted.p, lifted.horizon_N
        self.h = sets.flex.h
        self.rows = build_row_system(lifted, sets, x0, w_bar, d_hat)

        flex = sets.flex
        dist = sets.dist
        mN = self.m * self.N
        pN = self.p * self.N
        n_w = flex.num_rows
        l_d = dist.num_rows
        l_tot = self.rows.total

        self.off_v = 0
        self.off_K = mN
        if fixed is None:
            self.off_P = self.off_K + mN * self.h
            self.off_dual = self.off_P + mN * pN
            self.per_row_duals = n_w + l_d
        else:
            self.off_P = None
            self.off_dual = self.off_K + mN * self.h
            self.per_row_duals = n_w
        self.num_vars = self.off_dual + self.per_row_duals * l_tot
        self.n_w, self.l_d, self.mN, self.pN = n_w, l_d, mN, pN

        # ---- bounds ----------------------------------------------------
        lb = np.full(self.num_vars, -np.inf)
        ub = np.full(self.num_vars, np.inf)
        lb[self.off_dual:] = 0.0
        if causal_K:
            kmask = causal_gain_mask(flex.M, self.N, self.m).ravel()
            pin = ~kmask
            lb[self.off_K:self.off_K + mN * self.h][pin] = 0.0
            ub[self.off_K:self.off_K + mN * self.h][pin] = 0.0
        if fixed is None:
            pmask = strictly_lower_block_mask(self.N, self.m, self.p).ravel()
            pin = ~pmask
            lb[self.off_P:self.off_P + mN * pN][pin] = 0.0
            ub[self.off_P:self.off_P + mN * pN][pin] = 0.0
        self.lb, self.ub = lb, ub

        # ---- inequality rows (one per robust row) ----------------------
        ineq_r, ineq_c, ineq_d = [], [], []
        gw_r, gw_c = [], []
        g_d = dist.g_d
        for r in range(l_tot):
            vrow = self.rows.V[r]
            nz = np.nonzero(vrow)[0]
            ineq_r.append(np.full(nz.size, r))
            ineq_c.append(self.off_v + nz)
            ineq_d.append(vrow[nz])
            base = self.off_dual + r * self.per_row_duals
            # flexible-set multiplier coefficients: values are g_w (gamma)
            gw_r.append(np.full(n_w, r))
            gw_c.append(base + np.arange(n_w))
            if fixed is None:
                nzd = np.nonzero(g_d)[0]
                ineq_r.append(np.full(nzd.size, r))
                ineq_c.append(base + n_w + nzd)
                ineq_d.append(g_d[nzd])
        self._ineq_static = (np.concatenate(ineq_r), np.concatenate(ineq_c),
                             np.concatenate(ineq_d))
        self._gw_rows = np.concatenate(gw_r)
        self._gw_cols = np.concatenate(gw_c)
        s1, s2 = flex.gamma_pattern()
        self._gw_s1 = np.tile(s1, l_tot)
        self._gw_s2 = np.tile(s2, l_tot)
        rhs = self.rows.rhs.copy()
        if fixed is not None:
            rhs = rhs - fixed.margins
        self.ineq_rhs = rhs
        self.num_ineq = l_tot

        # ---- equality rows ---------------------------------------------
        Hw_nzr, Hw_nzc = np.nonzero(flex.H_w)
        Hw_val = flex.H_w[Hw_nzr, Hw_nzc]
        eq_r, eq_c, eq_d = [], [], []
        eq_rhs = []
        per_row_eqs = self.h + (0 if fixed is not None else pN)
        for r in range(l_tot):
            vrow = self.rows.V[r]
            nz = np.nonzero(vrow)[0]
            base_eq = r * per_row_eqs
            base_var = self.off_dual + r * self.per_row_duals
            # profile side: H_w^T dual - V[r] K = Cw[r]
            eq_r.append(base_eq + Hw_nzc)
            eq_c.append(base_var + Hw_nzr)
            eq_d.append(Hw_val)
            if nz.size:
                eq_r.append(base_eq + np.repeat(np.arange(self.h), nz.size))
                eq_c.append(self.off_K + np.tile(nz * self.h, self.h)
                            + np.repeat(np.arange(self.h), nz.size))
                eq_d.append(np.tile(-vrow[nz], self.h))
            eq_rhs.append(self.rows.Cw[r])
            if fixed is None:
                # error side: H_d^T dual - V[r] P = Cd[r]; H_d is [I; -I]
                qs = np.arange(pN)
                eq_r.append(base_eq + self.h + qs)
                eq_c.append(base_var + n_w + qs)
                eq_d.append(np.ones(pN))
                eq_r.append(base_eq + self.h + qs)
                eq_c.append(base_var + n_w + pN + qs)
                eq_d.append(-np.ones(pN))
                if nz.size:
                    eq_r.append(base_eq + self.h
                                + np.repeat(qs, nz.size))
                    eq_c.append(self.off_P + np.tile(nz * pN, pN)
                                + np.repeat(qs, nz.size))
                    eq_d.append(np.tile(-vrow[nz], pN))
                eq_rhs.append(self.rows.Cd[r])
        self.num_eq = per_row_eqs * l_tot
        self.eq_matrix = sp.coo_matrix(
            (np.concatenate(eq_d),
             (np.concatenate(eq_r), np.concatenate(eq_c))),
            shape=(self.num_eq, self.num_vars)).tocsr()
        self.eq_rhs = np.concatenate(eq_rhs)

    def build(self, gamma1: float, gamma2: float) -> RobustProgram:
        """Materialize the feasibility LP at frozen amplitudes."""
        if gamma1 < 0 or gamma2 < 0:
            raise ValueError("gamma amplitudes must be nonnegative")
        sr, sc, sd = self._ineq_static
        gw_data = gamma1 * self._gw_s1 + gamma2 * self._gw_s2
        ineq = sp.coo_matrix(
            (np.concatenate([sd, gw_data]),
             (np.concatenate([sr, self._gw_rows]),
              np.concatenate([sc, self._gw_cols]))),
            shape=(self.num_ineq, self.num_vars)).tocsr()
        lp = LinearProgram(
            objective_coeffs=np.zeros(self.num_vars),
            ineq_matrix=ineq, ineq_rhs=self.ineq_rhs,
            eq_matrix=self.eq_matrix, eq_rhs=self.eq_rhs,
            lower_bounds=self.lb, upper_bounds=self.ub)
        return RobustProgram(
            lp=lp, gamma1=gamma1, gamma2=gamma2, m=self.m, p=self.p,
            N=self.N, h=self.h, l_x=self.rows.l_x, l_u=self.rows.l_u,
            l_uw=self.rows.l_uw, fixed=self.fixed)

    def solve_max_amplitude(self, beta: float, gamma1_max: float,
                            ) -> tuple[float, AffinePolicy] | None:
        """Exact amplitude maximum for the tied ramp policy, in one LP.

        With gamma2 = beta * gamma1 the right-hand side of the flexible set
        scales linearly: g_w = gamma1 * (s1 + beta*s2). Substituting scaled
        multipliers z = gamma1 * y and a scaled gain Kt = gamma1 * K makes
        every constraint linear in (gamma1, v, Kt, P, z, ...), so maximizing
        gamma1 is a single LP of the same size as one feasibility probe.
        The unscaled policy is recovered as K = Kt / gamma1.

        Returns None when even gamma1 = 0 is infeasible.
        """
        if beta < 0:
            raise ValueError("ramp ratio must be nonnegative")
        gcol = self.num_vars
        sr, sc, sd = self._ineq_static
        zw_data = self._gw_s1 + beta * self._gw_s2
        ineq = sp.coo_matrix(
            (np.concatenate([sd, zw_data]),
             (np.concatenate([sr, self._gw_rows]),
              np.concatenate([sc, self._gw_cols]))),
            shape=(self.num_ineq, self.num_vars + 1)).tocsr()

        # profile-side equality rows move their constant term Cw onto the
        # gamma1 column; the error-side rows keep their original rhs
        per_row_eqs = self.h + (0 if self.fixed is not None else self.pN)
        g_rows, g_vals, eq_rhs = [], [], []
        for r in range(self.rows.total):
            base_eq = r * per_row_eqs
            g_rows.append(base_eq + np.arange(self.h))
            g_vals.append(-self.rows.Cw[r])
            eq_rhs.append(np.zeros(self.h))
            if self.fixed is None:
                eq_rhs.append(self.rows.Cd[r])
        base = self.eq_matrix.tocoo()
        eq = sp.coo_matrix(
            (np.concatenate([base.data, np.concatenate(g_vals)]),
             (np.concatenate([base.row, np.concatenate(g_rows)]),
              np.concatenate([base.col,
                              np.full(self.h * self.rows.total, gcol)]))),
            shape=(self.num_eq, self.num_vars + 1)).tocsr()

        c = np.zeros(self.num_vars + 1)
        c[gcol] = -1.0
        lb = np.concatenate([self.lb, [0.0]])
        ub = np.concatenate([self.ub, [float(gamma1_max)]])
        sol = solve_lp(LinearProgram(
            objective_coeffs=c, ineq_matrix=ineq, ineq_rhs=self.ineq_rhs,
            eq_matrix=eq, eq_rhs=np.concatenate(eq_rhs),
            lower_bounds=lb, upper_bounds=ub))
        if sol.status != "optimal":
            return None
        gamma1 = float(sol.primal[gcol])
        mN = self.mN
        v = sol.primal[:mN]
        K_scaled = sol.primal[self.off_K:self.off_K + mN * self.h].reshape(
            mN, self.h)
        K = K_scaled / gamma1 if gamma1 > 1e-9 else np.zeros_like(K_scaled)
        if self.fixed is None:
            P = sol.primal[self.off_P:self.off_P + mN * self.pN].reshape(
                mN, self.pN)
            P = np.where(strictly_lower_block_mask(self.N, self.m, self.p),
                         P, 0.0)
        else:
            P = self.fixed.P
        return gamma1, AffinePolicy(v=v, K=K, P=P, m=self.m, p=self.p)


def assemble_reformulation(x0, w_bar, d_hat, lifted: LiftedModel,
                           sets: AssessmentSets, gamma1: float, gamma2: float,
                           fixed: FixedDisturbancePolicy | None = None,
                           causal_K: bool = False) -> RobustProgram:
    """One-shot dual reformulation at frozen (gamma1, gamma2).

    Feasibility of the returned LP is equivalent to robust feasibility of
    the semi-infinite problem at those amplitudes.
    """
    builder = ReformulationBuilder(lifted, sets, x0, w_bar, d_hat,
                                   fixed=fixed, causal_K=causal_K)
    return builder.build(gamma1, gamma2)


def export_bilinear_program(x0, w_bar, d_hat, lifted: LiftedModel,
                            sets: AssessmentSets, gamma1: float,
                            gamma2: float) -> str:
    """JSON dump of the gamma-frozen LP plus a bilinear-terms annotation.

    The monolithic problem treats (gamma1, gamma2) as decision variables, in
    which case each flexible-set multiplier coefficient listed here becomes
    a product of the named amplitude and that multiplier. External nonconvex
    solvers can reconstruct the bilinear program from the frozen LP and this
    block.
    """
    builder = ReformulationBuilder(lifted, sets, x0, w_bar, d_hat)
    prog = builder.build(gamma1, gamma2)
    payload = json.loads(prog.lp.to_json())
    terms = []
    for row, col, s1, s2 in zip(builder._gw_rows, builder._gw_cols,
                                builder._gw_s1, builder._gw_s2):
        if s1:
            terms.append({"row": int(row), "col": int(col), "factor": "gamma1"})
        elif s2:
            terms.append({"row": int(row), "col": int(col), "factor": "gamma2"})
    payload["bilinear_terms"] = terms
    payload["gamma1"] = gamma1
    payload["gamma2"] = gamma2
    return json.dumps(payload)


# ---------------------------------------------------------------------------
# Offline disturbance-policy precomputation (fixed-P mode)
# ---------------------------------------------------------------------------

def precompute_disturbance_policy(lifted: LiftedModel, sets: AssessmentSets,
                                  x0_envelope=None) -> FixedDisturbancePolicy:
    """Choose one SL error-rejection matrix P offline and freeze its duals.

    P minimizes the summed worst-case disturbance margins across all robust
    rows, which depends only on the error box, not on the initial state or
    the nominal schedule (``x0_envelope`` is accepted for interface
    stability and currently unused). Online assessments then treat the
    margins as constants.
    """
    oper = sets.oper
    dist = sets.dist
    m, p, N = lifted.m, lifted.p, lifted.horizon_N
    mN, pN = m * N, p * N
    l_d = dist.num_rows
    GxFu = oper.G_x @ lifted.F_u
    V = np.vstack([GxFu, oper.G_u, oper.L_u])
    Cd = np.vstack([oper.G_x @ lifted.F_d,
                    np.zeros((oper.l_u, pN)),
                    np.zeros((oper.l_uw, pN))])
    l_tot = V.shape[0]
    g_d = dist.g_d

    if not np.any(g_d):
        # nothing to reject: P = 0 with the cheapest feasible multipliers
        P = np.zeros((mN, pN))
        duals = np.hstack([np.maximum(Cd, 0.0), np.maximum(-Cd, 0.0)])
        return FixedDisturbancePolicy(P=P, duals=duals,
                                      margins=np.zeros(l_tot))

    # variables: P entries (SL pinned via bounds), then l_d duals per row
    off_dual = mN * pN
    num_vars = off_dual + l_d * l_tot
    lb = np.full(num_vars, -np.inf)
    ub = np.full(num_vars, np.inf)
    pmask = strictly_lower_block_mask(N, m, p).ravel()
    lb[:off_dual][~pmask] = 0.0
    ub[:off_dual][~pmask] = 0.0
    lb[off_dual:] = 0.0

    c = np.zeros(num_vars)
    rows_idx, cols_idx, data = [], [], []
    rhs = []
    for r in range(l_tot):
        base_eq = r * pN
        base_var = off_dual + r * l_d
        c[base_var:base_var + l_d] = g_d
        qs = np.arange(pN)
        rows_idx.append(base_eq + qs)
        cols_idx.append(base_var + qs)
        data.append(np.ones(pN))
        rows_idx.append(base_eq + qs)
        cols_idx.append(base_var + pN + qs)
        data.append(-np.ones(pN))
        nz = np.nonzero(V[r])[0]
        if nz.size:
            rows_idx.append(base_eq + np.repeat(qs, nz.size))
            cols_idx.append(np.tile(nz * pN, pN) + np.repeat(qs, nz.size))
            data.append(np.tile(-V[r][nz], pN))
        rhs.append(Cd[r])
    eq = sp.coo_matrix(
        (np.concatenate(data), (np.concatenate(rows_idx),
                                np.concatenate(cols_idx))),
        shape=(pN * l_tot, num_vars)).tocsr()
    sol = solve_lp(LinearProgram(
        objective_coeffs=c, eq_matrix=eq, eq_rhs=np.concatenate(rhs),
        lower_bounds=lb, upper_bounds=ub))
    if sol.status != "optimal":
        raise NominalInfeasibleError(
            "no SL matrix robustifies the disturbance-side rows")
    P = sol.primal[:off_dual].reshape(mN, pN)
    P = np.where(strictly_lower_block_mask(N, m, p), P, 0.0)
    duals = sol.primal[off_dual:].reshape(l_tot, l_d)
    return FixedDisturbancePolicy(P=P, duals=duals, margins=duals @ g_d)


# ---------------------------------------------------------------------------
# Amplitude search
# ---------------------------------------------------------------------------

@dataclass
class FixedGamma2:
    """Always advertise the same ramp limit."""

    value: float

    def gamma2_for(self, gamma1: float) -> float:
        return self.value


@dataclass
class RatioGamma2:
    """Tie the ramp limit to the probed amplitude."""

    ratio: float = 0.25

    def gamma2_for(self, gamma1: float) -> float:
        return self.ratio * gamma1


@dataclass
class FlexibilityAssessment:
    """Certified flexibility advertisement for one activation window."""

    gamma1_star: float
    gamma2_star: float
    policy: AffinePolicy | None
    M: np.ndarray
    h: int
    feasible: bool
    diagnostics: dict = field(default_factory=dict)

    def window_start_step(self) -> int:
        return int(np.argmax(self.M[:, 0]))

    def to_json(self) -> str:
        return json.dumps({
            "gamma1_star_w": self.gamma1_star,
            "gamma2_star_w_per_step": self.gamma2_star,
            "window_start_step": self.window_start_step(),
            "h": self.h,
            "feasible": self.feasible,
            "lp_solves": self.diagnostics.get("lp_solves", 0),
        })


def assess_flexibility(x0, w_bar, d_hat, lifted: LiftedModel,
                       sets: AssessmentSets, alpha: float = 0.0,
                       gamma2_policy=None, *,
                       fixed: FixedDisturbancePolicy | None = None,
                       causal_K: bool = False,
                       gamma1_max: float | None = None,
                       tol_w: float = 1.0,
                       refine_gamma2: bool = False,
                       method: str = "auto") -> FlexibilityAssessment:
    """Search for the largest robustly feasible amplitude.

    Growing gamma1 (with gamma2 following ``gamma2_policy``) only enlarges
    the adversary's set, so robust feasibility is monotone in gamma1. Two
    search methods exploit that:

    - ``bisection``: feasibility probes to ``tol_w`` (default 1 W), needing
      at most ceil(log2(gamma1_max/tol_w)) probes after the two bracket
      checks. Works for any gamma2 policy; this is the reference route.
    - ``scaled``: for ratio-tied gamma2 only, one LP maximizes gamma1
      exactly via the scaled-multiplier substitution (see
      :meth:`ReformulationBuilder.solve_max_amplitude`).

    ``auto`` picks ``scaled`` for ratio policies and ``bisection``
    otherwise; both must and do agree to within ``tol_w`` (tested). The
    initial bracket is the total power cap: no reduction can exceed it.

    When the zero-flexibility problem is already infeasible the result has
    ``feasible=False`` and zero amplitude. A coordinate-ascent round on
    gamma2 at the certified gamma1 runs when ``refine_gamma2`` is set or the
    objective weight ``alpha`` is positive.
    """
    if gamma2_policy is None:
        gamma2_policy = RatioGamma2(0.25)
    if gamma1_max is None:
        gamma1_max = sets.oper.total_power_cap
    if method not in ("auto", "bisection", "scaled"):
        raise ValueError(f"unknown method {method!r}")
    use_scaled = (isinstance(gamma2_policy, RatioGamma2)
                  if method == "auto" else method == "scaled")
    if use_scaled and not isinstance(gamma2_policy, RatioGamma2):
        raise ValueError("the scaled method needs a ratio-tied gamma2 policy")
    builder = ReformulationBuilder(lifted, sets, x0, w_bar, d_hat,
                                   fixed=fixed, causal_K=causal_K)
    lp_solves = 0

    def probe(g1: float, g2: float):
        nonlocal lp_solves
        lp_solves += 1
        prog = builder.build(g1, g2)
        sol = solve_lp(prog.lp)
        if sol.status == "optimal":
            return prog.extract_policy(sol.primal)
        return None

    iterations = 0
    if use_scaled:
        lp_solves += 1
        outcome = builder.solve_max_amplitude(gamma2_policy.ratio,
                                              float(gamma1_max))
        if outcome is None:
            return FlexibilityAssessment(
                gamma1_star=0.0, gamma2_star=0.0, policy=None, M=sets.flex.M,
                h=sets.flex.h, feasible=False,
                diagnostics={"iterations": 0, "lp_solves": lp_solves})
        best_g1, best_policy = outcome
        best_g2 = gamma2_policy.gamma2_for(best_g1)
    else:
        pol0 = probe(0.0, gamma2_policy.gamma2_for(0.0))
        if pol0 is None:
            return FlexibilityAssessment(
                gamma1_star=0.0, gamma2_star=0.0, policy=None, M=sets.flex.M,
                h=sets.flex.h, feasible=False,
                diagnostics={"iterations": 0, "lp_solves": lp_solves})

        best_g1, best_policy = 0.0, pol0
        best_g2 = gamma2_policy.gamma2_for(0.0)
        hi = float(gamma1_max)
        pol_hi = probe(hi, gamma2_policy.gamma2_for(hi))
        if pol_hi is not None:
            best_g1, best_policy = hi, pol_hi
            best_g2 = gamma2_policy.gamma2_for(hi)
        else:
            lo = 0.0
            while hi - lo > tol_w:
                iterations += 1
                mid = 0.5 * (lo + hi)
                pol = probe(mid, gamma2_policy.gamma2_for(mid))
                if pol is not None:
                    lo, best_g1, best_policy = mid, mid, pol
                    best_g2 = gamma2_policy.gamma2_for(mid)
                else:
                    hi = mid

    if (refine_gamma2 or alpha > 0.0) and best_g1 > 0.0:
        # one coordinate-ascent round: push gamma2 up at the certified gamma1
        lo2, hi2 = best_g2, best_g1
        if hi2 > lo2 + tol_w:
            pol = probe(best_g1, hi2)
            if pol is not None:
                best_g2, best_policy = hi2, pol
            else:
                while hi2 - lo2 > tol_w:
                    iterations += 1
                    mid = 0.5 * (lo2 + hi2)
                    pol = probe(best_g1, mid)
                    if pol is not None:
                        lo2, best_g2, best_policy = mid, mid, pol
                    else:
                        hi2 = mid

    return FlexibilityAssessment(
        gamma1_star=best_g1, gamma2_star=best_g2, policy=best_policy,
        M=sets.flex.M, h=sets.flex.h, feasible=True,
        diagnostics={"iterations": iterations, "lp_solves": lp_solves})


def verify_robust_feasibility(assessment: FlexibilityAssessment,
                              lifted: LiftedModel, sets: AssessmentSets,
                              x0, w_bar, d_hat,
                              tol: float = 1e-6) -> tuple[bool, float]:
    """Primal soundness check of a certified assessment.

    Re-evaluates every robust row's worst case at the certified policy and
    amplitudes; returns (all rows <= tol, maximum residual).
    """
    if not assessment.feasible or assessment.policy is None:
        raise ValueError("assessment carries no certified policy")
    gsets = sets.with_gamma(assessment.gamma1_star, assessment.gamma2_star)
    values = worst_case_row_values(assessment.policy, lifted, gsets,
                                   x0, w_bar, d_hat)
    worst = float(values.max())
    return worst <= tol, worst


# ---------------------------------------------------------------------------
# Brute-force vertex oracle (exact on small instances)
# ---------------------------------------------------------------------------

def vertex_policy_feasible(x0, w_bar, d_hat, lifted: LiftedModel,
                           sets: AssessmentSets, gamma1: float,
                           gamma2: float, causal_K: bool = False) -> bool:
    """Policy existence decided by enumerating uncertainty vertices.

    Every robust row is affine in (wt, dt) for a fixed policy, so imposing
    it at all vertex pairs of the two polytopes is equivalent to imposing it
    everywhere. Exponential in the window length and error dimension;
    intended for the small verification instances.
    """
    gsets = sets.with_gamma(gamma1, gamma2)
    rows = build_row_system(lifted, gsets, x0, w_bar, d_hat)
    W_vertices = enumerate_polytope_vertices(gsets.flex.as_polytope())
    D_vertices = enumerate_box_vertices(-gsets.dist.stacked_bounds(),
                                        gsets.dist.stacked_bounds())
    m, p, N, h = lifted.m, lifted.p, lifted.horizon_N, gsets.flex.h
    mN, pN = m * N, p * N

    off_K = mN
    off_P = off_K + mN * h
    num_vars = off_P + mN * pN
    lb = np.full(num_vars, -np.inf)
    ub = np.full(num_vars, np.inf)
    pmask = strictly_lower_block_mask(N, m, p).ravel()
    lb[off_P:][~pmask] = 0.0
    ub[off_P:][~pmask] = 0.0
    if causal_K:
        kmask = causal_gain_mask(gsets.flex.M, N, m).ravel()
        lb[off_K:off_P][~kmask] = 0.0
        ub[off_K:off_P][~kmask] = 0.0

    A_rows, b_rows = [], []
    for wt in W_vertices:
        for dt in D_vertices:
            # rows.V v + rows.V K wt + rows.V P dt <= rhs - Cw wt - Cd dt
            blk = np.zeros((rows.total, num_vars))
            blk[:, :mN] = rows.V
            blk[:, off_K:off_P] = np.kron(rows.V, wt.reshape(1, h))
            blk[:, off_P:] = np.kron(rows.V, dt.reshape(1, pN))
            A_rows.append(blk)
            b_rows.append(rows.rhs - rows.Cw @ wt - rows.Cd @ dt)
    sol = solve_lp(LinearProgram(
        objective_coeffs=np.zeros(num_vars),
        ineq_matrix=np.vstack(A_rows), ineq_rhs=np.concatenate(b_rows),
        lower_bounds=lb, upper_bounds=ub))
    return sol.status == "optimal"


def vertex_assess_gamma1(x0, w_bar, d_hat, lifted: LiftedModel,
                         sets: AssessmentSets, gamma2_policy=None,
                         gamma1_max: float | None = None,
                         tol_w: float = 1.0) -> float:
    """Brute-force amplitude optimum via bisection over the vertex oracle.

    Feasibility is monotone in gamma1 (set inclusion), so this matches a
    full grid search to within ``tol_w``.
    """
    if gamma2_policy is None:
        gamma2_policy = RatioGamma2(0.25)
    if gamma1_max is None:
        gamma1_max = sets.oper.total_power_cap

    def feas(g1):
        return vertex_policy_feasible(x0, w_bar, d_hat, lifted, sets,
                                      g1, gamma2_policy.gamma2_for(g1))

    if not feas(0.0):
        return 0.0
    if feas(gamma1_max):
        return float(gamma1_max)
    lo, hi = 0.0, float(gamma1_max)
    while hi - lo > tol_w:
        mid = 0.5 * (lo + hi)
        if feas(mid):
            lo = mid
        else:
            hi = mid
    return lo


def bisection_probe_bound(gamma1_max: float, tol_w: float) -> int:
    """Worst-case number of bisection probes after the two bracket checks."""
    if gamma1_max <= tol_w:
        return 0
    return math.ceil(math.log2(gamma1_max / tol_w))

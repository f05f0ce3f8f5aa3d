"""Randomized self-verification of the robust machinery.

Three suites, each pitting the dual reformulation against an independent
route on freshly sampled small instances:

- duality: per-row dual optima must equal the primal polytope maxima;
- vertex: dual-route feasibility and the assessed amplitude must agree with
  brute-force vertex enumeration;
- monotonicity: growing the error box can only shrink the amplitude, and
  widening the comfort band can only grow it.

``corrupt_dual_sign`` injects a sign error into the dual assembly so the
suite can demonstrate it actually detects broken duals.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .constraints import (DisturbanceUncertainty, build_flexibility_polytope,
                          build_operating_constraints, build_placement)
from .lpcore import max_over_polytope, solve_lp
from .robust import (AffinePolicy, AssessmentSets, FixedGamma2, RatioGamma2,
                     assemble_reformulation, assess_flexibility,
                     build_row_system, dualize_row, strictly_lower_block_mask,
                     vertex_assess_gamma1, vertex_policy_feasible)
from .thermal import ThermalModel, lift_dynamics


@dataclass
class SmallInstance:
    model: ThermalModel
    lifted: object
    sets: AssessmentSets
    x0: np.ndarray
    w_bar: np.ndarray
    d_hat: np.ndarray


def random_small_instance(rng: np.random.Generator, n_max: int = 2,
                          N_max: int = 6, h_max: int = 3,
                          p_max: int = 2) -> SmallInstance:
    """Sample a random stable instance sized for the brute-force oracles.

    Power and uncertainty magnitudes are scaled against the sampled model's
    temperature sensitivities so that a healthy share of instances is
    nominally feasible with genuine slack (the interesting regime), while
    infeasible and zero-slack cases still occur.
    """
    n = int(rng.integers(1, n_max + 1))
    N = int(rng.integers(2, N_max + 1))
    h = int(rng.integers(1, min(h_max, N) + 1))
    p = int(rng.integers(1, p_max + 1))

    A = rng.uniform(-0.3, 0.9, (n, n))
    rho = max(abs(np.linalg.eigvals(A)))
    A *= rng.uniform(0.5, 0.92) / max(rho, 1e-9)
    B = rng.uniform(0.0005, 0.004, (n, 1))        # degC per W per step
    R = B * rng.uniform(0.8, 1.2, (n, 1))
    D = rng.uniform(-0.01, 0.04, (n, p))
    model = ThermalModel(A=A, B=B, R=R, D=D, sample_period=300.0,
                         room_output=(0,))
    lifted = lift_dynamics(model, N)

    lo = rng.uniform(17.0, 20.0)
    hi = lo + rng.uniform(2.5, 5.0)
    x0 = rng.uniform(lo + 0.8, hi - 0.8, n)
    d_hat = rng.uniform(-2.0, 8.0, (N, p)).ravel()

    # per-step room-temperature sensitivities used for scaling
    sens_w = float(R[0, 0])
    sens_d = float(np.abs(D[0]).max())

    # steer the nominal grid power toward holding the initial temperature,
    # then rescale the power unit so the hold power lands at a sane wattage
    try:
        lhs = np.zeros((n + 1, n + 1))
        lhs[:n, :n] = np.eye(n) - A
        lhs[:n, n] = -R[:, 0]
        lhs[n, 0] = 1.0
        rhs = np.zeros(n + 1)
        rhs[:n] = D @ d_hat[:p]
        rhs[n] = x0[0]
        w_ss = float(np.linalg.solve(lhs, rhs)[n])
    except np.linalg.LinAlgError:
        w_ss = 200.0
    target_w = float(rng.uniform(200.0, 1200.0))
    if w_ss > 1e-6:
        scale = w_ss / target_w
        B = model.B * scale
        R = model.R * scale
        model = ThermalModel(A=A, B=B, R=R, D=D, sample_period=300.0,
                             room_output=(0,))
        lifted = lift_dynamics(model, N)
        sens_w = float(R[0, 0])
        w_ss = target_w
    w_noise = rng.uniform(0.1, 0.5) / (sens_w * N)
    w_bar = np.clip(w_ss + rng.uniform(-w_noise, w_noise, N),
                    0.0, None)
    cap = float(np.max(w_bar) * rng.uniform(1.5, 3.0) + 100.0)
    w_bar = np.minimum(w_bar, 0.8 * cap)
    pv = rng.uniform(0.0, 0.6 * cap, N)

    # forecast-error box eating roughly 0..0.6 degC over the horizon
    d_budget = rng.uniform(0.0, 0.6)
    bounds = rng.uniform(0.2, 1.0, p) * d_budget / max(sens_d * N, 1e-9)
    dist = DisturbanceUncertainty(bounds=bounds, horizon_N=N)
    start = int(rng.integers(0, N - h + 1))
    M = build_placement(N, start, h)
    oper = build_operating_constraints((lo, hi), pv, cap, N, model)
    sets = AssessmentSets(flex=build_flexibility_polytope(0.0, 0.0, h, M=M),
                          dist=dist, oper=oper)
    return SmallInstance(model=model, lifted=lifted, sets=sets, x0=x0,
                         w_bar=w_bar, d_hat=d_hat)


def random_policy(rng: np.random.Generator, inst: SmallInstance) -> AffinePolicy:
    lifted = inst.lifted
    m, p, N, h = lifted.m, lifted.p, lifted.horizon_N, inst.sets.flex.h
    v = rng.normal(0.0, 100.0, m * N)
    K = rng.normal(0.0, 0.4, (m * N, h))
    P = rng.normal(0.0, 0.3, (m * N, p * N))
    P = np.where(strictly_lower_block_mask(N, m, p), P, 0.0)
    return AffinePolicy(v=v, K=K, P=P, m=m, p=p)


@dataclass
class SuiteResult:
    name: str
    passed: bool
    checks: int
    detail: str = ""


@dataclass
class VerificationReport:
    suites: list = field(default_factory=list)
    seed: int = 0

    @property
    def all_passed(self) -> bool:
        return all(s.passed for s in self.suites)

    def format_matrix(self) -> str:
        lines = [f"verification (seed {self.seed})"]
        for s in self.suites:
            status = "PASS" if s.passed else "FAIL"
            line = f"  [{status}] {s.name}: {s.checks} checks"
            if s.detail:
                line += f" ({s.detail})"
            lines.append(line)
        return "\n".join(lines)


def duality_suite(rng: np.random.Generator, n_instances: int = 50,
                  rel_tol: float = 1e-6,
                  corrupt_dual_sign: bool = False) -> SuiteResult:
    """Per-row dual optimum vs primal polytope maximum on random policies."""
    checks = 0
    worst = 0.0
    for _ in range(n_instances):
        inst = random_small_instance(rng)
        gamma1 = float(rng.uniform(0.0, 400.0))
        gamma2 = float(rng.uniform(0.0, 150.0))
        gsets = inst.sets.with_gamma(gamma1, gamma2)
        rows = build_row_system(inst.lifted, gsets, inst.x0, inst.w_bar,
                                inst.d_hat)
        policy = random_policy(rng, inst)
        W = gsets.flex.as_polytope()
        Dp = gsets.dist.as_polytope()
        for r in range(rows.total):
            c_w = rows.V[r] @ policy.K + rows.Cw[r]
            c_d = rows.V[r] @ policy.P + rows.Cd[r]
            if corrupt_dual_sign:
                lp_w, lp_d = dualize_row(-c_w, c_d, W, Dp)
            else:
                lp_w, lp_d = dualize_row(c_w, c_d, W, Dp)
            for lp, c, poly in ((lp_w, c_w, W), (lp_d, c_d, Dp)):
                sol = solve_lp(lp)
                if sol.status != "optimal":
                    return SuiteResult("duality", False, checks,
                                       f"dual LP {sol.status}")
                primal, _ = max_over_polytope(c, poly)
                rel = abs(sol.objective_value - primal) / max(
                    1.0, abs(primal))
                worst = max(worst, rel)
                checks += 1
                if rel > rel_tol:
                    return SuiteResult(
                        "duality", False, checks,
                        f"gap {rel:.2e} exceeds {rel_tol:.0e}")
    return SuiteResult("duality", True, checks, f"worst gap {worst:.2e}")


def vertex_suite(rng: np.random.Generator, n_instances: int = 20,
                 tol_w: float = 1.0) -> SuiteResult:
    """Reformulation feasibility and amplitude vs brute-force enumeration.

    Instances are kept tiny (p = 1, N <= 4, h <= 2) so the exhaustive
    vertex LP stays cheap.
    """
    checks = 0
    for _ in range(n_instances):
        inst = random_small_instance(rng, n_max=1, N_max=4, h_max=2, p_max=1)
        gamma2_policy = RatioGamma2(0.25)
        for g1 in (0.0, 50.0, 200.0, 600.0):
            g2 = gamma2_policy.gamma2_for(g1)
            prog = assemble_reformulation(inst.x0, inst.w_bar, inst.d_hat,
                                          inst.lifted, inst.sets, g1, g2)
            dual_feas = solve_lp(prog.lp).status == "optimal"
            vert_feas = vertex_policy_feasible(inst.x0, inst.w_bar,
                                               inst.d_hat, inst.lifted,
                                               inst.sets, g1, g2)
            checks += 1
            if dual_feas != vert_feas:
                return SuiteResult(
                    "vertex-oracle", False, checks,
                    f"disagreement at gamma1={g1:.0f}: dual={dual_feas} "
                    f"vertex={vert_feas}")
        cap = inst.sets.oper.total_power_cap
        assessed = assess_flexibility(inst.x0, inst.w_bar, inst.d_hat,
                                      inst.lifted, inst.sets,
                                      gamma2_policy=gamma2_policy,
                                      gamma1_max=cap, tol_w=tol_w)
        brute = vertex_assess_gamma1(inst.x0, inst.w_bar, inst.d_hat,
                                     inst.lifted, inst.sets,
                                     gamma2_policy=gamma2_policy,
                                     gamma1_max=cap, tol_w=tol_w)
        checks += 1
        if abs(assessed.gamma1_star - brute) > tol_w:
            return SuiteResult(
                "vertex-oracle", False, checks,
                f"amplitude mismatch {assessed.gamma1_star:.2f} vs {brute:.2f}")
    return SuiteResult("vertex-oracle", True, checks)


def monotonicity_suite(rng: np.random.Generator,
                       n_instances: int = 10) -> SuiteResult:
    """Amplitude monotone under error-box growth and comfort widening."""
    checks = 0
    for _ in range(n_instances):
        inst = random_small_instance(rng)
        policy = FixedGamma2(float(rng.uniform(0.0, 100.0)))

        def gamma1_of(sets):
            return assess_flexibility(inst.x0, inst.w_bar, inst.d_hat,
                                      inst.lifted, sets,
                                      gamma2_policy=policy).gamma1_star

        base = gamma1_of(inst.sets)
        grown = replace(inst.sets,
                        dist=DisturbanceUncertainty(
                            bounds=inst.sets.dist.bounds * 2.0 + 0.5,
                            horizon_N=inst.sets.dist.horizon_N))
        checks += 1
        if gamma1_of(grown) > base + 1.0:
            return SuiteResult("monotonicity", False, checks,
                               "amplitude grew with a larger error box")

        oper = inst.sets.oper
        wide = build_operating_constraints(
            (oper.comfort_lower - 1.0, oper.comfort_upper + 1.0),
            oper.u_upper, oper.total_power_cap,
            inst.lifted.horizon_N, inst.model)
        checks += 1
        if gamma1_of(replace(inst.sets, oper=wide)) < base - 1.0:
            return SuiteResult("monotonicity", False, checks,
                               "amplitude shrank with a wider comfort band")
    return SuiteResult("monotonicity", True, checks)


def run_verification(seed: int = 0, n_duality: int = 50, n_vertex: int = 20,
                     n_monotonic: int = 10,
                     corrupt_dual_sign: bool = False) -> VerificationReport:
    """Run all three suites on a reproducible instance stream."""
    report = VerificationReport(seed=seed)
    rng = np.random.default_rng(seed)
    report.suites.append(duality_suite(rng, n_duality,
                                       corrupt_dual_sign=corrupt_dual_sign))
    rng = np.random.default_rng(seed + 1)
    report.suites.append(vertex_suite(rng, n_vertex))
    rng = np.random.default_rng(seed + 2)
    report.suites.append(monotonicity_suite(rng, n_monotonic))
    return report

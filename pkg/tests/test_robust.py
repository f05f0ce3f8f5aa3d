import numpy as np
import pytest

from flexassess.constraints import (DisturbanceUncertainty,
                                    build_flexibility_polytope,
                                    build_operating_constraints,
                                    build_placement)
from flexassess.lpcore import (LinearProgram, Polytope,
                               enumerate_polytope_vertices,
                               max_over_polytope, solve_lp)
from flexassess.robust import (AffinePolicy, AssessmentSets, FixedGamma2,
                               RatioGamma2, assemble_reformulation,
                               assess_flexibility, bisection_probe_bound,
                               build_row_system, causal_gain_mask,
                               dualize_row, export_bilinear_program,
                               precompute_disturbance_policy,
                               strictly_lower_block_mask,
                               verify_robust_feasibility,
                               vertex_assess_gamma1, vertex_policy_feasible,
                               worst_case_row_values)
from flexassess.thermal import ThermalModel, lift_dynamics
from flexassess.verification import random_policy, random_small_instance


# ---------------------------------------------------------------------------
# policy structure
# ---------------------------------------------------------------------------

def test_sl_mask_blocks():
    mask = strictly_lower_block_mask(N=3, m=1, p=2)
    assert mask.shape == (3, 6)
    assert not mask[0].any()                      # step 0 sees nothing
    assert mask[1, :2].all() and not mask[1, 2:].any()
    assert mask[2, :4].all() and not mask[2, 4:].any()


def test_policy_rejects_noncausal_P():
    P = np.zeros((3, 6))
    P[0, 0] = 0.5   # step 0 reading the step-0 error: forbidden
    with pytest.raises(ValueError):
        AffinePolicy(v=np.zeros(3), K=np.zeros((3, 2)), P=P, m=1, p=2)


def test_policy_accepts_and_zeroing_preserves_sl():
    P = np.zeros((3, 6))
    P[2, 0] = 1.0
    P[1, 1] = -0.5
    policy = AffinePolicy(v=np.zeros(3), K=np.zeros((3, 2)), P=P, m=1, p=2)
    zeroed = policy.P.copy()
    zeroed[2, 0] = 0.0
    AffinePolicy(v=policy.v, K=policy.K, P=zeroed, m=1, p=2)  # still valid


def test_causal_gain_mask_follows_placement():
    M = build_placement(4, 1, 2)        # profile applied at steps 1, 2
    mask = causal_gain_mask(M, N=4, m=1)
    # u_0 and u_1 may not use either entry; u_2 may use entry 0; u_3 both
    assert not mask[0].any() and not mask[1].any()
    assert mask[2, 0] and not mask[2, 1]
    assert mask[3].all()


# ---------------------------------------------------------------------------
# worst-case row values and row duals
# ---------------------------------------------------------------------------

def small_instance(seed=0, **kwargs):
    return random_small_instance(np.random.default_rng(seed), **kwargs)


def test_point_uncertainty_reduces_to_nominal_residuals():
    inst = small_instance(1)
    gsets = inst.sets.with_gamma(0.0, 0.0)
    zero_bounds = DisturbanceUncertainty(
        bounds=np.zeros(inst.sets.dist.p),
        horizon_N=inst.sets.dist.horizon_N)
    from dataclasses import replace
    gsets = replace(gsets, dist=zero_bounds)
    lifted = inst.lifted
    mN, pN = lifted.m * lifted.horizon_N, lifted.p * lifted.horizon_N
    policy = AffinePolicy(v=np.full(mN, 10.0), K=np.zeros((mN, gsets.flex.h)),
                          P=np.zeros((mN, pN)), m=lifted.m, p=lifted.p)
    values = worst_case_row_values(policy, lifted, gsets, inst.x0,
                                   inst.w_bar, inst.d_hat)
    rows = build_row_system(lifted, gsets, inst.x0, inst.w_bar, inst.d_hat)
    nominal = rows.V @ policy.v - rows.rhs
    assert values == pytest.approx(nominal, abs=1e-7)


def test_state_row_profile_max_matches_vertex_enumeration():
    inst = small_instance(2, h_max=3)
    gsets = inst.sets.with_gamma(300.0, 90.0)
    rows = build_row_system(inst.lifted, gsets, inst.x0, inst.w_bar,
                            inst.d_hat)
    verts = enumerate_polytope_vertices(gsets.flex.as_polytope())
    # with K = 0 the profile term of a state row is [G_x F_w M]_i w~
    for r in range(gsets.oper.l_x):
        value, _ = max_over_polytope(rows.Cw[r], gsets.flex.as_polytope())
        brute = max(float(rows.Cw[r] @ v) for v in verts)
        assert value == pytest.approx(brute, abs=1e-7)


def test_row_value_equals_dual_optimum_route():
    inst = small_instance(3)
    gsets = inst.sets.with_gamma(250.0, 60.0)
    lifted = inst.lifted
    policy = random_policy(np.random.default_rng(5), inst)
    rows = build_row_system(lifted, gsets, inst.x0, inst.w_bar, inst.d_hat)
    values = worst_case_row_values(policy, lifted, gsets, inst.x0,
                                   inst.w_bar, inst.d_hat)
    W = gsets.flex.as_polytope()
    D = gsets.dist.as_polytope()
    for r in range(rows.total):
        c_w = rows.V[r] @ policy.K + rows.Cw[r]
        c_d = rows.V[r] @ policy.P + rows.Cd[r]
        lp_w, lp_d = dualize_row(c_w, c_d, W, D)
        dual_total = (solve_lp(lp_w).objective_value
                      + solve_lp(lp_d).objective_value)
        nominal = rows.V[r] @ policy.v - rows.rhs[r]
        assert values[r] == pytest.approx(nominal + dual_total, abs=1e-6)


def test_dualize_row_examples():
    W = build_flexibility_polytope(500.0, 150.0, 3).as_polytope()
    D = Polytope(H=np.vstack([np.eye(2), -np.eye(2)]), g=np.ones(4))
    lp_w, lp_d = dualize_row(np.zeros(3), [2.0, -3.0], W, D)
    assert solve_lp(lp_d).objective_value == pytest.approx(5.0, abs=1e-9)
    assert solve_lp(lp_w).objective_value == pytest.approx(0.0, abs=1e-9)

    rng = np.random.default_rng(8)
    for _ in range(10):
        c_w = rng.normal(0, 5, 3)
        lp_w, _ = dualize_row(c_w, [0.0, 0.0], W, D)
        dual = solve_lp(lp_w).objective_value
        primal, _ = max_over_polytope(c_w, W)
        assert dual == pytest.approx(primal, rel=1e-6, abs=1e-6)


# ---------------------------------------------------------------------------
# reformulation
# ---------------------------------------------------------------------------

def nominal_feasibility_lp(inst):
    """Independent deterministic feasibility check (no duals, no policy)."""
    lifted, sets = inst.lifted, inst.sets
    oper = sets.oper
    mN = lifted.m * lifted.horizon_N
    const_x = oper.G_x @ (lifted.F_x @ inst.x0 + lifted.F_d @ inst.d_hat
                          + lifted.F_w @ inst.w_bar)
    A = np.vstack([oper.G_x @ lifted.F_u, oper.G_u, oper.L_u])
    b = np.concatenate([oper.g_x - const_x, oper.g_u,
                        oper.g_uw - oper.L_w @ inst.w_bar])
    sol = solve_lp(LinearProgram(objective_coeffs=np.zeros(mN),
                                 ineq_matrix=A, ineq_rhs=b))
    return sol.status == "optimal"


def test_zero_uncertainty_collapse_to_nominal():
    matches = 0
    for seed in range(20):
        inst = small_instance(seed + 100)
        from dataclasses import replace
        sets = replace(inst.sets, dist=DisturbanceUncertainty(
            bounds=np.zeros(inst.sets.dist.p),
            horizon_N=inst.sets.dist.horizon_N))
        inst_sets = sets
        prog = assemble_reformulation(inst.x0, inst.w_bar, inst.d_hat,
                                      inst.lifted, inst_sets, 0.0, 0.0)
        robust_feasible = solve_lp(prog.lp).status == "optimal"
        from dataclasses import replace as _r
        plain = nominal_feasibility_lp(
            type(inst)(model=inst.model, lifted=inst.lifted, sets=inst_sets,
                       x0=inst.x0, w_bar=inst.w_bar, d_hat=inst.d_hat))
        assert robust_feasible == plain
        matches += 1
    assert matches == 20


def test_reformulation_matches_vertex_oracle():
    for seed in range(6):
        inst = small_instance(seed + 40, n_max=1, N_max=4, h_max=2, p_max=1)
        for g1 in (0.0, 100.0, 400.0, 1200.0):
            g2 = 0.25 * g1
            prog = assemble_reformulation(inst.x0, inst.w_bar, inst.d_hat,
                                          inst.lifted, inst.sets, g1, g2)
            dual_feas = solve_lp(prog.lp).status == "optimal"
            vert_feas = vertex_policy_feasible(inst.x0, inst.w_bar,
                                               inst.d_hat, inst.lifted,
                                               inst.sets, g1, g2)
            assert dual_feas == vert_feas


def test_reformulation_exactness_with_two_channels():
    # one wider instance: p = 2, N = 4 (error box has 2^8 vertices)
    inst = small_instance(77, n_max=2, N_max=4, h_max=2, p_max=2)
    while inst.lifted.horizon_N != 4 or inst.lifted.p != 2:
        inst = small_instance(np.random.default_rng().integers(1e6),
                              n_max=2, N_max=4, h_max=2, p_max=2)
    for g1 in (50.0, 500.0):
        prog = assemble_reformulation(inst.x0, inst.w_bar, inst.d_hat,
                                      inst.lifted, inst.sets, g1, 0.25 * g1)
        dual_feas = solve_lp(prog.lp).status == "optimal"
        vert_feas = vertex_policy_feasible(inst.x0, inst.w_bar, inst.d_hat,
                                           inst.lifted, inst.sets, g1,
                                           0.25 * g1)
        assert dual_feas == vert_feas


def test_dual_variable_count_formula():
    inst = small_instance(9)
    sets = inst.sets
    h = sets.flex.h
    l_d = sets.dist.num_rows
    l_total = sets.oper.l_x + sets.oper.l_u + sets.oper.l_uw
    prog = assemble_reformulation(inst.x0, inst.w_bar, inst.d_hat,
                                  inst.lifted, sets, 100.0, 25.0)
    expected = (4 * h - 2) * l_total + l_d * l_total
    assert prog.dual_variable_count == expected
    assert prog.num_variables == prog.policy_variable_count + expected


def test_bilinear_export_annotates_gamma_slots():
    import json
    inst = small_instance(10)
    payload = json.loads(export_bilinear_program(
        inst.x0, inst.w_bar, inst.d_hat, inst.lifted, inst.sets, 100.0, 25.0))
    assert {"c", "A_ub", "b_ub", "bilinear_terms"} <= set(payload)
    factors = {t["factor"] for t in payload["bilinear_terms"]}
    assert factors <= {"gamma1", "gamma2"}
    h = inst.sets.flex.h
    l_total = (inst.sets.oper.l_x + inst.sets.oper.l_u + inst.sets.oper.l_uw)
    count1 = sum(1 for t in payload["bilinear_terms"]
                 if t["factor"] == "gamma1")
    assert count1 == h * l_total  # one gamma1 slot per amplitude dual per row


# ---------------------------------------------------------------------------
# amplitude search
# ---------------------------------------------------------------------------

def zero_slack_instance():
    """x0 pinned at the lower comfort bound with exactly-holding power."""
    model = ThermalModel(A=[[0.9]], B=[[0.05]], R=[[0.05]], D=[[0.004, 0.0]],
                         sample_period=300.0)
    N = h = 4
    lifted = lift_dynamics(model, N)
    x0 = np.array([19.0])
    delta = np.array([1.0, 0.0])
    d_hat = np.tile([6.0, 0.0], N)
    # steady grid power holding 19 under the coldest admissible ambient
    w_hold = (19.0 * (1 - 0.9) - 0.004 * (6.0 - 1.0)) / 0.05
    w_bar = np.full(N, w_hold)
    oper = build_operating_constraints((19.0, 24.0), np.zeros(N), 3000.0, N,
                                       model)
    sets = AssessmentSets(
        flex=build_flexibility_polytope(0.0, 0.0, h,
                                        M=build_placement(N, 0, h)),
        dist=DisturbanceUncertainty(bounds=delta, horizon_N=N),
        oper=oper)
    return lifted, sets, x0, w_bar, d_hat


def test_zero_flexibility_when_no_slack():
    lifted, sets, x0, w_bar, d_hat = zero_slack_instance()
    result = assess_flexibility(x0, w_bar, d_hat, lifted, sets,
                                gamma2_policy=FixedGamma2(50.0))
    assert result.feasible
    assert result.gamma1_star == 0.0


def test_infeasible_nominal_reports_zero():
    lifted, sets, x0, w_bar, d_hat = zero_slack_instance()
    result = assess_flexibility(x0, np.zeros(4), d_hat, lifted, sets)
    assert not result.feasible
    assert result.gamma1_star == 0.0
    assert result.policy is None


def test_assessment_matches_vertex_bisection():
    for seed in (11, 12, 13):
        inst = small_instance(seed, n_max=1, N_max=4, h_max=2, p_max=1)
        assessed = assess_flexibility(inst.x0, inst.w_bar, inst.d_hat,
                                      inst.lifted, inst.sets)
        brute = vertex_assess_gamma1(inst.x0, inst.w_bar, inst.d_hat,
                                     inst.lifted, inst.sets)
        assert abs(assessed.gamma1_star - brute) <= 1.0


def test_bisection_probe_budget_and_monotone_feasibility():
    inst = small_instance(21)
    cap = inst.sets.oper.total_power_cap
    result = assess_flexibility(inst.x0, inst.w_bar, inst.d_hat, inst.lifted,
                                inst.sets, tol_w=1.0)
    assert result.diagnostics["lp_solves"] <= 2 + bisection_probe_bound(cap, 1.0)
    # empirical monotonicity: feasibility never returns after it is lost
    state = []
    for g1 in np.linspace(0.0, cap, 8):
        prog = assemble_reformulation(inst.x0, inst.w_bar, inst.d_hat,
                                      inst.lifted, inst.sets, g1, 0.25 * g1)
        state.append(solve_lp(prog.lp).status == "optimal")
    dropped = False
    for feasible in state:
        if not feasible:
            dropped = True
        elif dropped:
            pytest.fail("feasibility returned after being lost")


def test_assessment_json_fields():
    import json
    inst = small_instance(23)
    result = assess_flexibility(inst.x0, inst.w_bar, inst.d_hat, inst.lifted,
                                inst.sets)
    payload = json.loads(result.to_json())
    assert set(payload) == {"gamma1_star_w", "gamma2_star_w_per_step",
                            "window_start_step", "h", "feasible", "lp_solves"}


def test_gamma2_ascent_certifies_larger_ramp():
    inst = small_instance(31)
    base = assess_flexibility(inst.x0, inst.w_bar, inst.d_hat, inst.lifted,
                              inst.sets, gamma2_policy=RatioGamma2(0.1))
    refined = assess_flexibility(inst.x0, inst.w_bar, inst.d_hat, inst.lifted,
                                 inst.sets, gamma2_policy=RatioGamma2(0.1),
                                 alpha=0.5)
    assert refined.gamma1_star == pytest.approx(base.gamma1_star, abs=1e-9)
    assert refined.gamma2_star >= base.gamma2_star - 1e-9
    if refined.feasible and refined.gamma1_star > 0:
        ok, _ = verify_robust_feasibility(refined, inst.lifted, inst.sets,
                                          inst.x0, inst.w_bar, inst.d_hat)
        assert ok


# ---------------------------------------------------------------------------
# soundness verification
# ---------------------------------------------------------------------------

def test_randomized_soundness_sweep():
    verified = 0
    for seed in range(60):
        if verified >= 10:
            break
        inst = small_instance(seed + 300)
        result = assess_flexibility(inst.x0, inst.w_bar, inst.d_hat,
                                    inst.lifted, inst.sets)
        if not result.feasible:
            continue
        ok, worst = verify_robust_feasibility(result, inst.lifted, inst.sets,
                                              inst.x0, inst.w_bar, inst.d_hat)
        assert ok, f"seed {seed}: certified policy violates by {worst}"
        verified += 1
    assert verified >= 10


def test_inflated_amplitude_fails_verification():
    for seed in range(50):
        inst = small_instance(seed + 600)
        result = assess_flexibility(inst.x0, inst.w_bar, inst.d_hat,
                                    inst.lifted, inst.sets)
        cap = inst.sets.oper.total_power_cap
        if not result.feasible or not 1.0 < result.gamma1_star < 0.9 * cap:
            continue
        from dataclasses import replace
        inflated = replace(result, gamma1_star=1.1 * result.gamma1_star + 2.0,
                           gamma2_star=result.gamma2_star)
        ok, worst = verify_robust_feasibility(inflated, inst.lifted,
                                              inst.sets, inst.x0, inst.w_bar,
                                              inst.d_hat)
        # the certified policy cannot absorb an adversary past the boundary
        assert not ok and worst > 0
        return
    pytest.skip("no interior-boundary instance found")


def test_verify_trivial_at_zero_uncertainty():
    from dataclasses import replace
    inst = small_instance(41)
    sets = replace(inst.sets, dist=DisturbanceUncertainty(
        bounds=np.zeros(inst.sets.dist.p), horizon_N=inst.sets.dist.horizon_N))
    result = assess_flexibility(inst.x0, inst.w_bar, inst.d_hat, inst.lifted,
                                sets, gamma2_policy=FixedGamma2(0.0),
                                gamma1_max=0.0)
    if result.feasible:
        ok, _ = verify_robust_feasibility(result, inst.lifted, sets, inst.x0,
                                          inst.w_bar, inst.d_hat)
        assert ok


# ---------------------------------------------------------------------------
# fixed disturbance policy
# ---------------------------------------------------------------------------

def test_fixed_policy_zero_bounds_is_zero():
    from dataclasses import replace
    inst = small_instance(51)
    sets = replace(inst.sets, dist=DisturbanceUncertainty(
        bounds=np.zeros(inst.sets.dist.p), horizon_N=inst.sets.dist.horizon_N))
    fixed = precompute_disturbance_policy(inst.lifted, sets)
    assert np.array_equal(fixed.P, np.zeros_like(fixed.P))
    assert fixed.margins == pytest.approx(np.zeros_like(fixed.margins))


def test_fixed_mode_is_a_restriction():
    for seed in (61, 62, 63):
        inst = small_instance(seed)
        fixed = precompute_disturbance_policy(inst.lifted, inst.sets)
        full = assess_flexibility(inst.x0, inst.w_bar, inst.d_hat,
                                  inst.lifted, inst.sets)
        restricted = assess_flexibility(inst.x0, inst.w_bar, inst.d_hat,
                                        inst.lifted, inst.sets, fixed=fixed)
        assert restricted.gamma1_star <= full.gamma1_star + 1.0


def test_fixed_mode_counts_drop_by_documented_blocks():
    inst = small_instance(71)
    fixed = precompute_disturbance_policy(inst.lifted, inst.sets)
    full = assemble_reformulation(inst.x0, inst.w_bar, inst.d_hat,
                                  inst.lifted, inst.sets, 50.0, 12.5)
    slim = assemble_reformulation(inst.x0, inst.w_bar, inst.d_hat,
                                  inst.lifted, inst.sets, 50.0, 12.5,
                                  fixed=fixed)
    lifted = inst.lifted
    mN = lifted.m * lifted.horizon_N
    pN = lifted.p * lifted.horizon_N
    l_total = (inst.sets.oper.l_x + inst.sets.oper.l_u + inst.sets.oper.l_uw)
    l_d = inst.sets.dist.num_rows
    assert full.num_variables - slim.num_variables == mN * pN + l_total * l_d
    assert full.num_eq_rows - slim.num_eq_rows == pN * l_total
    assert slim.num_variables < full.num_variables
    assert slim.num_eq_rows < full.num_eq_rows


def test_fixed_mode_certificates_are_sound():
    for seed in (81, 82):
        inst = small_instance(seed)
        fixed = precompute_disturbance_policy(inst.lifted, inst.sets)
        result = assess_flexibility(inst.x0, inst.w_bar, inst.d_hat,
                                    inst.lifted, inst.sets, fixed=fixed)
        if result.feasible and result.gamma1_star > 0:
            ok, worst = verify_robust_feasibility(
                result, inst.lifted, inst.sets, inst.x0, inst.w_bar,
                inst.d_hat)
            assert ok, f"fixed-mode policy violates by {worst}"


# ---------------------------------------------------------------------------
# uncertainty monotonicity (module-level invariants)
# ---------------------------------------------------------------------------

def test_amplitude_monotone_in_error_box():
    from dataclasses import replace
    inst = small_instance(91)
    g_small = assess_flexibility(inst.x0, inst.w_bar, inst.d_hat, inst.lifted,
                                 inst.sets).gamma1_star
    grown = replace(inst.sets, dist=DisturbanceUncertainty(
        bounds=inst.sets.dist.bounds * 3.0 + 1.0,
        horizon_N=inst.sets.dist.horizon_N))
    g_large = assess_flexibility(inst.x0, inst.w_bar, inst.d_hat, inst.lifted,
                                 grown).gamma1_star
    assert g_large <= g_small + 1.0


def test_amplitude_monotone_in_comfort_band():
    from dataclasses import replace
    inst = small_instance(92)
    oper = inst.sets.oper
    wide = build_operating_constraints(
        (oper.comfort_lower - 1.5, oper.comfort_upper + 1.5), oper.u_upper,
        oper.total_power_cap, inst.lifted.horizon_N, inst.model)
    g_base = assess_flexibility(inst.x0, inst.w_bar, inst.d_hat, inst.lifted,
                                inst.sets).gamma1_star
    g_wide = assess_flexibility(inst.x0, inst.w_bar, inst.d_hat, inst.lifted,
                                replace(inst.sets, oper=wide)).gamma1_star
    assert g_wide >= g_base - 1.0

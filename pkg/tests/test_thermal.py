import numpy as np
import pytest

from flexassess.thermal import (
    MISMATCH_BUDGET_C,
    IllConditionedRegressionError,
    ThermalModel,
    TruthModel,
    UnstableModelError,
    default_building_pair,
    default_truth_model,
    generate_identification_records,
    identify_model,
    lift_dynamics,
    one_step_residuals,
    simulate_step,
)


def make_model(a=0.9, b=0.1, r=0.08, d=(0.01, 0.002)):
    return ThermalModel(A=[[a]], B=[[b]], R=[[r]], D=[list(d)],
                        sample_period=300.0)


def random_stable_model(rng, n=2, p=2):
    A = rng.uniform(-0.4, 0.9, (n, n))
    A *= 0.9 / max(abs(np.linalg.eigvals(A)))
    return ThermalModel(A=A, B=rng.uniform(0.01, 0.1, (n, 1)),
                        R=rng.uniform(0.01, 0.1, (n, 1)),
                        D=rng.uniform(-0.05, 0.1, (n, p)),
                        sample_period=300.0)


def iterate(model, x0, u, w, d, N):
    x = np.asarray(x0, dtype=float)
    out = []
    for k in range(N):
        x = simulate_step(model, x, u[k], w[k], d[k])
        out.append(x.copy())
    return np.concatenate(out)


def test_lift_single_step_is_the_model():
    model = make_model()
    lifted = lift_dynamics(model, 1)
    assert np.array_equal(lifted.F_x, model.A)
    assert np.array_equal(lifted.F_u, model.B)
    assert np.array_equal(lifted.F_w, model.R)
    assert np.array_equal(lifted.F_d, model.D)


def test_lift_scalar_two_step_blocks():
    model = make_model(a=0.9, b=0.1)
    lifted = lift_dynamics(model, 2)
    assert lifted.F_x == pytest.approx(np.array([[0.9], [0.81]]))
    assert lifted.F_u == pytest.approx(np.array([[0.1, 0.0], [0.09, 0.1]]))
    # cross-check against step-by-step simulation
    rng = np.random.default_rng(0)
    x0 = rng.normal(size=1)
    u, w, d = rng.normal(size=2), rng.normal(size=2), rng.normal(size=(2, 2))
    pred = lifted.predict(x0, u, w, d.ravel())
    assert pred == pytest.approx(iterate(model, x0, u, w, d, 2), abs=1e-12)


@pytest.mark.parametrize("N", [1, 3, 6, 13, 24])
def test_lifted_equals_iterated(N):
    rng = np.random.default_rng(N)
    model = random_stable_model(rng)
    lifted = lift_dynamics(model, N)
    x0 = rng.normal(size=model.n)
    u = rng.normal(size=N)
    w = rng.normal(size=N)
    d = rng.normal(size=(N, model.p))
    pred = lifted.predict(x0, u, w, d.ravel())
    assert pred == pytest.approx(iterate(model, x0, u, w, d, N), abs=1e-10)


def test_block_triangular_zeros_are_exact():
    rng = np.random.default_rng(2)
    model = random_stable_model(rng)
    N = 5
    lifted = lift_dynamics(model, N)
    n, m, p = model.n, model.m, model.p
    for i in range(N):
        for j in range(i + 1, N):
            assert np.all(lifted.F_u[i * n:(i + 1) * n, j * m:(j + 1) * m] == 0.0)
            assert np.all(lifted.F_d[i * n:(i + 1) * n, j * p:(j + 1) * p] == 0.0)


def test_prediction_superposition_exact():
    rng = np.random.default_rng(4)
    model = random_stable_model(rng)
    lifted = lift_dynamics(model, 6)
    u = rng.normal(size=6)
    contribution = lifted.F_u @ u
    assert np.array_equal(lifted.F_u @ (2.0 * u), 2.0 * contribution)


def test_free_response():
    model = make_model()
    x0 = np.array([17.0])
    nxt = simulate_step(model, x0, 0.0, 0.0, np.zeros(2))
    assert np.array_equal(nxt, model.A @ x0)


def test_steady_state_is_fixed_point():
    model = make_model(a=0.9, b=0.1)
    u_ss = 40.0
    x_star = np.linalg.solve(np.eye(1) - model.A, model.B * u_ss).ravel()
    nxt = simulate_step(model, x_star, u_ss, 0.0, np.zeros(2))
    assert nxt == pytest.approx(x_star, abs=1e-12)


def test_truth_model_noise_only_with_rng():
    truth = default_truth_model()
    x = np.array([20.0, 18.0, 35.0])
    d = np.array([5.0, 100.0])
    silent = simulate_step(truth, x, 100.0, 400.0, d)
    again = simulate_step(truth, x, 100.0, 400.0, d)
    assert np.array_equal(silent, again)
    noisy = simulate_step(truth, x, 100.0, 400.0, d,
                          rng=np.random.default_rng(1))
    assert not np.array_equal(silent, noisy)


def test_bundled_pair_mismatch_within_budget():
    truth, control = default_building_pair()
    records = generate_identification_records(truth, days=2.0, seed=777)
    residuals = one_step_residuals(control, records)
    assert np.sqrt(np.mean(residuals ** 2)) < MISMATCH_BUDGET_C


def test_identify_recovers_exact_first_order():
    model = make_model(a=0.92, b=0.05, r=0.04, d=(0.015, 0.003))
    rng = np.random.default_rng(9)
    x = np.array([20.0])
    records = []
    for _ in range(300):
        u = rng.uniform(0, 500)
        w = rng.uniform(0, 1000)
        d = rng.uniform(-5, 10, 2)
        records.append((x[0], u, w, d))
        x = simulate_step(model, x, u, w, d)
    fitted = identify_model(records, order=1)
    assert fitted.A[0, 0] == pytest.approx(0.92, abs=1e-6)
    assert fitted.B[0, 0] == pytest.approx(0.05, abs=1e-6)
    assert fitted.R[0, 0] == pytest.approx(0.04, abs=1e-6)
    assert fitted.D[0] == pytest.approx([0.015, 0.003], abs=1e-6)


def test_identify_bundled_truth_heldout_rmse():
    truth = default_truth_model()
    records = generate_identification_records(truth, days=10.0, seed=12345)
    split = int(0.8 * len(records))
    fitted = identify_model(records[:split], order=1)
    rmse = np.sqrt(np.mean(one_step_residuals(fitted, records[split:]) ** 2))
    assert rmse < 0.15


def test_identify_order2_beats_order1():
    truth = default_truth_model()
    records = generate_identification_records(truth, days=10.0, seed=12345)
    split = int(0.8 * len(records))
    held = records[split:]
    rmse = {}
    for order in (1, 2):
        fitted = identify_model(records[:split], order=order)
        rmse[order] = np.sqrt(np.mean(one_step_residuals(fitted, held) ** 2))
    assert rmse[2] <= rmse[1]


def test_identify_rejects_constant_inputs():
    model = make_model()
    x = np.array([20.0])
    records = []
    for _ in range(200):
        records.append((x[0], 100.0, 400.0, np.array([5.0, 50.0])))
        x = simulate_step(model, x, 100.0, 400.0, np.array([5.0, 50.0]))
    with pytest.raises(IllConditionedRegressionError):
        identify_model(records, order=1)


def test_identify_rejects_too_few_samples():
    records = [(20.0, 1.0, 1.0, np.zeros(2))] * 20
    with pytest.raises(ValueError):
        identify_model(records, order=1)


def test_identify_rejects_unstable_fit():
    rng = np.random.default_rng(3)
    T = [15.0]
    inputs = []
    for _ in range(300):
        u = rng.uniform(0, 10)
        w = rng.uniform(0, 10)
        d = rng.uniform(-1, 1, 2)
        inputs.append((u, w, d))
        T.append(1.02 * T[-1] + 0.001 * u + 0.001 * w + 0.001 * d.sum())
    records = [(T[k], *inputs[k]) for k in range(300)]
    with pytest.raises(UnstableModelError):
        identify_model(records, order=1)


def test_model_json_round_trip():
    truth, control = default_building_pair()
    clone = ThermalModel.from_json(control.to_json())
    assert np.array_equal(clone.A, control.A)
    assert np.array_equal(clone.B, control.B)
    assert np.array_equal(clone.R, control.R)
    assert np.array_equal(clone.D, control.D)
    assert clone.sample_period == control.sample_period
    assert clone.cop == control.cop
    assert clone.room_output == control.room_output


def test_model_validation():
    with pytest.raises(ValueError):
        ThermalModel(A=[[1.01]], B=[[0.1]], R=[[0.1]], D=[[0.1, 0.1]],
                     sample_period=300.0)
    with pytest.raises(ValueError):
        ThermalModel(A=[[0.9]], B=[[0.1]], R=[[0.1]], D=[[0.1, 0.1]],
                     sample_period=-1.0)
    with pytest.raises(ValueError):
        TruthModel(model=make_model(), noise_std=np.array([-0.1]))

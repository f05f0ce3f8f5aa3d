"""Discrete-time building thermal models.

Two tiers live here: the low-order control model used by scheduling and
flexibility assessment (state = room + envelope temperature), and a
deliberately higher-order truth simulator (room, envelope, radiator) that
stands in for a detailed building plant. Their structural mismatch is part
of the design: everything downstream must tolerate it.

All models share the one-step recursion

    x[k+1] = A x[k] + B u[k] + R w[k] + D d[k]

with u the electric power drawn from local RES (W), w the electric power
drawn from the grid (W), and d = (ambient temperature degC, global
irradiance W/m2). B and R already include the heat pump's COP, so both are
in degC per W of *electric* power per step.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm


class IdentificationError(Exception):
    """Base class for model-identification failures."""


class IllConditionedRegressionError(IdentificationError):
    """Regression matrix is rank deficient (inputs not persistently exciting)."""


class UnstableModelError(IdentificationError):
    """Fitted model has spectral radius >= 1."""


@dataclass
class ThermalModel:
    """Control-oriented discrete-time thermal model.

    Attributes:
        A: state transition, n x n.
        B: RES electric power input, n x m (degC per W per step, COP folded in).
        R: grid electric power input, n x 1 (same scaling as B).
        D: uncontrolled inputs (ambient degC, irradiance W/m2), n x p.
        sample_period: step length in seconds.
        room_output: indices of the state components that are room temperatures.
        cop: heat pump coefficient of performance (already folded into B, R;
            kept for documentation and serialization).
    """

    A: np.ndarray
    B: np.ndarray
    R: np.ndarray
    D: np.ndarray
    sample_period: float
    room_output: tuple[int, ...] = (0,)
    cop: float = 3.0

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.B = np.atleast_2d(np.asarray(self.B, dtype=float))
        self.R = np.atleast_2d(np.asarray(self.R, dtype=float))
        self.D = np.atleast_2d(np.asarray(self.D, dtype=float))
        n = self.A.shape[0]
        if self.A.shape != (n, n):
            raise ValueError("A must be square")
        for name, mat in (("B", self.B), ("R", self.R), ("D", self.D)):
            if mat.shape[0] != n:
                raise ValueError(f"{name} must have {n} rows")
        if self.R.shape[1] != 1:
            raise ValueError("R must be n x 1 (grid power is scalar per step)")
        if self.sample_period <= 0:
            raise ValueError("sample_period must be positive")
        if self.cop <= 0:
            raise ValueError("cop must be positive")
        self.room_output = tuple(int(i) for i in self.room_output)
        if not self.room_output or any(i < 0 or i >= n for i in self.room_output):
            raise ValueError("room_output indices out of range")
        rho = max(abs(np.linalg.eigvals(self.A)))
        if rho >= 1.0:
            raise ValueError(f"A must be stable (spectral radius {rho:.4f} >= 1)")

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def p(self) -> int:
        return self.D.shape[1]

    def output_matrix(self) -> np.ndarray:
        """Selector C with one row per room-temperature component."""
        C = np.zeros((len(self.room_output), self.n))
        for row, idx in enumerate(self.room_output):
            C[row, idx] = 1.0
        return C

    def room_temperature(self, x) -> np.ndarray:
        return np.asarray(x, dtype=float).ravel()[list(self.room_output)]

    def to_json(self) -> str:
        """Serialize to the documented schema (matrices row-major)."""
        return json.dumps({
            "a": self.A.tolist(),
            "b": self.B.tolist(),
            "r": self.R.tolist(),
            "d": self.D.tolist(),
            "sample_period_s": self.sample_period,
            "cop": self.cop,
            "room_output": list(self.room_output),
        }, indent=2)

    @staticmethod
    def from_json(text: str) -> "ThermalModel":
        raw = json.loads(text)
        return ThermalModel(
            A=np.array(raw["a"], dtype=float),
            B=np.array(raw["b"], dtype=float),
            R=np.array(raw["r"], dtype=float),
            D=np.array(raw["d"], dtype=float),
            sample_period=float(raw["sample_period_s"]),
            room_output=tuple(raw.get("room_output", (0,))),
            cop=float(raw.get("cop", 3.0)),
        )


@dataclass
class TruthModel:
    """Higher-order plant simulator: a ThermalModel plus per-state process noise.

    Shares the (m, p) input interface with the control model it is paired
    with; its extra states emulate the gap between a detailed simulator and
    the low-order model the optimizers see.
    """

    model: ThermalModel
    noise_std: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.noise_std = np.asarray(self.noise_std, dtype=float).ravel()
        if self.noise_std.size == 0:
            self.noise_std = np.zeros(self.model.n)
        if self.noise_std.size != self.model.n:
            raise ValueError("noise_std length must match state dimension")
        if np.any(self.noise_std < 0):
            raise ValueError("noise_std must be nonnegative")

    @property
    def n(self) -> int:
        return self.model.n

    def room_temperature(self, x) -> np.ndarray:
        return self.model.room_temperature(x)


def simulate_step(model: ThermalModel | TruthModel, x, u, w, d,
                  rng: np.random.Generator | None = None) -> np.ndarray:
    """One step of the thermal recursion; adds process noise for a TruthModel.

    ``u`` may be a scalar when m == 1; ``w`` is scalar grid power; ``d`` has
    length p. Noise is drawn from ``rng`` only when one is supplied, so
    noiseless truth-model propagation stays available for tests.
    """
    noise_std = None
    if isinstance(model, TruthModel):
        noise_std = model.noise_std
        model = model.model
    x = np.asarray(x, dtype=float).ravel()
    u = np.atleast_1d(np.asarray(u, dtype=float))
    d = np.atleast_1d(np.asarray(d, dtype=float))
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(u))
            and np.isfinite(w) and np.all(np.isfinite(d))):
        raise ValueError("simulate_step requires finite inputs")
    nxt = model.A @ x + model.B @ u + model.R[:, 0] * float(w) + model.D @ d
    if noise_std is not None and rng is not None:
        nxt = nxt + noise_std * rng.standard_normal(noise_std.size)
    return nxt


@dataclass
class LiftedModel:
    """Stacked prediction matrices over an N-step horizon.

    x_stack = F_x x0 + F_u u_stack + F_w w_stack + F_d d_stack, where
    x_stack = [x_1; ...; x_N]. F_u and F_d are block lower triangular.
    """

    F_x: np.ndarray
    F_u: np.ndarray
    F_w: np.ndarray
    F_d: np.ndarray
    horizon_N: int
    model: ThermalModel

    @property
    def n(self) -> int:
        return self.model.n

    @property
    def m(self) -> int:
        return self.model.m

    @property
    def p(self) -> int:
        return self.model.p

    def predict(self, x0, u_stack, w_stack, d_stack) -> np.ndarray:
        return (self.F_x @ np.asarray(x0, dtype=float).ravel()
                + self.F_u @ np.asarray(u_stack, dtype=float).ravel()
                + self.F_w @ np.asarray(w_stack, dtype=float).ravel()
                + self.F_d @ np.asarray(d_stack, dtype=float).ravel())

    def room_rows(self) -> np.ndarray:
        """(num_rooms*N) x (n*N) selector extracting room temperatures of x_stack."""
        C = self.model.output_matrix()
        return np.kron(np.eye(self.horizon_N), C)


def lift_dynamics(model: ThermalModel, N: int) -> LiftedModel:
    """Build the N-step stacked prediction matrices.

    Block (i, j) of F_u is A^(i-j) B for j <= i, zero above; block row i of
    F_x is A^(i+1); F_w and F_d are analogous with R and D.
    """
    if N < 1:
        raise ValueError("horizon must be at least 1")
    n, m, p = model.n, model.m, model.p
    powers = [np.eye(n)]
    for _ in range(N):
        powers.append(model.A @ powers[-1])

    F_x = np.vstack([powers[i + 1] for i in range(N)])
    F_u = np.zeros((n * N, m * N))
    F_w = np.zeros((n * N, N))
    F_d = np.zeros((n * N, p * N))
    for i in range(N):
        for j in range(i + 1):
            blk = powers[i - j]
            F_u[i * n:(i + 1) * n, j * m:(j + 1) * m] = blk @ model.B
            F_w[i * n:(i + 1) * n, j:j + 1] = blk @ model.R
            F_d[i * n:(i + 1) * n, j * p:(j + 1) * p] = blk @ model.D
    return LiftedModel(F_x=F_x, F_u=F_u, F_w=F_w, F_d=F_d, horizon_N=N, model=model)


def identify_model(records, order: int, sample_period: float = 300.0,
                   cop: float = 3.0) -> ThermalModel:
    """Least-squares fit of an order-n model from room-temperature records.

    ``records`` is a sequence of (room_temp_C, u_W, w_W, d_vec) samples at a
    fixed sample period. The fit regresses the next room temperature on n
    lags of output and inputs and realizes the result in observer-canonical
    state-space form, so the first state component is the room temperature.

    Raises:
        ValueError: fewer than 10x the parameter count of samples.
        IllConditionedRegressionError: regressors are rank deficient
            (e.g. constant inputs).
        UnstableModelError: the fitted A has spectral radius >= 1.
    """
    if order < 1:
        raise ValueError("order must be >= 1")
    T = np.array([float(rec[0]) for rec in records])
    u = np.array([float(np.atleast_1d(rec[1])[0]) for rec in records])
    w = np.array([float(rec[2]) for rec in records])
    d = np.array([np.asarray(rec[3], dtype=float).ravel() for rec in records])
    if d.ndim == 1:
        d = d.reshape(-1, 1)
    p = d.shape[1]
    n_params = order * (3 + p)
    n_rows = len(T) - order
    if n_rows < 10 * n_params:
        raise ValueError(
            f"need at least {order + 10 * n_params} samples for order {order}, "
            f"got {len(T)}")

    # One regressor row per step: n lags of output, then n lags of each input.
    phi = np.zeros((n_rows, n_params))
    y = np.zeros(n_rows)
    for row, k in enumerate(range(order - 1, len(T) - 1)):
        lags = []
        for i in range(order):
            lags.append(T[k - i])
        for i in range(order):
            lags.extend([u[k - i], w[k - i], *d[k - i]])
        phi[row] = lags
        y[row] = T[k + 1]

    col_norms = np.linalg.norm(phi, axis=0)
    if np.any(col_norms == 0.0):
        raise IllConditionedRegressionError("zero regressor column")
    scaled = phi / col_norms
    s = np.linalg.svd(scaled, compute_uv=False)
    if s[-1] < 1e-10 * s[0]:
        raise IllConditionedRegressionError(
            "regressors are rank deficient; inputs not persistently exciting")

    theta, *_ = np.linalg.lstsq(phi, y, rcond=None)
    alpha = theta[:order]
    blocks = theta[order:].reshape(order, 2 + p)

    # Observer-canonical realization: y = x[0].
    A = np.zeros((order, order))
    A[:, 0] = alpha
    A[:-1, 1:] = np.eye(order - 1)
    B = blocks[:, 0:1]
    R = blocks[:, 1:2]
    D = blocks[:, 2:]

    rho = max(abs(np.linalg.eigvals(A)))
    if rho >= 1.0:
        raise UnstableModelError(
            f"identified model unstable (spectral radius {rho:.4f})")
    return ThermalModel(A=A, B=B, R=R, D=D, sample_period=sample_period,
                        room_output=(0,), cop=cop)


def one_step_residuals(model: ThermalModel, records) -> np.ndarray:
    """One-step-ahead room-temperature prediction errors of ``model`` on records.

    State reconstruction uses the observer-canonical structure implicitly:
    the model is iterated with its room component re-anchored to the measured
    temperature each step, which is how the closed loop consumes it too.
    """
    T = np.array([float(rec[0]) for rec in records])
    u = np.array([float(np.atleast_1d(rec[1])[0]) for rec in records])
    w = np.array([float(rec[2]) for rec in records])
    d = np.array([np.asarray(rec[3], dtype=float).ravel() for rec in records])
    x = np.zeros(model.n)
    x[model.room_output[0]] = T[0]
    burn_in = 4 * model.n
    errors = []
    for k in range(len(T) - 1):
        x[model.room_output[0]] = T[k]
        x = simulate_step(model, x, u[k], w[k], d[k])
        if k >= burn_in:
            errors.append(x[model.room_output[0]] - T[k + 1])
    return np.asarray(errors)


# ---------------------------------------------------------------------------
# Bundled building: 3-state RC truth plant + identified low-order control model
# ---------------------------------------------------------------------------

#: documented electric heat pump COP used throughout the bundled building
DEFAULT_COP = 3.0

#: one-step room-temperature residual budget (degC) for the bundled pair,
#: measured once on the default identification trace and frozen
MISMATCH_BUDGET_C = 0.05

_TRUTH_PARAMS = {
    # thermal capacitances, J/K. Light zone and envelope: the ~6 h envelope
    # time constant keeps the low-order fit identifiable from a 10-day
    # campaign, and the small zone mass makes a 2 h power cut move the room
    # temperature enough for comfort (not just the power floor) to shape the
    # flexible capacity.
    "c_room": 2.5e6,
    "c_env": 7.0e6,
    "c_heat": 2.0e5,
    # conductances, W/K
    "u_room_env": 300.0,
    "u_room_amb": 60.0,
    "u_env_amb": 50.0,
    "u_heat_room": 150.0,
    # effective solar aperture into the room, m2 (sized so the house still
    # needs active heating through a clear winter midday)
    "solar_aperture": 1.0,
}


def default_truth_model(sample_period: float = 300.0,
                        noise_std: tuple[float, float, float] = (0.002, 0.001, 0.01),
                        ) -> TruthModel:
    """Bundled 3-state RC plant (room air, envelope, radiator), ZOH-discretized.

    The radiator state gives the plant dynamics the low-order control model
    cannot represent; parameters are sized for a small heat-pump-heated house
    (design heat load ~1.4 kW thermal at 7 degC ambient).
    """
    q = _TRUTH_PARAMS
    cr, ce, ch = q["c_room"], q["c_env"], q["c_heat"]
    ure, ura, uea, uhr = (q["u_room_env"], q["u_room_amb"],
                          q["u_env_amb"], q["u_heat_room"])
    ga = q["solar_aperture"]

    A_c = np.array([
        [-(ure + ura + uhr) / cr, ure / cr, uhr / cr],
        [ure / ce, -(ure + uea) / ce, 0.0],
        [uhr / ch, 0.0, -uhr / ch],
    ])
    # electric power u and w both feed the heat pump: thermal power = COP * W
    B_c = np.array([[0.0], [0.0], [DEFAULT_COP / ch]])
    R_c = B_c.copy()
    D_c = np.array([
        [ura / cr, ga / cr],
        [uea / ce, 0.0],
        [0.0, 0.0],
    ])

    # exact zero-order-hold discretization via the augmented matrix exponential
    n = 3
    G_c = np.hstack([B_c, R_c, D_c])
    aug = np.zeros((n + G_c.shape[1], n + G_c.shape[1]))
    aug[:n, :n] = A_c
    aug[:n, n:] = G_c
    M = expm(aug * sample_period)
    A = M[:n, :n]
    G = M[:n, n:]
    model = ThermalModel(A=A, B=G[:, 0:1], R=G[:, 1:2], D=G[:, 2:4],
                         sample_period=sample_period, room_output=(0,),
                         cop=DEFAULT_COP)
    return TruthModel(model=model, noise_std=np.asarray(noise_std))


def generate_identification_records(truth: TruthModel, days: float = 10.0,
                                    seed: int = 12345) -> list[tuple]:
    """Excitation trace from the truth plant for model identification.

    Heating power follows a random staircase (switching every ~2 h), ambient
    and irradiance follow a simple diurnal pattern with noise; deterministic
    for a fixed seed.
    """
    rng = np.random.default_rng(seed)
    dt = truth.model.sample_period
    steps = int(round(days * 86400 / dt))
    x = np.array([20.0, 18.0, 30.0])
    records = []
    w_level = 600.0
    u_level = 0.0
    front = 0.0
    for k in range(steps):
        t_h = k * dt / 3600.0
        # diurnal cycle plus a slow stochastic weather front: the
        # low-frequency content is what makes the slow poles identifiable
        front = 0.998 * front + rng.normal(0.0, 0.08)
        ambient = (7.0 + 5.0 * np.sin(2 * np.pi * (t_h - 9.0) / 24.0)
                   + 12.5 * front + rng.normal(0, 0.3))
        irr = max(0.0, 700.0 * np.sin(np.pi * ((t_h % 24.0) - 6.0) / 12.0))
        irr = irr * (0.7 + 0.3 * rng.random()) if irr > 0 else 0.0
        # decorrelated staircases (coprime switching periods, ~2-3 h) so the
        # two power channels identify independently and the fit weights the
        # timescale the flexibility window operates on
        if k % 36 == 0:
            w_level = rng.uniform(0.0, 1500.0)
        if k % 25 == 0:
            u_level = rng.uniform(0.0, 800.0)
        records.append((x[0], u_level, w_level, np.array([ambient, irr])))
        x = simulate_step(truth, x, u_level, w_level, np.array([ambient, irr]),
                          rng=rng)
    return records


def default_building_pair(order: int = 2, seed: int = 12345,
                          ) -> tuple[TruthModel, ThermalModel]:
    """The bundled (truth plant, identified control model) pair.

    The control model is re-identified deterministically from a 10-day
    excitation trace of the truth plant, so the mismatch between the two is
    an honest artifact of the order reduction rather than a tuned constant.
    """
    truth = default_truth_model()
    records = generate_identification_records(truth, days=10.0, seed=seed)
    control = identify_model(records, order=order,
                             sample_period=truth.model.sample_period,
                             cop=truth.model.cop)
    return truth, control

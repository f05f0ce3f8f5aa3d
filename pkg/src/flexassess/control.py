"""Building-side optimizers: day-ahead/rolling nominal grid-power scheduling,
DR request validation and application, and the fast RES tracking controller.

The scheduler trades energy cost against deviation from the comfort setpoint;
the tracker re-optimizes the RES input at every sampling instant with the
grid profile frozen to whatever has been committed (nominal schedule plus any
accepted DR reduction).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .constraints import FlexibilitySet, build_flexibility_polytope
from .lpcore import LinearProgram, solve_lp
from .robust import AffinePolicy
from .thermal import ThermalModel, lift_dynamics

#: $ per degC-step penalty weight applied to softened comfort violations
SOFT_COMFORT_WEIGHT = 1e3


class ScheduleInfeasibleError(Exception):
    """Comfort band unreachable under the given forecasts and power limits."""


class InfeasibleRequestError(Exception):
    """DR request outside the advertised flexible set (non-compliant operator)."""


@dataclass
class NominalSchedule:
    """Price-responsive grid power plan over the scheduling horizon."""

    w_bar: np.ndarray
    u_plan: np.ndarray
    room_temps: np.ndarray
    energy_cost: float
    comfort_penalty: float
    softened: bool = False

    def __post_init__(self):
        self.w_bar = np.asarray(self.w_bar, dtype=float).ravel()
        self.u_plan = np.asarray(self.u_plan, dtype=float).ravel()
        self.room_temps = np.asarray(self.room_temps, dtype=float).ravel()


#: weight on grid-power ramps in the scheduler, relative to the mean energy
#: price (so it scales out of argmin comparisons). Sized so that single-step
#: power dips cost more in ramping than they save in price arbitrage, while
#: sustained multi-hour shifts (two ramps amortized over the whole window)
#: stay essentially free; it also steers corrective action away from
#: bang-bang vertices on degenerate flat-price problems.
SCHEDULE_SMOOTHING_REL = 1.0


def compute_nominal_schedule(model: ThermalModel, x0, price, d_forecast,
                             pv_forecast, comfort_band: tuple[float, float],
                             total_power_cap: float, setpoint: float = 21.0,
                             tradeoff_lambda: float = 0.1,
                             soft_comfort: bool = False,
                             w_prev: float | None = None,
                             max_ramp_w: float | None = None) -> NominalSchedule:
    """Minimize energy cost plus setpoint deviation over the horizon.

    Solves, with T the predicted room temperatures under nominal forecasts,

        min  sum_t price_t * w_t * dt_kwh  +  lambda * sum_t |T_t - setpoint|
        s.t. comfort_lower <= T_t <= comfort_upper
             0 <= u_t <= pv_t,   0 <= w_t,   u_t + w_t <= total_power_cap

    Deviations are encoded with auxiliary variables, plus a small ramp
    penalty on w that regularizes among near-cost-equal plans (flat prices
    make the heat timing degenerate; without it the solver returns
    bang-bang vertices and single-step power dips). When ``w_prev`` is
    given, the first move away from the currently applied grid power is
    penalized like any other ramp, so plan refreshes glide instead of
    coasting for one step. ``max_ramp_w`` imposes a hard per-step slew limit
    on grid power (compressor ramp-rate limit); corrections then spread over
    several steps instead of slamming to the cap and coasting at zero while
    the emitter discharges. With ``soft_comfort`` the band constraints gain
    heavily penalized slack instead of raising.

    Raises:
        ScheduleInfeasibleError: comfort unreachable and soft_comfort off.
    """
    price = np.asarray(price, dtype=float).ravel()
    N = price.size
    pv = np.asarray(pv_forecast, dtype=float).ravel()
    d = np.asarray(d_forecast, dtype=float)
    if d.ndim == 2:
        d = d.ravel()
    if pv.size != N or d.size != model.p * N:
        raise ValueError("forecast lengths must match the price horizon")
    lo, hi = comfort_band
    lifted = lift_dynamics(model, N)
    S = lifted.room_rows()
    n_r = S.shape[0] // N
    const = S @ (lifted.F_x @ np.asarray(x0, dtype=float).ravel()
                 + lifted.F_d @ d)
    Tw = S @ lifted.F_w
    Tu = S @ lifted.F_u

    # variables: w (N), u (N), e (n_r*N deviations), r (ramp aux incl. the
    # first move when w_prev anchors it) [, s (2*n_r*N slack)]
    nT = n_r * N
    nR = (N - 1) + (1 if w_prev is not None else 0)
    num = 2 * N + nT + nR + (2 * nT if soft_comfort else 0)
    off_u, off_e = N, 2 * N
    off_r = 2 * N + nT
    off_s = off_r + nR
    dt_kwh = model.sample_period / 3.6e6  # W -> kWh per step

    c = np.zeros(num)
    c[:N] = price * dt_kwh
    c[off_e:off_e + nT] = tradeoff_lambda
    c[off_r:off_r + nR] = (SCHEDULE_SMOOTHING_REL * dt_kwh
                           * max(float(price.mean()), 0.01))
    if soft_comfort:
        c[off_s:] = SOFT_COMFORT_WEIGHT

    rows, rhs = [], []
    ramp_cap = np.inf if max_ramp_w is None else float(max_ramp_w)
    for t in range(N - 1):
        up = np.zeros(num)
        up[t + 1], up[t], up[off_r + t] = 1.0, -1.0, -1.0
        rows.append(up)
        rhs.append(0.0)
        dn = np.zeros(num)
        dn[t + 1], dn[t], dn[off_r + t] = -1.0, 1.0, -1.0
        rows.append(dn)
        rhs.append(0.0)
    if w_prev is not None:
        up = np.zeros(num)
        up[0], up[off_r + N - 1] = 1.0, -1.0
        rows.append(up)
        rhs.append(float(w_prev))
        dn = np.zeros(num)
        dn[0], dn[off_r + N - 1] = -1.0, -1.0
        rows.append(dn)
        rhs.append(-float(w_prev))

    def temp_row(i, sign):
        # sign * T_i as coefficients over (w, u)
        r = np.zeros(num)
        r[:N] = sign * Tw[i]
        r[off_u:off_u + N] = sign * Tu[i]
        return r

    for i in range(nT):
        upper = temp_row(i, 1.0)
        lower = temp_row(i, -1.0)
        if soft_comfort:
            upper[off_s + i] = -1.0
            lower[off_s + nT + i] = -1.0
        rows.append(upper)
        rhs.append(hi - const[i])
        rows.append(lower)
        rhs.append(const[i] - lo)
        # deviation encoding: e_i >= +/-(T_i - setpoint)
        dev_hi = temp_row(i, 1.0)
        dev_hi[off_e + i] = -1.0
        rows.append(dev_hi)
        rhs.append(setpoint - const[i])
        dev_lo = temp_row(i, -1.0)
        dev_lo[off_e + i] = -1.0
        rows.append(dev_lo)
        rhs.append(const[i] - setpoint)
    for t in range(N):
        cap_row = np.zeros(num)
        cap_row[t] = 1.0
        cap_row[off_u + t] = 1.0
        rows.append(cap_row)
        rhs.append(total_power_cap)

    lb = np.zeros(num)
    ub = np.full(num, np.inf)
    ub[:N] = total_power_cap
    ub[off_u:off_u + N] = pv
    # the aux ramps dominate |delta w|, so capping them enforces the slew limit
    ub[off_r:off_r + nR] = ramp_cap

    sol = solve_lp(LinearProgram(
        objective_coeffs=c, ineq_matrix=np.vstack(rows),
        ineq_rhs=np.asarray(rhs), lower_bounds=lb, upper_bounds=ub))
    if sol.status != "optimal":
        raise ScheduleInfeasibleError(
            "comfort band unreachable under the given forecasts")
    w = sol.primal[:N]
    u = sol.primal[off_u:off_u + N]
    temps = const + Tw @ w + Tu @ u
    energy_cost = float(np.dot(price * dt_kwh, w))
    comfort_penalty = float(tradeoff_lambda * sol.primal[off_e:off_e + nT].sum())
    return NominalSchedule(w_bar=w, u_plan=u, room_temps=temps,
                           energy_cost=energy_cost,
                           comfort_penalty=comfort_penalty,
                           softened=soft_comfort)


@dataclass
class DRRequest:
    """Grid-operator demand-response request answering one assessment.

    The reduction profile must lie in the flexible set advertised by the
    assessment it answers; the advertised amplitudes travel with the request
    so the receiving side can re-validate independently.
    """

    profile_w: np.ndarray
    window_start: str
    window_end: str
    issue_time: str
    gamma1: float
    gamma2: float

    def __post_init__(self):
        self.profile_w = np.asarray(self.profile_w, dtype=float).ravel()
        if np.any(self.profile_w > 0):
            raise ValueError("reduction profile entries must be <= 0")

    @property
    def h(self) -> int:
        return self.profile_w.size

    def to_json(self) -> str:
        return json.dumps({
            "window_start_iso": self.window_start,
            "h": self.h,
            "profile_w": self.profile_w.tolist(),
        })


def request_membership_set(request: DRRequest) -> FlexibilitySet:
    """The advertised flexible set a request claims membership of."""
    return build_flexibility_polytope(request.gamma1, request.gamma2, request.h)


def apply_dr_request(w_bar, request: DRRequest, M) -> np.ndarray:
    """Commit a validated DR reduction into the nominal grid plan.

    Membership is decided by the same polytope predicate that built the
    advertisement; entries outside the placement window stay untouched.

    Raises:
        InfeasibleRequestError: profile outside the advertised set.
    """
    w_bar = np.asarray(w_bar, dtype=float).ravel()
    M = np.asarray(M, dtype=float)
    if M.shape != (w_bar.size, request.h):
        raise ValueError("placement matrix shape mismatch")
    flex = request_membership_set(request)
    if not flex.contains(request.profile_w):
        raise InfeasibleRequestError(
            "DR profile violates the advertised amplitude/ramp limits")
    return w_bar + M @ request.profile_w


@dataclass
class TrackingAction:
    """One 5-minute control decision with its diagnostics."""

    u_w: float
    comfort_slack: float = 0.0
    mode: str = "re-optimize"


def tracking_control_step(model: ThermalModel, x_now, committed_w, d_forecast,
                          pv_now: float, policy: AffinePolicy | None,
                          realized_errors, mode: str = "re-optimize", *,
                          comfort_band: tuple[float, float] = (19.0, 24.0),
                          total_power_cap: float = np.inf,
                          setpoint: float = 21.0,
                          pv_forecast=None,
                          dr_profile=None,
                          window_step: int = 0) -> TrackingAction:
    """RES input for the current sampling instant.

    ``policy`` mode evaluates the certified affine rule nonanticipatively:
    only error entries realized strictly before ``window_step`` are read
    (the matching slice is taken before any arithmetic, so later entries
    cannot perturb the result even in the last bit). ``re-optimize`` mode
    solves a short tracking LP toward the setpoint with the committed grid
    profile frozen; comfort is softened with a large penalty so a cornered
    step is flagged rather than fatal.
    """
    if mode == "policy":
        if policy is None:
            raise ValueError("policy mode requires a certified policy")
        t = window_step
        m, p = policy.m, policy.p
        wt = (np.zeros(policy.h) if dr_profile is None
              else np.asarray(dr_profile, dtype=float).ravel())
        past = np.asarray(realized_errors, dtype=float).ravel()[:t * p]
        u = (policy.v[t * m] + policy.K[t * m] @ wt
             + policy.P[t * m, :t * p] @ past)
        return TrackingAction(u_w=float(u), mode="policy")
    if mode != "re-optimize":
        raise ValueError(f"unknown tracking mode {mode!r}")

    w = np.asarray(committed_w, dtype=float).ravel()
    N = w.size
    d = np.asarray(d_forecast, dtype=float)
    if d.ndim == 2:
        d = d.ravel()
    if d.size != model.p * N:
        raise ValueError("disturbance forecast length mismatch")
    pv = (np.full(N, float(pv_now)) if pv_forecast is None
          else np.asarray(pv_forecast, dtype=float).ravel().copy())
    pv[0] = float(pv_now)
    lo, hi = comfort_band

    lifted = lift_dynamics(model, N)
    S = lifted.room_rows()
    nT = S.shape[0]
    const = S @ (lifted.F_x @ np.asarray(x_now, dtype=float).ravel()
                 + lifted.F_d @ d + lifted.F_w @ w)
    Tu = S @ lifted.F_u

    # variables: u (N), e (nT), slack (2*nT)
    num = N + 3 * nT
    off_e, off_s = N, N + nT
    c = np.zeros(num)
    c[off_e:off_e + nT] = 1.0
    c[off_s:] = SOFT_COMFORT_WEIGHT
    rows, rhs = [], []
    for i in range(nT):
        upper = np.zeros(num)
        upper[:N] = Tu[i]
        upper[off_s + i] = -1.0
        rows.append(upper)
        rhs.append(hi - const[i])
        lower = np.zeros(num)
        lower[:N] = -Tu[i]
        lower[off_s + nT + i] = -1.0
        rows.append(lower)
        rhs.append(const[i] - lo)
        dev_hi = np.zeros(num)
        dev_hi[:N] = Tu[i]
        dev_hi[off_e + i] = -1.0
        rows.append(dev_hi)
        rhs.append(setpoint - const[i])
        dev_lo = np.zeros(num)
        dev_lo[:N] = -Tu[i]
        dev_lo[off_e + i] = -1.0
        rows.append(dev_lo)
        rhs.append(const[i] - setpoint)
    lb = np.zeros(num)
    ub = np.full(num, np.inf)
    # mixed limits folded into bounds: 0 <= u + w <= cap with w frozen
    lb[:N] = np.maximum(0.0, -w)
    ub[:N] = np.minimum(pv, np.maximum(total_power_cap - w, 0.0))
    if np.any(lb[:N] > ub[:N]):
        # committed profile leaves no admissible input; apply the nearest
        # physical action and flag the step instead of aborting
        u_fb = float(np.clip(-w[0], 0.0, pv[0]))
        return TrackingAction(u_w=u_fb, comfort_slack=np.inf,
                              mode="re-optimize")

    sol = solve_lp(LinearProgram(
        objective_coeffs=c, ineq_matrix=np.vstack(rows),
        ineq_rhs=np.asarray(rhs), lower_bounds=lb, upper_bounds=ub))
    if sol.status != "optimal":
        # soft comfort keeps the LP feasible; reaching here means solver failure
        raise ScheduleInfeasibleError("tracking LP failed to solve")
    slack = float(sol.primal[off_s:].max(initial=0.0))
    return TrackingAction(u_w=float(sol.primal[0]), comfort_slack=slack,
                          mode="re-optimize")

"""Builders for the polytopic sets the assessment works with: the flexible
grid-power set, the forecast-error set, and the comfort/input operating
constraints (including the mixed grid+RES power rows).

Row orderings are canonical and documented on each builder, because the dual
reformulation indexes right-hand sides positionally and tests freeze them.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .lpcore import Polytope


class WindowError(ValueError):
    """Flexibility window does not fit inside the horizon."""


@dataclass
class FlexibilitySet:
    """Feasible set of the h-step flexible grid-power adjustment.

    The adjustment profile wt satisfies, for amplitude gamma1 (W) and ramp
    limit gamma2 (W/step):

        -gamma1 <= wt[t] <= 0          t = 0..h-1
        |wt[t+1] - wt[t]| <= gamma2    t = 0..h-2

    H_w / g_w encode this as H_w wt - g_w <= 0 with the canonical row order
    upper amplitude (h), lower amplitude (h), up ramp (h-1), down ramp (h-1);
    g_w entries are 0, gamma1, gamma2 in that pattern. The placement matrix M
    (N x h, one 1 per column at consecutive steps) maps the profile into the
    full horizon and may be attached after construction.
    """

    gamma1: float
    gamma2: float
    h: int
    H_w: np.ndarray
    g_w: np.ndarray
    M: np.ndarray | None = None

    def __post_init__(self):
        if self.gamma1 < 0 or self.gamma2 < 0:
            raise ValueError("gamma1 and gamma2 must be nonnegative")
        if self.h < 1:
            raise ValueError("h must be at least 1")
        self.H_w = np.asarray(self.H_w, dtype=float)
        self.g_w = np.asarray(self.g_w, dtype=float).ravel()
        rows = 4 * self.h - 2
        if self.H_w.shape != (rows, self.h) or self.g_w.shape != (rows,):
            raise ValueError(f"H_w must be {rows} x {self.h} with matching g_w")
        if self.M is not None:
            self.M = np.asarray(self.M, dtype=float)
            _validate_placement(self.M, self.h)

    @property
    def num_rows(self) -> int:
        return self.H_w.shape[0]

    def gamma_pattern(self) -> tuple[np.ndarray, np.ndarray]:
        """Constant 0/1 vectors (s1, s2) with g_w = gamma1*s1 + gamma2*s2."""
        h = self.h
        s1 = np.concatenate([np.zeros(h), np.ones(h), np.zeros(2 * (h - 1))])
        s2 = np.concatenate([np.zeros(2 * h), np.ones(2 * (h - 1))])
        return s1, s2

    def contains(self, profile, tol: float = 1e-9) -> bool:
        profile = np.asarray(profile, dtype=float).ravel()
        if profile.size != self.h:
            return False
        return bool(np.all(self.H_w @ profile - self.g_w <= tol))

    def as_polytope(self) -> Polytope:
        return Polytope(H=self.H_w, g=self.g_w)

    def with_gamma(self, gamma1: float, gamma2: float) -> "FlexibilitySet":
        out = build_flexibility_polytope(gamma1, gamma2, self.h)
        return replace(out, M=self.M)

    def window_start_step(self) -> int:
        if self.M is None:
            raise ValueError("no placement matrix attached")
        return int(np.argmax(self.M[:, 0]))


def build_flexibility_polytope(gamma1: float, gamma2: float, h: int,
                               M: np.ndarray | None = None) -> FlexibilitySet:
    """Construct the (4h-2)-row H-representation of the flexible-power set."""
    if h < 1:
        raise ValueError("h must be at least 1")
    upper = np.eye(h)                      # wt <= 0
    lower = -np.eye(h)                     # -wt <= gamma1
    ramp_up = np.zeros((h - 1, h))         # wt[t+1] - wt[t] <= gamma2
    ramp_dn = np.zeros((h - 1, h))         # wt[t] - wt[t+1] <= gamma2
    for t in range(h - 1):
        ramp_up[t, t], ramp_up[t, t + 1] = -1.0, 1.0
        ramp_dn[t, t], ramp_dn[t, t + 1] = 1.0, -1.0
    H_w = np.vstack([upper, lower, ramp_up, ramp_dn])
    g_w = np.concatenate([
        np.zeros(h),
        np.full(h, float(gamma1)),
        np.full(2 * (h - 1), float(gamma2)),
    ])
    return FlexibilitySet(gamma1=float(gamma1), gamma2=float(gamma2), h=h,
                          H_w=H_w, g_w=g_w, M=M)


def _validate_placement(M: np.ndarray, h: int) -> None:
    if M.ndim != 2 or M.shape[1] != h:
        raise ValueError(f"placement matrix must have {h} columns")
    if not np.all((M == 0.0) | (M == 1.0)):
        raise ValueError("placement matrix must be binary")
    if not np.all(M.sum(axis=0) == 1.0):
        raise ValueError("each placement column must contain exactly one 1")
    rows = np.argmax(M, axis=0)
    if h > 1 and not np.all(np.diff(rows) == 1):
        raise ValueError("placement columns must map to consecutive steps")


def build_placement(N: int, start_step: int, h: int) -> np.ndarray:
    """N x h binary matrix injecting the profile at steps start..start+h-1."""
    if start_step < 0 or h < 1:
        raise ValueError("start_step must be >= 0 and h >= 1")
    if start_step + h > N:
        raise WindowError(
            f"window [{start_step}, {start_step + h}) exceeds horizon {N}")
    M = np.zeros((N, h))
    for j in range(h):
        M[start_step + j, j] = 1.0
    return M


@dataclass
class DisturbanceUncertainty:
    """Box forecast-error set over the stacked horizon, per step per channel.

    ``bounds`` holds the per-step half-widths of each disturbance channel
    (for the bundled building: ambient degC, irradiance W/m2). The stacked
    set {dt : H_d dt - g_d <= 0} uses H_d = [I; -I] over R^(p*N).
    """

    bounds: np.ndarray
    horizon_N: int

    def __post_init__(self):
        self.bounds = np.asarray(self.bounds, dtype=float).ravel()
        if np.any(self.bounds < 0):
            raise ValueError("bounds must be nonnegative")
        if self.horizon_N < 1:
            raise ValueError("horizon must be at least 1")

    @classmethod
    def from_ambient_solar(cls, delta_amb: float, delta_sol: float,
                           N: int) -> "DisturbanceUncertainty":
        return cls(bounds=np.array([delta_amb, delta_sol]), horizon_N=N)

    @property
    def p(self) -> int:
        return self.bounds.size

    @property
    def dim(self) -> int:
        return self.p * self.horizon_N

    @property
    def num_rows(self) -> int:
        return 2 * self.dim

    @property
    def H_d(self) -> np.ndarray:
        eye = np.eye(self.dim)
        return np.vstack([eye, -eye])

    @property
    def g_d(self) -> np.ndarray:
        rep = np.tile(self.bounds, self.horizon_N)
        return np.concatenate([rep, rep])

    def stacked_bounds(self) -> np.ndarray:
        return np.tile(self.bounds, self.horizon_N)

    def contains(self, d_stack, tol: float = 1e-9) -> bool:
        d_stack = np.asarray(d_stack, dtype=float).ravel()
        return bool(np.all(np.abs(d_stack) <= self.stacked_bounds() + tol))

    def as_polytope(self) -> Polytope:
        return Polytope(H=self.H_d, g=self.g_d)


@dataclass
class OperatingConstraints:
    """Comfort band, RES availability, and mixed grid+RES power limits.

    Row orderings:
      G_x: per step k = 1..N and per room component, an upper row
           (T <= comfort_upper) followed by a lower row (-T <= -comfort_lower).
      G_u: the mN rows u <= u_upper, then the mN rows -u <= 0.
      L_u/L_w: N rows u_t + w_t <= cap, then N rows -(u_t + w_t) <= 0.
    """

    comfort_lower: float
    comfort_upper: float
    u_upper: np.ndarray
    total_power_cap: float
    G_x: np.ndarray
    g_x: np.ndarray
    G_u: np.ndarray
    g_u: np.ndarray
    L_u: np.ndarray
    L_w: np.ndarray
    g_uw: np.ndarray

    def __post_init__(self):
        if not self.comfort_lower < self.comfort_upper:
            raise ValueError("comfort_lower must be below comfort_upper")
        self.u_upper = np.asarray(self.u_upper, dtype=float).ravel()

    @property
    def l_x(self) -> int:
        return self.G_x.shape[0]

    @property
    def l_u(self) -> int:
        return self.G_u.shape[0]

    @property
    def l_uw(self) -> int:
        return self.L_u.shape[0]


def build_operating_constraints(comfort_band: tuple[float, float],
                                pv_forecast, total_power_cap: float,
                                N: int, model) -> OperatingConstraints:
    """Assemble the stacked constraint matrices for an N-step horizon.

    ``pv_forecast`` (length N, W) caps the RES input per step; the mixed rows
    bound total heat-pump electric power 0 <= u_t + w_t <= total_power_cap.
    Requires a single RES input channel (m == 1), matching the bundled
    building.
    """
    lo, hi = float(comfort_band[0]), float(comfort_band[1])
    pv = np.asarray(pv_forecast, dtype=float).ravel()
    if pv.size != N:
        raise ValueError(f"pv_forecast must have length {N}")
    if np.any(pv < 0):
        raise ValueError("pv_forecast must be nonnegative")
    if model.m != 1:
        raise ValueError("operating constraints assume a single RES input")

    n = model.n
    C = model.output_matrix()
    n_rooms = C.shape[0]
    S = np.kron(np.eye(N), C)          # room temps of the stacked state

    G_x = np.zeros((2 * n_rooms * N, n * N))
    g_x = np.zeros(2 * n_rooms * N)
    for r in range(n_rooms * N):
        G_x[2 * r] = S[r]
        g_x[2 * r] = hi
        G_x[2 * r + 1] = -S[r]
        g_x[2 * r + 1] = -lo

    eye = np.eye(N)
    G_u = np.vstack([eye, -eye])
    g_u = np.concatenate([pv, np.zeros(N)])

    L_u = np.vstack([eye, -eye])
    L_w = np.vstack([eye, -eye])
    g_uw = np.concatenate([np.full(N, float(total_power_cap)), np.zeros(N)])

    return OperatingConstraints(
        comfort_lower=lo, comfort_upper=hi, u_upper=pv,
        total_power_cap=float(total_power_cap),
        G_x=G_x, g_x=g_x, G_u=G_u, g_u=g_u, L_u=L_u, L_w=L_w, g_uw=g_uw)

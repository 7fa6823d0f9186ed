"""Canonical parameterized 3D hopper.

The model is a SLIP-like impulse hopper: a rigid body with three reaction
wheels, a massless leg of fixed length along the body z axis, ballistic
flight, and an instantaneous stance.  Per hop:

* flight -- ballistic translation plus torque-limited attitude dynamics under
  a quaternion PD law tracking a commanded lean; reaction torque integrates
  into the wheel speeds; touchdown is the event foot_z = 0 descending,
  refined by bisection.
* stance -- velocity reset along the leg axis n: tangential velocity is
  preserved and the takeoff vertical speed is restored to sqrt(2 g h_apex);
  pose and body rates are held for a fixed stance duration while the wheels
  decay under spindown torque.

The hop-to-hop map composes the two.  A closed-form variant assumes the
attitude controller exactly reaches the commanded lean with zero rates and a
nominal flight time; it carries exact analytic Jacobians and is what the
trajectory optimizer consumes.

Reduced coordinates: eta = (lean_x, lean_y, rate_x, rate_y) are the actuated
(orientation) states, z = (p_x, p_y, xdot, ydot) the unactuated (translation)
states, both sampled at the pre-impact instant.  Lean angles are the x/y
components of the attitude rotation vector, so the commanded attitude for a
lean (a, b) is quat_exp([a, b, 0]).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .so3 import (
    quat_canonical,
    quat_conj,
    quat_derivative,
    quat_exp,
    quat_log,
    quat_mul,
    quat_normalize,
    rotate_vector,
)


class NoTouchdown(RuntimeError):
    """The foot never descended to the ground plane (escaping trajectory)."""


class LeanOutOfCone(RuntimeError):
    """Touchdown attitude outside the leg validity cone."""


class LegSingular(RuntimeError):
    """Leg axis too shallow for the stance impulse."""


_EZ = np.array([0.0, 0.0, 1.0])


def _diag(*values) -> np.ndarray:
    return np.diag(np.asarray(values, dtype=float))


@dataclass
class HopperParams:
    """Physical and controller parameters; desk-scale defaults.

    apex_height is the ballistic rise above the takeoff height that the
    stance impulse restores each hop.  It defaults to 0.15 m so that the
    foot-placement loop gain 4*apex_height/leg_length stays below 2, which the
    Raibert heuristic's neutral term requires for stability under the impulse
    stance model.
    """

    mass: float = 2.0
    gravity: float = 9.81
    leg_length: float = 0.4
    apex_height: float = 0.15
    ground_duration: float = 0.12
    body_inertia: np.ndarray = field(default_factory=lambda: _diag(0.02, 0.02, 0.01))
    flywheel_inertia: float = 5e-4
    torque_limit: float = 2.0
    spindown_gain: float = 2e-3
    kp: np.ndarray = field(default_factory=lambda: _diag(30.0, 30.0, 15.0))
    kd: np.ndarray = field(default_factory=lambda: _diag(1.55, 1.55, 0.8))
    max_lean: float = 0.35
    dt: float = 1e-3
    event_tol: float = 1e-8

    def __post_init__(self):
        self.body_inertia = np.atleast_2d(np.asarray(self.body_inertia, dtype=float))
        self.kp = np.atleast_2d(np.asarray(self.kp, dtype=float))
        self.kd = np.atleast_2d(np.asarray(self.kd, dtype=float))
        for name in ("mass", "gravity", "leg_length", "apex_height", "ground_duration",
                     "flywheel_inertia", "torque_limit", "spindown_gain", "max_lean", "dt"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")
        if self.max_lean >= np.pi / 2:
            raise ValueError("max_lean must be below pi/2")

    @property
    def takeoff_speed(self) -> float:
        """Vertical takeoff speed restoring the apex height."""
        return float(np.sqrt(2.0 * self.gravity * self.apex_height))

    @property
    def nominal_flight_time(self) -> float:
        return 2.0 * float(np.sqrt(2.0 * self.apex_height / self.gravity))


@dataclass
class InputBox:
    """Bounds on the commanded pre-impact lean angles (radians)."""

    lower: np.ndarray = field(default_factory=lambda: np.array([-0.2, -0.2]))
    upper: np.ndarray = field(default_factory=lambda: np.array([0.2, 0.2]))

    def __post_init__(self):
        self.lower = np.atleast_1d(np.asarray(self.lower, dtype=float))
        self.upper = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if np.any(self.lower >= self.upper):
            raise ValueError("box lower bounds must be strictly below upper bounds")

    def clip(self, v) -> np.ndarray:
        return np.clip(np.asarray(v, dtype=float), self.lower, self.upper)

    def contains(self, v, tol: float = 1e-12) -> bool:
        v = np.asarray(v, dtype=float)
        return bool(np.all(v >= self.lower - tol) and np.all(v <= self.upper + tol))


@dataclass
class FullState:
    """Hopper pose and velocity: the state of the continuous dynamics."""

    p: np.ndarray                 # body position, world frame [m]
    q: np.ndarray                 # unit quaternion, body to world
    pdot: np.ndarray              # linear velocity, world frame [m/s]
    omega: np.ndarray             # body-frame angular rates [rad/s]
    wheel_speeds: np.ndarray      # flywheel speeds [rad/s]

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.p, self.q, self.pdot, self.omega, self.wheel_speeds])

    @classmethod
    def from_vector(cls, y) -> "FullState":
        y = np.asarray(y, dtype=float)
        return cls(y[0:3].copy(), quat_normalize(y[3:7]), y[7:10].copy(),
                   y[10:13].copy(), y[13:16].copy())

    def copy(self) -> "FullState":
        return FullState.from_vector(self.as_vector())


@dataclass
class PreImpactState:
    """Reduced pre-impact coordinates (eta, z)."""

    eta: np.ndarray  # (lean_x, lean_y, rate_x, rate_y)
    z: np.ndarray    # (p_x, p_y, xdot, ydot)


@dataclass
class DiscreteInput:
    """Commanded lean angles at the next touchdown; the discrete input v_k."""

    lean_command: np.ndarray

    def __post_init__(self):
        self.lean_command = np.atleast_1d(np.asarray(self.lean_command, dtype=float))


def _as_lean(target) -> np.ndarray:
    if isinstance(target, DiscreteInput):
        return target.lean_command
    return np.atleast_1d(np.asarray(target, dtype=float))


def leg_axis(q) -> np.ndarray:
    """Unit vector from foot to body (the body z axis in world frame)."""
    return rotate_vector(q, _EZ)


def foot_height(state: FullState, params: HopperParams) -> float:
    return float(state.p[2] - params.leg_length * leg_axis(state.q)[2])


def attitude_from_lean(lean) -> np.ndarray:
    lean = np.asarray(lean, dtype=float)
    return quat_exp(np.array([lean[0], lean[1], 0.0]))


def pd_attitude_torque(state_q, omega, lean_cmd, params: HopperParams) -> np.ndarray:
    """Saturated quaternion PD torque toward the commanded lean attitude."""
    q_err = quat_canonical(quat_mul(quat_conj(attitude_from_lean(lean_cmd)), state_q))
    u = -params.kp @ quat_log(q_err) - params.kd @ np.asarray(omega, dtype=float)
    return np.clip(u, -params.torque_limit, params.torque_limit)


def _flight_rhs(y, lean_fn, params: HopperParams) -> np.ndarray:
    q = quat_normalize(y[3:7])
    omega = y[10:13]
    u = pd_attitude_torque(q, omega, lean_fn(y), params)
    dy = np.empty(16)
    dy[0:3] = y[7:10]
    dy[3:7] = quat_derivative(q, omega)
    dy[7:10] = (0.0, 0.0, -params.gravity)
    J = params.body_inertia
    dy[10:13] = np.linalg.solve(J, u - np.cross(omega, J @ omega))
    dy[13:16] = -u / params.flywheel_inertia
    return dy


def _rk4_step(y, h, lean_fn, params) -> np.ndarray:
    k1 = _flight_rhs(y, lean_fn, params)
    k2 = _flight_rhs(y + 0.5 * h * k1, lean_fn, params)
    k3 = _flight_rhs(y + 0.5 * h * k2, lean_fn, params)
    k4 = _flight_rhs(y + h * k3, lean_fn, params)
    y_new = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    y_new[3:7] = quat_normalize(y_new[3:7])
    return y_new


def _foot_z(y, params) -> float:
    q = quat_normalize(y[3:7])
    return float(y[2] - params.leg_length * rotate_vector(q, _EZ)[2])


def fly_until_touchdown(
    x0: FullState,
    lean_fn: Callable[[np.ndarray], np.ndarray],
    params: HopperParams,
    dt: Optional[float] = None,
    max_time: Optional[float] = None,
):
    """Integrate the flight phase until the touchdown event.

    ``lean_fn`` maps the packed state vector to the commanded lean, so a
    closed-loop policy can retarget the attitude continuously during flight.
    Returns (trajectory, touchdown, flight_time); the event time is refined by
    bisection to ``params.event_tol`` seconds.
    """
    dt = params.dt if dt is None else float(dt)
    max_time = 4.0 * params.nominal_flight_time if max_time is None else float(max_time)
    y = x0.as_vector()
    t = 0.0
    traj = [FullState.from_vector(y)]
    armed = _foot_z(y, params) > 1e-7
    while t < max_time:
        y_next = _rk4_step(y, dt, lean_fn, params)
        fz = _foot_z(y_next, params)
        if not armed and fz > 1e-7:
            armed = True
        elif armed and fz <= 0.0:
            lo, hi = 0.0, dt
            while hi - lo > params.event_tol:
                mid = 0.5 * (lo + hi)
                if _foot_z(_rk4_step(y, mid, lean_fn, params), params) > 0.0:
                    lo = mid
                else:
                    hi = mid
            tau = 0.5 * (lo + hi)
            y_td = _rk4_step(y, tau, lean_fn, params)
            touchdown = FullState.from_vector(y_td)
            tilt = float(np.arccos(np.clip(leg_axis(touchdown.q)[2], -1.0, 1.0)))
            if tilt > params.max_lean + 1e-9:
                raise LeanOutOfCone(f"touchdown tilt {tilt:.4f} rad exceeds {params.max_lean}")
            traj.append(touchdown)
            return traj, touchdown, t + tau
        y = y_next
        t += dt
        traj.append(FullState.from_vector(y))
    raise NoTouchdown(f"foot never reached the plane within {max_time:.3f} s")


def flight_flow(
    x0: FullState,
    target,
    params: HopperParams,
    dt: Optional[float] = None,
    max_time: Optional[float] = None,
):
    """Flight under a fixed lean command; see :func:`fly_until_touchdown`."""
    lean = _as_lean(target)
    return fly_until_touchdown(x0, lambda y: lean, params, dt=dt, max_time=max_time)


def ground_map(x_td: FullState, params: HopperParams) -> FullState:
    """Stance: leg-axis velocity reset, spindown decay, pose and rates held."""
    n = leg_axis(x_td.q)
    if n[2] < np.cos(params.max_lean) - 1e-12:
        raise LegSingular(f"leg axis n_z = {n[2]:.4f} below cos(max_lean)")
    v_minus = x_td.pdot
    v_tan = v_minus - (v_minus @ n) * n
    s = (params.takeoff_speed - v_tan[2]) / n[2]
    v_plus = v_tan + s * n
    decay = np.exp(-params.spindown_gain * params.ground_duration / params.flywheel_inertia)
    return FullState(
        p=x_td.p.copy(),
        q=x_td.q.copy(),
        pdot=v_plus,
        omega=x_td.omega.copy(),
        wheel_speeds=decay * x_td.wheel_speeds,
    )


def return_map(x_k: FullState, v_k, params: HopperParams,
               dt: Optional[float] = None, max_time: Optional[float] = None):
    """One full hop: stance at the pre-impact state, then flight under v_k.

    Returns (next pre-impact state, flight_time).
    """
    x_to = ground_map(x_k, params)
    _, touchdown, flight_time = flight_flow(x_to, v_k, params, dt=dt, max_time=max_time)
    return touchdown, flight_time


# --- reduced pre-impact coordinates -----------------------------------------


def full_to_reduced(state: FullState) -> PreImpactState:
    """Extract (eta, z) at a pre-impact state."""
    r = quat_log(state.q)
    eta = np.array([r[0], r[1], state.omega[0], state.omega[1]])
    z = np.array([state.p[0], state.p[1], state.pdot[0], state.pdot[1]])
    return PreImpactState(eta, z)


def reduced_to_full(eta, z, params: HopperParams) -> FullState:
    """Nominal pre-impact full state for (eta, z): foot on the plane,
    descending at the nominal speed, wheels at rest."""
    eta = np.asarray(eta, dtype=float)
    z = np.asarray(z, dtype=float)
    q = attitude_from_lean(eta[:2])
    n_z = float(rotate_vector(q, _EZ)[2])
    return FullState(
        p=np.array([z[0], z[1], params.leg_length * n_z]),
        q=q,
        pdot=np.array([z[2], z[3], -params.takeoff_speed]),
        omega=np.array([eta[2], eta[3], 0.0]),
        wheel_speeds=np.zeros(3),
    )


def lift_lean(psi) -> np.ndarray:
    """Embed a lean command into eta coordinates (zero pre-impact rates)."""
    psi = np.asarray(psi, dtype=float)
    return np.array([psi[0], psi[1], 0.0, 0.0])


# --- closed-form hop map and Jacobians ---------------------------------------

_R90 = np.array([[0.0, 1.0], [-1.0, 0.0]])


def _tan_factors(a: float):
    """T = tan(a)/a and G = (d T / d a)/a with series branches at zero."""
    if a < 1e-4:
        a2 = a * a
        return 1.0 + a2 / 3.0 + 2.0 * a2 * a2 / 15.0, 2.0 / 3.0 + 8.0 * a2 / 15.0
    ta = np.tan(a)
    sec2 = 1.0 + ta * ta
    T = ta / a
    G = (a * sec2 - ta) / a ** 3
    return T, G


@dataclass
class CfJacobians:
    """Exact Jacobians of the closed-form hop map."""

    d_eta_d_v: np.ndarray   # 4 x 2
    d_z_d_eta: np.ndarray   # 4 x 4
    d_z_d_z: np.ndarray     # 4 x 4

    def full(self):
        """Assemble (fx, fv) for the stacked state x = (eta, z)."""
        fx = np.zeros((8, 8))
        fx[4:, :4] = self.d_z_d_eta
        fx[4:, 4:] = self.d_z_d_z
        fv = np.zeros((8, 2))
        fv[:4] = self.d_eta_d_v
        return fx, fv


def _cf_guard(theta_norm: float, v, params: HopperParams) -> None:
    if theta_norm > params.max_lean + 1e-12:
        raise LegSingular(f"pre-impact lean {theta_norm:.4f} rad outside the validity cone")
    if v[0] * v[0] + v[1] * v[1] > (params.max_lean + 1e-12) ** 2:
        raise LegSingular("commanded lean outside the validity cone")


def closed_form_return_map(eta, z, v, params: HopperParams):
    """Analytic hop map under perfect flight-phase tracking.

    The attitude controller is assumed to exactly reach lean = v with zero
    rates at the next touchdown, and the flight time is pinned to the nominal
    value, so the unactuated update z_{k+1} depends only on (eta_k, z_k).
    Returns (eta_next, z_next, jacobians).
    """
    eta = np.asarray(eta, dtype=float)
    z = np.asarray(z, dtype=float)
    v = _as_lean(v)
    theta = eta[:2]
    a = float(np.hypot(theta[0], theta[1]))
    _cf_guard(a, v, params)

    v0 = params.takeoff_speed
    tf = params.nominal_flight_time
    kick = 2.0 * v0
    T, G = _tan_factors(a)
    r_theta = np.array([theta[1], -theta[0]])
    v_plus = z[2:] + kick * T * r_theta
    z_next = np.concatenate([z[:2] + tf * v_plus, v_plus])
    eta_next = np.array([v[0], v[1], 0.0, 0.0])

    dvplus_dtheta = kick * (T * _R90 + G * np.outer(r_theta, theta))
    d_z_d_eta = np.zeros((4, 4))
    d_z_d_eta[:2, :2] = tf * dvplus_dtheta
    d_z_d_eta[2:, :2] = dvplus_dtheta
    d_z_d_z = np.eye(4)
    d_z_d_z[:2, 2:] = tf * np.eye(2)
    d_eta_d_v = np.zeros((4, 2))
    d_eta_d_v[:2] = np.eye(2)
    return eta_next, z_next, CfJacobians(d_eta_d_v, d_z_d_eta, d_z_d_z)


class ReducedHopperModel:
    """Closed-form hop dynamics on the stacked state x = (eta, z)."""

    state_dim = 8
    input_dim = 2

    def __init__(self, params: HopperParams):
        self.params = params
        self._kick = 2.0 * params.takeoff_speed
        self._tf = params.nominal_flight_time

    def step(self, x, v):
        # fast path of closed_form_return_map without the Jacobians
        a = float(np.hypot(x[0], x[1]))
        _cf_guard(a, v, self.params)
        T, _ = _tan_factors(a)
        kT = self._kick * T
        vx = x[6] + kT * x[1]
        vy = x[7] - kT * x[0]
        return np.array([v[0], v[1], 0.0, 0.0,
                         x[4] + self._tf * vx, x[5] + self._tf * vy, vx, vy])

    def linearize(self, x, v):
        _, _, jac = closed_form_return_map(x[:4], x[4:], v, self.params)
        return jac.full()

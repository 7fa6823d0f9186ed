"""Closed-loop certification harness.

Everything here runs the *full hybrid* hopper (not the closed-form map used
inside trajectory optimization), so the decay fits, disturbance recoveries and
tracking errors measure what the theory actually claims about the real system:
exponential decay of both the manifold error e_k = eta_k - lift(psi(z_k)) and
the unactuated state z_k, agreement with LQR near the origin, and waypoint
tracking by translating the policy input.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .hopper import (
    FullState,
    HopperParams,
    InputBox,
    LeanOutOfCone,
    LegSingular,
    NoTouchdown,
    full_to_reduced,
    fly_until_touchdown,
    ground_map,
    lift_lean,
    reduced_to_full,
)
from .trajopt import QuadCost, lqr_solve
from .training import InvarianceProblem, _evaluate_batch


class RolloutDiverged(RuntimeError):
    def __init__(self, hop: int, reason: str):
        super().__init__(f"rollout diverged at hop {hop}: {reason}")
        self.hop = hop


class NonPositive(ValueError):
    """Decay fit requested on a series that starts at zero."""


class ConstraintActive(RuntimeError):
    """LQR commands leave the input box even at the minimum radius."""


HOPLOG_COLUMNS = (
    "k", "z1", "z2", "z3", "z4", "eta1", "eta2", "eta3", "eta4",
    "psi1", "psi2", "e1", "e2", "e3", "e4", "v1", "v2", "cost", "flight_time",
)


@dataclass
class HopLog:
    """One hop of a closed-loop rollout, sampled at the pre-impact instant.

    ``z`` is absolute; the policy sees z relative to the active reference, and
    ``psi``/``e`` are computed from that relative input, so
    e = eta - (psi, 0, 0) is recomputable from the stored fields.
    """

    k: int
    z: np.ndarray
    eta: np.ndarray
    psi: np.ndarray
    e: np.ndarray
    v: np.ndarray
    cost: float
    flight_time: float

    def row(self) -> list:
        return [self.k, *self.z, *self.eta, *self.psi, *self.e, *self.v,
                self.cost, self.flight_time]


def write_hoplog_csv(path, logs: Sequence[HopLog]) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(HOPLOG_COLUMNS) + "\n")
        for log in logs:
            fh.write(",".join(repr(float(x)) if isinstance(x, (float, np.floating))
                              else str(x) for x in log.row()) + "\n")


def read_hoplog_csv(path) -> list[HopLog]:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if tuple(header) != HOPLOG_COLUMNS:
            raise ValueError(f"unexpected hop-log header: {header}")
        logs = []
        for line in fh:
            vals = [float(x) for x in line.strip().split(",")]
            logs.append(HopLog(int(vals[0]), np.array(vals[1:5]), np.array(vals[5:9]),
                               np.array(vals[9:11]), np.array(vals[11:15]),
                               np.array(vals[15:17]), vals[17], vals[18]))
    return logs


def _reduced_z(y: np.ndarray) -> np.ndarray:
    # packed state layout: p 0:3, q 3:7, pdot 7:10
    return np.array([y[0], y[1], y[7], y[8]])


def rollout(
    policy,
    x0: FullState,
    n_hops: int,
    params: HopperParams,
    box: InputBox,
    cost: Optional[QuadCost] = None,
    disturbances: Optional[Sequence] = None,
    reference: Optional[tuple] = None,
    k_offset: int = 0,
):
    """Simulate n hops of the full hybrid system under the policy.

    The flight-phase attitude target is re-evaluated continuously from the
    current translational state.  ``disturbances`` is an iterable of
    (hop, dvx, dvy) velocity impulses applied at the pre-impact instant;
    ``reference`` is an optional (p_ref, v_ref) pair subtracted from z before
    the policy sees it.  Returns (logs, final_preimpact_state).
    """
    ref = np.zeros(4)
    if reference is not None:
        ref = np.concatenate([np.asarray(reference[0], float), np.asarray(reference[1], float)])
    kicks = {}
    for item in disturbances or ():
        hop, dvx, dvy = item
        kicks[int(hop)] = np.array([dvx, dvy], dtype=float)

    def lean_fn(y):
        return policy.forward(_reduced_z(y) - ref)

    x = x0.copy()
    logs = []
    for k in range(n_hops):
        if k in kicks:
            x.pdot[:2] += kicks[k]
        red = full_to_reduced(x)
        z_rel = red.z - ref
        psi = policy.forward(z_rel)
        e = red.eta - lift_lean(psi)
        try:
            x_to = ground_map(x, params)
            v_cmd = policy.forward(_reduced_z(x_to.as_vector()) - ref)
            _, x_next, flight_time = fly_until_touchdown(x_to, lean_fn, params)
        except (NoTouchdown, LeanOutOfCone, LegSingular) as exc:
            raise RolloutDiverged(k + k_offset, str(exc)) from exc
        hop_cost = 0.0
        if cost is not None:
            hop_cost = cost.stage(np.concatenate([red.eta, z_rel]), v_cmd)
        logs.append(HopLog(k + k_offset, red.z, red.eta, psi, e, v_cmd,
                           hop_cost, flight_time))
        x = x_next
    return logs, x


@dataclass
class DecayFit:
    """Empirical exponential envelope ||s_k|| <= M * lambda^k."""

    M: float
    lam: float
    residual: float


def fit_decay(series) -> DecayFit:
    """Least-squares decay fit in log space with a hard envelope.

    M is inflated until the bound holds at every sample.  Series are truncated
    at the first zero (treated as converged); a constant series fits lam = 1,
    flagging non-convergence.
    """
    s = np.asarray(series, dtype=float)
    if s.shape[0] < 5:
        raise ValueError("need at least 5 samples for a decay fit")
    if np.any(s < 0.0):
        raise ValueError("norms must be non-negative")
    if s[0] <= 0.0:
        raise NonPositive("series starts at zero")
    nz = np.flatnonzero(s <= 0.0)
    if nz.size:
        s = s[: nz[0]]
    k = np.arange(s.shape[0], dtype=float)
    logs = np.log(s)
    slope, intercept = np.polyfit(k, logs, 1) if s.shape[0] > 1 else (0.0, logs[0])
    if slope > -1e-12:
        slope = 0.0  # non-decaying series snap to lam = 1
    lam = float(np.clip(np.exp(slope), 0.0, 1.0))
    resid = float(np.sqrt(np.mean((logs - (intercept + slope * k)) ** 2)))
    envelope = lam ** k
    M = float(max(1.0, np.exp(intercept), np.max(s / envelope)))
    return DecayFit(M=M, lam=lam, residual=resid)


@dataclass
class ResidualStats:
    mean: float
    max: float
    quantiles: dict
    per_sample: np.ndarray
    skipped: int


def invariance_residual(policy, samples, problem: InvarianceProblem,
                        horizon: int = 10, max_iter: int = 5, tol: float = 1e-9,
                        jobs: int = 1) -> ResidualStats:
    """One-step manifold deviation under optimal control, per held-out sample."""
    _, per_sample, _ = _evaluate_batch(policy, np.asarray(samples, float), problem,
                                       horizon, max_iter, tol, False, jobs)
    valid = per_sample[~np.isnan(per_sample)]
    qs = {q: float(np.quantile(valid, q)) for q in (0.5, 0.9, 0.99)}
    return ResidualStats(mean=float(valid.mean()), max=float(valid.max()),
                         quantiles=qs, per_sample=per_sample,
                         skipped=int(np.isnan(per_sample).sum()))


@dataclass
class LqrAgreement:
    max_deviation: float
    mean_deviation: float
    radius: float
    shrunk: bool
    n_points: int
    points: np.ndarray = None       # (n, 4) grid z values
    v_lqr: np.ndarray = None        # (n, 2) LQR commands at the manifold points
    psi_next: np.ndarray = None     # (n, 2) policy at the successor states


def _ball_grid(radius: float, grid_n: int, dim: int = 4) -> np.ndarray:
    axes = [np.linspace(-radius, radius, grid_n)] * dim
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, dim)
    return pts[np.linalg.norm(pts, axis=1) <= radius + 1e-12]

def lqr_agreement(policy, problem: InvarianceProblem, radius: float = 0.1,
                  grid_n: int = 5, min_radius: float = 1e-3) -> LqrAgreement:
    """Deviation of the policy from the LQR-induced lean command near the origin.

    For each grid point z in the ball, the LQR command at the manifold point
    x = (lift(psi(z)), z) is v = -Kx; under perfect tracking that command is
    the lean realized at the successor state z1, so agreement means
    psi(z1) = -Kx.  The reported deviation is max |psi(z1) - (-Kx)| over the
    grid; it vanishes for an exactly invariant manifold of the linear problem.
    If -Kx leaves the input box inside the ball, the radius shrinks until the
    constraints are inactive (reported in the result).
    """
    d = getattr(problem.model, "state_dim", 8)
    A, B = problem.model.linearize(np.zeros(d), np.zeros(problem.box.lower.shape[0]))
    _, K = lqr_solve(A, B, problem.cost)
    r = float(radius)
    shrunk = False
    while True:
        pts = _ball_grid(r, grid_n)
        xs = np.array([np.concatenate([lift_lean(policy.forward(z)), z]) for z in pts])
        v_lqr = -(K @ xs.T).T
        if np.all(v_lqr >= problem.box.lower - 1e-12) and np.all(v_lqr <= problem.box.upper + 1e-12):
            break
        r *= 0.8
        shrunk = True
        if r < min_radius:
            raise ConstraintActive("LQR command exits the box even at the minimum radius")
    devs = np.empty(pts.shape[0])
    psi_next = np.empty_like(v_lqr)
    for i, (x, v) in enumerate(zip(xs, v_lqr)):
        z1 = problem.model.step(x, v)[problem.eta_dim:]
        psi_next[i] = policy.forward(z1)
        devs[i] = np.max(np.abs(psi_next[i] - v))
    return LqrAgreement(max_deviation=float(devs.max()), mean_deviation=float(devs.mean()),
                        radius=r, shrunk=shrunk, n_points=pts.shape[0],
                        points=pts, v_lqr=v_lqr, psi_next=psi_next)


def waypoint_track(policy, waypoints, params: HopperParams, box: InputBox,
                   cost: Optional[QuadCost] = None, x0: Optional[FullState] = None):
    """Track a waypoint sequence by translating the policy input.

    ``waypoints`` rows are (px, py, vx_ref, vy_ref, hops).  Returns
    (logs, corner_errors) where corner_errors[i] is the position error at the
    end of leg i.
    """
    waypoints = list(waypoints)
    if not waypoints:
        raise ValueError("waypoint list is empty")
    x = x0.copy() if x0 is not None else reduced_to_full(np.zeros(4), np.zeros(4), params)
    logs: list[HopLog] = []
    corner_errors = []
    k = 0
    for px, py, vx, vy, hops in waypoints:
        ref = (np.array([px, py]), np.array([vx, vy]))
        leg_logs, x = rollout(policy, x, int(hops), params, box, cost=cost,
                              reference=ref, k_offset=k)
        k += int(hops)
        logs.extend(leg_logs)
        red = full_to_reduced(x)
        corner_errors.append(float(np.linalg.norm(red.z[:2] - ref[0])))
    return logs, corner_errors


def leg_velocity_stats(leg_logs: Sequence[HopLog], v_ref) -> tuple:
    """Mean and 2-sigma band of the per-hop velocity tracking error."""
    v_ref = np.asarray(v_ref, dtype=float)
    errs = np.array([log.z[2:] - v_ref for log in leg_logs])
    return errs.mean(axis=0), 2.0 * errs.std(axis=0)

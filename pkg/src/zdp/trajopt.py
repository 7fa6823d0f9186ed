"""Discrete-time optimal control.

Three layers:

* :func:`lqr_solve` -- infinite-horizon LQR by Riccati fixed-point iteration.
* :func:`boxed_qp` -- projected-Newton QP with elementwise bounds, used for
  every backward-pass subproblem.
* :func:`ilqr_solve` -- Gauss-Newton iLQR with box input constraints:
  boxed-QP backward pass, backtracking line-searched forward pass, and a
  multiplicative Levenberg schedule on indefinite input Hessians.

Stage cost is ``x' Q x + v' R v`` (no 1/2 factor); the terminal cost defaults
to Q and may be overridden, e.g. with the Riccati matrix of the linearization
to emulate the infinite-horizon problem at a short horizon.

Dynamics objects expose ``step(x, v) -> x_next`` and
``linearize(x, v) -> (fx, fv)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np


class NoConvergence(RuntimeError):
    """Riccati iteration failed to reach a fixed point."""


class InfeasibleInit(ValueError):
    """Initial input sequence violates the box constraints."""


class DivergedRollout(RuntimeError):
    """A rollout produced non-finite state."""


class NotConverged(RuntimeError):
    """Solution sensitivities requested from an unconverged solve."""


_LAMBDA_MIN = 1e-6
_LAMBDA_MAX = 1e6
_LAMBDA_FACTOR = 10.0


@dataclass
class QuadCost:
    """Quadratic stage cost x'Qx + v'Rv with optional terminal weight."""

    Q: np.ndarray
    R: np.ndarray
    terminal: Optional[np.ndarray] = None

    def __post_init__(self):
        self.Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        self.R = np.atleast_2d(np.asarray(self.R, dtype=float))
        for name, M in (("Q", self.Q), ("R", self.R)):
            if not np.allclose(M, M.T, atol=1e-12):
                raise ValueError(f"{name} must be symmetric")
            if np.linalg.eigvalsh(M).min() <= 0.0:
                raise ValueError(f"{name} must be positive definite")
        if self.terminal is not None:
            self.terminal = np.atleast_2d(np.asarray(self.terminal, dtype=float))

    @property
    def Qf(self) -> np.ndarray:
        return self.Q if self.terminal is None else self.terminal

    def stage(self, x, v) -> float:
        return float(x @ self.Q @ x + v @ self.R @ v)

    def final(self, x) -> float:
        return float(x @ self.Qf @ x)

    def trajectory(self, xs, vs) -> float:
        c = sum(self.stage(x, v) for x, v in zip(xs[:-1], vs))
        return c + self.final(xs[-1])


class LinearDynamics:
    """x_{k+1} = A x_k + B v_k, mostly for fixtures and oracles."""

    def __init__(self, A, B):
        self.A = np.atleast_2d(np.asarray(A, dtype=float))
        self.B = np.atleast_2d(np.asarray(B, dtype=float))

    def step(self, x, v):
        return self.A @ x + self.B @ v

    def linearize(self, x, v):
        return self.A, self.B


def lqr_solve(A, B, cost: QuadCost, tol: float = 1e-12, max_iter: int = 200000):
    """Solve the discrete algebraic Riccati equation by fixed-point iteration.

    Returns (P, K) with K = (R + B'PB)^-1 B'PA, so the optimal feedback is
    v = -K x and the closed loop A - BK has spectral radius < 1.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float)
    if B.ndim == 1:
        B = B[:, None]
    Q, R = cost.Q, cost.R
    P = Q.copy()
    for _ in range(max_iter):
        BtP = B.T @ P
        K = np.linalg.solve(R + BtP @ B, BtP @ A)
        P_new = Q + A.T @ P @ (A - B @ K)
        P_new = 0.5 * (P_new + P_new.T)
        if np.max(np.abs(P_new - P)) < tol:
            P = P_new
            break
        P = P_new
    else:
        raise NoConvergence(f"Riccati iteration did not settle in {max_iter} steps")
    K = np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
    if np.max(np.abs(np.linalg.eigvals(A - B @ K))) >= 1.0:
        raise NoConvergence("closed loop is not a contraction; (A, B) unstabilizable?")
    return P, K


@dataclass
class BoxQpResult:
    argmin: np.ndarray
    active_set: np.ndarray          # indices of clamped coordinates
    free_hessian_inverse: np.ndarray  # H_ff^-1 embedded in a c x c matrix
    degraded: bool = False
    iterations: int = 0


def boxed_qp(H, g, lower, upper, x0=None, tol: float = 1e-8, max_iter: int = 100) -> BoxQpResult:
    """Projected-Newton solution of min 0.5 v'Hv + g'v subject to box bounds.

    At exit the free-coordinate gradient is below ``tol`` and clamped
    coordinates have correctly signed gradients; otherwise ``degraded`` is set
    and the best iterate is returned.
    """
    H = np.atleast_2d(np.asarray(H, dtype=float))
    g = np.atleast_1d(np.asarray(g, dtype=float))
    lower = np.atleast_1d(np.asarray(lower, dtype=float))
    upper = np.atleast_1d(np.asarray(upper, dtype=float))
    c = g.shape[0]
    # fast path: the unconstrained minimizer is optimal whenever it is feasible
    x_newton = -np.linalg.solve(H, g)
    if np.all(x_newton >= lower) and np.all(x_newton <= upper):
        return BoxQpResult(argmin=x_newton, active_set=np.empty(0, dtype=int),
                           free_hessian_inverse=np.linalg.inv(H), degraded=False,
                           iterations=1)
    x = np.clip(np.zeros(c) if x0 is None else np.asarray(x0, dtype=float), lower, upper)

    def objective(v):
        return 0.5 * float(v @ H @ v) + float(g @ v)

    value = objective(x)
    free = np.ones(c, dtype=bool)
    it = 0
    for it in range(1, max_iter + 1):
        grad = g + H @ x
        at_lower = (x <= lower + 1e-14) & (grad > 0)
        at_upper = (x >= upper - 1e-14) & (grad < 0)
        free = ~(at_lower | at_upper)
        if not free.any():
            break
        if np.max(np.abs(grad[free])) < tol:
            break
        dx = np.zeros(c)
        dx[free] = -np.linalg.solve(H[np.ix_(free, free)], grad[free])
        # projected backtracking: accept first step with a real decrease
        step, accepted = 1.0, False
        for _ in range(24):
            cand = np.clip(x + step * dx, lower, upper)
            cand_value = objective(cand)
            if cand_value < value - 1e-16 * max(1.0, abs(value)):
                x, value, accepted = cand, cand_value, True
                break
            step *= 0.5
        if not accepted:
            break

    grad = g + H @ x
    at_lower = (x <= lower + 1e-14) & (grad > 0)
    at_upper = (x >= upper - 1e-14) & (grad < 0)
    free = ~(at_lower | at_upper)
    degraded = bool(free.any() and np.max(np.abs(grad[free])) >= tol)
    hinv = np.zeros((c, c))
    if free.any():
        hinv[np.ix_(free, free)] = np.linalg.inv(H[np.ix_(free, free)])
    return BoxQpResult(
        argmin=x,
        active_set=np.flatnonzero(~free),
        free_hessian_inverse=hinv,
        degraded=degraded,
        iterations=it,
    )


@dataclass
class IlqrSolution:
    states: np.ndarray        # (T+1, d)
    inputs: np.ndarray        # (T, c)
    gains_K: np.ndarray       # (T, c, d), feedback with v = vbar - K (x - xbar)
    feedforward_k: np.ndarray  # (T, c)
    q_vv: np.ndarray          # (T, c, c)
    q_vx: np.ndarray          # (T, c, d)
    total_cost: float
    iterations: int           # accepted forward passes
    converged: bool
    free_masks: np.ndarray = field(default=None)  # (T, c) free coordinates at step 0..T-1
    cost_trace: list = field(default_factory=list)  # cost after each accepted pass


def _rollout(dynamics, x0, vs):
    xs = [np.asarray(x0, dtype=float)]
    for v in vs:
        xs.append(np.asarray(dynamics.step(xs[-1], v), dtype=float))
    xs = np.array(xs)
    if not np.all(np.isfinite(xs)):
        raise DivergedRollout("rollout produced non-finite state")
    return xs


def _backward_pass(dynamics, cost: QuadCost, xs, vs, lower, upper, lam):
    T, c = vs.shape
    d = xs.shape[1]
    ks = np.zeros((T, c))
    Ks = np.zeros((T, c, d))          # internal convention: v = vbar + k + K dx
    qvv = np.zeros((T, c, c))
    qvx = np.zeros((T, c, d))
    frees = np.zeros((T, c), dtype=bool)
    Vx = 2.0 * cost.Qf @ xs[T]
    Vxx = 2.0 * cost.Qf
    expected = 0.0
    for t in range(T - 1, -1, -1):
        fx, fv = dynamics.linearize(xs[t], vs[t])
        Qx = 2.0 * cost.Q @ xs[t] + fx.T @ Vx
        Qv = 2.0 * cost.R @ vs[t] + fv.T @ Vx
        Qxx = 2.0 * cost.Q + fx.T @ Vxx @ fx
        Qvv = 2.0 * cost.R + fv.T @ Vxx @ fv
        Qvx = fv.T @ Vxx @ fx
        Qvv_reg = Qvv + lam * np.eye(c)
        try:
            np.linalg.cholesky(0.5 * (Qvv_reg + Qvv_reg.T))
        except np.linalg.LinAlgError:
            return None
        qp = boxed_qp(Qvv_reg, Qv, lower - vs[t], upper - vs[t])
        k = qp.argmin
        K = np.zeros((c, d))
        free = np.ones(c, dtype=bool)
        free[qp.active_set] = False
        if free.any():
            K[free] = -np.linalg.solve(Qvv_reg[np.ix_(free, free)], Qvx[free])
        ks[t], Ks[t], qvv[t], qvx[t], frees[t] = k, K, Qvv, Qvx, free
        expected += float(k @ Qv) + 0.5 * float(k @ Qvv_reg @ k)
        Vx = Qx + K.T @ Qvv_reg @ k + K.T @ Qv + Qvx.T @ k
        Vxx = Qxx + K.T @ Qvv_reg @ K + K.T @ Qvx + Qvx.T @ K
        Vxx = 0.5 * (Vxx + Vxx.T)
    return ks, Ks, qvv, qvx, frees, expected


def _forward_pass(dynamics, cost: QuadCost, xs, vs, ks, Ks, alpha, lower, upper):
    T = vs.shape[0]
    xs_new = np.zeros_like(xs)
    vs_new = np.zeros_like(vs)
    xs_new[0] = xs[0]
    total = 0.0
    for t in range(T):
        v = vs[t] + alpha * ks[t] + Ks[t] @ (xs_new[t] - xs[t])
        v = np.clip(v, lower, upper)
        vs_new[t] = v
        total += cost.stage(xs_new[t], v)
        xs_new[t + 1] = dynamics.step(xs_new[t], v)
        if not np.all(np.isfinite(xs_new[t + 1])):
            return None
    total += cost.final(xs_new[T])
    return xs_new, vs_new, total


def ilqr_solve(
    x0,
    v_init,
    dynamics,
    cost: QuadCost,
    box,
    horizon: Optional[int] = None,
    max_iter: int = 5,
    tol: float = 1e-9,
) -> IlqrSolution:
    """Box-constrained iLQR from ``x0``.

    ``box`` is anything with ``lower``/``upper`` arrays (or a (lower, upper)
    pair).  Cost is monotone non-increasing over accepted iterations;
    convergence is declared when the accepted improvement (or the expected
    improvement of a backward pass) drops below ``tol``.
    """
    lower, upper = (box.lower, box.upper) if hasattr(box, "lower") else box
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    x0 = np.asarray(x0, dtype=float)
    vs = np.array(v_init, dtype=float)
    if horizon is not None and vs.shape[0] != horizon:
        raise ValueError(f"v_init has {vs.shape[0]} steps, horizon is {horizon}")
    if np.any(vs < lower - 1e-12) or np.any(vs > upper + 1e-12):
        raise InfeasibleInit("initial input sequence violates the box")

    xs = _rollout(dynamics, x0, vs)
    total = cost.trajectory(xs, vs)
    cost_trace = [total]
    lam = 0.0
    accepted = 0
    converged = False
    bp = None
    bp_current = False  # whether bp matches (xs, vs) with lam == 0
    for _ in range(max_iter):
        bp = _backward_pass(dynamics, cost, xs, vs, lower, upper, lam)
        bp_current = bp is not None and lam == 0.0
        if bp is None:
            lam = max(lam, _LAMBDA_MIN) * _LAMBDA_FACTOR
            if lam > _LAMBDA_MAX:
                break
            continue
        ks, Ks, _, _, _, expected = bp
        if abs(expected) < tol:
            converged = True
            break
        improved = None
        for alpha in 2.0 ** -np.arange(11):
            cand = _forward_pass(dynamics, cost, xs, vs, ks, Ks, alpha, lower, upper)
            if cand is not None and cand[2] < total - 1e-14:
                improved = cand
                break
        if improved is None:
            lam = max(lam, _LAMBDA_MIN) * _LAMBDA_FACTOR
            if lam > _LAMBDA_MAX:
                break
            continue
        xs_new, vs_new, total_new = improved
        decrease = total - total_new
        xs, vs, total = xs_new, vs_new, total_new
        cost_trace.append(total)
        accepted += 1
        bp_current = False
        lam = 0.0 if lam <= _LAMBDA_MIN else lam / _LAMBDA_FACTOR
        if decrease < tol:
            converged = True
            break

    # expansions at the final trajectory, so gains/Q-blocks match the solution
    final_bp = bp if bp_current else _backward_pass(dynamics, cost, xs, vs, lower, upper, 0.0)
    if final_bp is None:
        final_bp = _backward_pass(dynamics, cost, xs, vs, lower, upper, max(lam, _LAMBDA_MIN))
    if final_bp is None:
        final_bp = bp
    ks, Ks, qvv, qvx, frees, _ = final_bp
    return IlqrSolution(
        states=xs,
        inputs=vs,
        gains_K=-Ks,
        feedforward_k=ks,
        q_vv=qvv,
        q_vx=qvx,
        total_cost=total,
        iterations=accepted,
        converged=converged,
        free_masks=frees,
        cost_trace=cost_trace,
    )


def solution_gradient(sol: IlqrSolution, strict: bool = True) -> np.ndarray:
    """Sensitivity dv0*/dx0 of the first optimal input to the initial state.

    Equals minus the step-0 feedback matrix; rows of inputs clamped at the box
    are zero (the clamped coordinates are locally insensitive to the state).
    """
    if strict and not sol.converged:
        raise NotConverged("iLQR solution did not converge; gradient unavailable")
    return -sol.gains_K[0]

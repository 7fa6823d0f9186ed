"""Shared fixtures: the linear invariance fixture built from lqr_solve.

The fixture linearizes the closed-form hop model at the origin, solves the
infinite-horizon LQR, and extracts the slow invariant subspace of the closed
loop as a graph eta = Psi z.  A linear policy psi(z) = Psi[:2] z is then
exactly invariant under the optimal controller, which gives analytic oracles
for the invariance loss, its gradient, and the LQR-agreement check.
"""

import numpy as np

from zdp.hopper import HopperParams, InputBox
from zdp.policy import LinearPolicy
from zdp.trajopt import LinearDynamics, QuadCost, lqr_solve
from zdp.training import InvarianceProblem, make_hopper_problem


def default_cost_matrices():
    Q = np.diag([1.0, 1.0, 1.0, 1.0, 10.0, 10.0, 1.0, 1.0])
    R = np.eye(2)
    return Q, R


def invariant_subspace(A, B, cost: QuadCost):
    """(Psi, K, P): graph map of the slow closed-loop invariant subspace."""
    P, K = lqr_solve(A, B, cost)
    acl = A - B @ K
    evals, evecs = np.linalg.eig(acl)
    order = np.argsort(-np.abs(evals))[:4]
    cols = []
    used = set()
    for j in order:
        if j in used:
            continue
        lam = evals[j]
        if abs(lam.imag) > 1e-12:
            cols += [evecs[:, j].real, evecs[:, j].imag]
            for j2 in order:
                if j2 != j and abs(evals[j2] - lam.conjugate()) < 1e-9:
                    used.add(j2)
        else:
            cols.append(evecs[:, j].real)
        used.add(j)
    V = np.array(cols).T[:, :4]
    Psi = V[:4] @ np.linalg.inv(V[4:])
    return Psi, K, P


def linear_fixture(params: HopperParams = None):
    """(problem, invariant_policy, Psi, K) for the linearized hop model.

    The terminal cost is the Riccati matrix, so the finite-horizon optimum
    coincides with the stationary LQR and the fixture policy attains zero
    invariance loss.
    """
    params = params or HopperParams()
    base = make_hopper_problem(params, InputBox())
    A, B = base.model.linearize(np.zeros(8), np.zeros(2))
    Q, R = default_cost_matrices()
    cost = QuadCost(Q, R)
    Psi, K, P = invariant_subspace(A, B, cost)
    problem = InvarianceProblem(
        model=LinearDynamics(A, B),
        cost=QuadCost(Q, R, terminal=P),
        box=InputBox(lower=[-50.0, -50.0], upper=[50.0, 50.0]),
        warm_start=None,
    )
    return problem, LinearPolicy(Psi[:2].copy()), Psi, K


def policy_rollout_cost(policy, x0, problem: InvarianceProblem, horizon: int):
    """Cost of rolling the closed-form model under the policy itself.

    Uses the no-delay convention of the continuous-tracking implementation:
    the input applied over hop t is the policy evaluated at the successor
    unactuated state (which does not depend on that input).
    """
    x = np.asarray(x0, dtype=float)
    total = 0.0
    for _ in range(horizon):
        z_next = problem.model.step(x, np.zeros(problem.box.lower.shape[0]))[problem.eta_dim:]
        v = problem.box.clip(policy.forward(z_next))
        total += problem.cost.stage(x, v)
        x = problem.model.step(x, v)
    return total + problem.cost.final(x), x

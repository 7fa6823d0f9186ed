"""Monte Carlo invariance training of the lean-command policy.

Each step samples unactuated states z uniformly, lifts them onto the current
manifold as x0 = (psi(z), 0, z), solves box-constrained iLQR from x0, advances
one hop to (eta1*, z1*), and descends the invariance loss

    mean_z || eta1*  -  lift(psi(z1*)) ||^2 .

The gradient treats the iLQR solution as exact: the only sensitivity of the
optimal input to the parameters flows through dv0*/dx0 (the step-0 feedback
matrix), combined with the hop-map Jacobians and the policy's own forward and
reverse passes.  The optimizer never differentiates through iLQR iterations.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .hopper import HopperParams, InputBox, ReducedHopperModel
from .policy import RaibertParams, RaibertPolicy
from .trajopt import DivergedRollout, QuadCost, ilqr_solve, lqr_solve, solution_gradient


class TrainingAborted(RuntimeError):
    """Too many iLQR solves diverged within a single batch."""


@dataclass
class TrainConfig:
    batch_size: int = 30
    learning_rate: float = 1e-3
    num_steps: int = 1000
    z_lower: np.ndarray = field(default_factory=lambda: -np.array([1.1, 1.1, 1.6, 1.6]))
    z_upper: np.ndarray = field(default_factory=lambda: np.array([1.1, 1.1, 1.6, 1.6]))
    horizon: int = 10
    ilqr_max_iter: int = 5
    ilqr_tol: float = 1e-9
    optimizer: str = "adam"        # "adam" or "sgd"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    jobs: int = 1
    checkpoint_every: int = 0

    def __post_init__(self):
        self.z_lower = np.atleast_1d(np.asarray(self.z_lower, dtype=float))
        self.z_upper = np.atleast_1d(np.asarray(self.z_upper, dtype=float))
        if np.any(self.z_lower > self.z_upper):
            raise ValueError("sample bounds must satisfy lower <= upper")
        if self.batch_size < 1 or self.num_steps < 0 or self.learning_rate < 0:
            raise ValueError("batch size, step count and rate must be non-negative")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class TrainRecord:
    step: int
    loss: float
    grad_norm: float
    skipped: int
    wall_ms: int


@dataclass
class InvarianceProblem:
    """Dynamics, cost and warm start shared by all loss evaluations."""

    model: object                 # step(x, v) / linearize(x, v)
    cost: QuadCost
    box: InputBox
    warm_start: Optional[object] = None   # policy-like, .forward(z) -> v
    eta_dim: int = 4
    out_dim: int = 2


def make_hopper_problem(
    params: HopperParams,
    box: InputBox,
    raibert_params: Optional[RaibertParams] = None,
    q_eta: Sequence[float] = (1.0, 1.0, 1.0, 1.0),
    q_z: Sequence[float] = (10.0, 10.0, 1.0, 1.0),
    r: Sequence[float] = (1.0, 1.0),
    terminal: str = "riccati",
) -> InvarianceProblem:
    """Standard training problem on the closed-form hop model.

    ``terminal="riccati"`` sets the terminal weight to the Riccati matrix of
    the origin linearization, which makes the short horizon behave like the
    infinite-horizon problem; ``"stage"`` reuses Q.
    """
    model = ReducedHopperModel(params)
    Q = np.diag(np.concatenate([np.asarray(q_eta, float), np.asarray(q_z, float)]))
    R = np.diag(np.asarray(r, float))
    cost = QuadCost(Q, R)
    if terminal == "riccati":
        A, B = model.linearize(np.zeros(8), np.zeros(2))
        P, _ = lqr_solve(A, B, cost)
        cost = QuadCost(Q, R, terminal=P)
    elif terminal != "stage":
        raise ValueError(f"unknown terminal mode {terminal!r}")
    warm = RaibertPolicy(raibert_params or RaibertParams(), params, box)
    return InvarianceProblem(model=model, cost=cost, box=box, warm_start=warm)


def sample_batch(lower, upper, n: int, rng: np.random.Generator) -> np.ndarray:
    """n i.i.d. uniform samples in the box; reproducible under the rng seed."""
    lower = np.atleast_1d(np.asarray(lower, dtype=float))
    upper = np.atleast_1d(np.asarray(upper, dtype=float))
    return rng.uniform(lower, upper, size=(n, lower.shape[0]))


def _lift(psi, eta_dim: int) -> np.ndarray:
    out = np.zeros(eta_dim)
    out[: psi.shape[0]] = psi
    return out


def _warm_inputs(problem: InvarianceProblem, x0: np.ndarray, horizon: int) -> np.ndarray:
    """Initial input sequence from rolling the warm-start policy."""
    c = problem.box.lower.shape[0]
    x = x0
    vs = np.zeros((horizon, c))
    for t in range(horizon):
        if problem.warm_start is not None:
            vs[t] = problem.box.clip(problem.warm_start.forward(x[problem.eta_dim:]))
        x = problem.model.step(x, vs[t])
        if not np.all(np.isfinite(x)):
            vs[t:] = 0.0
            break
    return vs


def _sample_terms(policy, z, problem: InvarianceProblem, horizon: int,
                  max_iter: int, tol: float, want_grad: bool):
    """Loss (and optionally flat gradient) of one Monte Carlo sample.

    Returns None when the iLQR rollout diverges; the caller records a skip.
    """
    z = np.asarray(z, dtype=float)
    psi0 = policy.forward(z)
    x0 = np.concatenate([_lift(psi0, problem.eta_dim), z])
    try:
        vs0 = _warm_inputs(problem, x0, horizon)
        sol = ilqr_solve(x0, vs0, problem.model, problem.cost, problem.box,
                         max_iter=max_iter, tol=tol)
    except DivergedRollout:
        return None
    x1 = sol.states[1]
    eta1, z1 = x1[: problem.eta_dim], x1[problem.eta_dim:]
    psi1 = policy.forward(z1)
    e = eta1 - _lift(psi1, problem.eta_dim)
    loss = float(e @ e)
    if not want_grad:
        return loss, None
    out_dim = psi0.shape[0]
    G = solution_gradient(sol, strict=False)                 # dv0*/dx0
    fx, fv = problem.model.linearize(x0, sol.inputs[0])
    dx1_dx0 = fx + fv @ G
    dl_deta1 = 2.0 * e
    dl_dpsi1 = -2.0 * e[:out_dim]
    g1, dl_dz1 = policy.backward(z1, dl_dpsi1)
    dl_dx0 = dl_deta1 @ dx1_dx0[: problem.eta_dim] + dl_dz1 @ dx1_dx0[problem.eta_dim:]
    g0, _ = policy.backward(z, dl_dx0[:out_dim])
    return loss, g0 + g1


def _worker(payload):
    policy, z, problem, horizon, max_iter, tol, want_grad = payload
    return _sample_terms(policy, z, problem, horizon, max_iter, tol, want_grad)


def _evaluate_batch(policy, z_batch, problem, horizon, max_iter, tol, want_grad, jobs):
    payloads = [(policy, z, problem, horizon, max_iter, tol, want_grad) for z in z_batch]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_worker, payloads, chunksize=max(1, len(payloads) // jobs)))
    else:
        results = [_worker(p) for p in payloads]
    # reduce in sample order so parallel and serial runs agree bit for bit
    per_sample = np.full(len(z_batch), np.nan)
    grad_sum = None
    for i, res in enumerate(results):
        if res is None:
            continue
        loss, g = res
        per_sample[i] = loss
        if want_grad:
            grad_sum = g if grad_sum is None else grad_sum + g
    valid = ~np.isnan(per_sample)
    mean = float(per_sample[valid].mean()) if valid.any() else np.nan
    grad = None
    if want_grad:
        if grad_sum is None:
            grad = np.zeros_like(policy.get_flat())
        else:
            grad = grad_sum / max(1, int(valid.sum()))
    return mean, per_sample, grad


def invariance_loss(policy, z_batch, problem: InvarianceProblem,
                    horizon: int = 10, max_iter: int = 5, tol: float = 1e-9,
                    jobs: int = 1):
    """Mean and per-sample invariance loss; skipped samples are NaN."""
    mean, per_sample, _ = _evaluate_batch(policy, z_batch, problem, horizon,
                                          max_iter, tol, False, jobs)
    return mean, per_sample


def loss_gradient(policy, z_batch, problem: InvarianceProblem,
                  horizon: int = 10, max_iter: int = 5, tol: float = 1e-9,
                  jobs: int = 1):
    """Flat parameter gradient of the batch-mean loss, plus the loss values."""
    mean, per_sample, grad = _evaluate_batch(policy, z_batch, problem, horizon,
                                             max_iter, tol, True, jobs)
    return grad, mean, per_sample


class Adam:
    def __init__(self, size: int, rate: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.rate, self.beta1, self.beta2, self.eps = rate, beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, w, g):
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * g
        self.v = self.beta2 * self.v + (1 - self.beta2) * g * g
        mh = self.m / (1 - self.beta1 ** self.t)
        vh = self.v / (1 - self.beta2 ** self.t)
        return w - self.rate * mh / (np.sqrt(vh) + self.eps)


class Sgd:
    def __init__(self, rate: float):
        self.rate = rate

    def step(self, w, g):
        return w - self.rate * g


def train(policy, config: TrainConfig, problem: InvarianceProblem,
          checkpoint_fn: Optional[Callable] = None):
    """Run the Monte Carlo training loop; returns (policy, records).

    Aborts with :class:`TrainingAborted` if more than half of a batch's iLQR
    solves diverge.  With ``num_steps=0`` the policy is returned untouched.
    """
    rng = np.random.default_rng(config.seed)
    w = policy.get_flat()
    if config.optimizer == "adam":
        opt = Adam(w.size, config.learning_rate, config.beta1, config.beta2, config.adam_eps)
    else:
        opt = Sgd(config.learning_rate)
    records = []
    for step in range(config.num_steps):
        t0 = time.perf_counter()
        zb = sample_batch(config.z_lower, config.z_upper, config.batch_size, rng)
        grad, loss, per_sample = loss_gradient(
            policy, zb, problem, config.horizon, config.ilqr_max_iter,
            config.ilqr_tol, jobs=config.jobs)
        skipped = int(np.isnan(per_sample).sum())
        if 2 * skipped > config.batch_size:
            raise TrainingAborted(
                f"step {step}: {skipped}/{config.batch_size} iLQR solves diverged; "
                "shrink the sampling box or loosen the input box")
        w = opt.step(w, grad)
        policy.set_flat(w)
        wall_ms = int(round(1000.0 * (time.perf_counter() - t0)))
        records.append(TrainRecord(step, loss, float(np.linalg.norm(grad)), skipped, wall_ms))
        if checkpoint_fn and config.checkpoint_every > 0 and (step + 1) % config.checkpoint_every == 0:
            checkpoint_fn(step, policy)
    return policy, records


def write_train_log(path, records: Sequence[TrainRecord]) -> None:
    """Training log CSV: (step, loss, grad_norm, skipped, wall_ms)."""
    with open(path, "w") as fh:
        fh.write("step,loss,grad_norm,skipped,wall_ms\n")
        for r in records:
            fh.write(f"{r.step},{r.loss!r},{r.grad_norm!r},{r.skipped},{r.wall_ms}\n")


def refinement_phases() -> list:
    """Fixed refinement schedule run after the full-box phase.

    A low-rate full-box polish sharpens the manifold at large states (leg
    transitions evaluate the policy there), then tighter boxes at decreasing
    rates pin the behavior near the equilibrium: uniform sampling alone leaves
    the learned manifold's fixed point a few millimetres off the origin, which
    flattens long decay fits.  750 batch-30 steps in total.
    """
    full = np.array([1.1, 1.1, 1.6, 1.6])
    phases = []
    for scale, rate, seed in ((full, 3e-4, 300), (full, 1e-4, 301),
                              (0.3 * np.ones(4), 2e-4, 501),
                              (0.08 * np.ones(4), 1e-4, 900),
                              (0.08 * np.ones(4), 5e-5, 901)):
        phases.append(TrainConfig(batch_size=30, learning_rate=rate, num_steps=150,
                                  seed=seed, z_lower=-scale, z_upper=scale))
    return phases


def run_default_curriculum(policy, problem: InvarianceProblem, heldout,
                           stop_factor: float = 20.0, chunk_steps: int = 100,
                           min_chunks: int = 4, max_chunks: int = 8, jobs: int = 1):
    """Full-box training until the held-out loss drops ``stop_factor``-fold
    (at least ``min_chunks`` chunks, so the box boundary gets polished), then
    the fixed refinement phases.  Returns (policy, records, trace).

    ``trace`` holds (cumulative_steps, held-out mean loss) pairs, starting with
    the untrained baseline at step 0.
    """
    heldout = np.asarray(heldout, dtype=float)

    def held_mean():
        mean, _ = invariance_loss(policy, heldout, problem, jobs=jobs)
        return mean

    baseline = held_mean()
    trace = [(0, baseline)]
    records = []
    steps = 0
    for i in range(max_chunks):
        cfg = TrainConfig(batch_size=30, learning_rate=1e-3, num_steps=chunk_steps,
                          seed=100 + i, jobs=jobs)
        policy, recs = train(policy, cfg, problem)
        records += recs
        steps += len(recs)
        mean = held_mean()
        trace.append((steps, mean))
        if mean < baseline / stop_factor and i + 1 >= min_chunks:
            break
    for cfg in refinement_phases():
        cfg.jobs = jobs
        policy, recs = train(policy, cfg, problem)
        records += recs
        steps += len(recs)
    trace.append((steps, held_mean()))
    return policy, records, trace

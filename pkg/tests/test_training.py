import numpy as np
import pytest

from helpers import linear_fixture
from zdp.hopper import HopperParams, InputBox
from zdp.policy import LinearPolicy, NetPolicy, RaibertParams, init_policy, pretrain
from zdp.trajopt import QuadCost
from zdp.training import (
    InvarianceProblem,
    TrainConfig,
    TrainingAborted,
    invariance_loss,
    loss_gradient,
    make_hopper_problem,
    sample_batch,
    train,
    write_train_log,
)


# --- sampling -------------------------------------------------------------------


def test_sample_batch_collapsed_bounds():
    rng = np.random.default_rng(0)
    pt = np.array([0.1, -0.2, 0.3, 0.4])
    zs = sample_batch(pt, pt, 10, rng)
    assert np.all(zs == pt)


def test_sample_batch_mean_near_center():
    rng = np.random.default_rng(1)
    lo, hi = -np.ones(4), np.ones(4)
    zs = sample_batch(lo, hi, 10000, rng)
    sigma = (hi - lo) / np.sqrt(12.0)
    assert np.all(np.abs(zs.mean(axis=0)) < 3 * sigma / np.sqrt(10000))


def test_sample_batch_seed_determinism():
    a = sample_batch(-np.ones(4), np.ones(4), 50, np.random.default_rng(7))
    b = sample_batch(-np.ones(4), np.ones(4), 50, np.random.default_rng(7))
    assert np.array_equal(a, b)


# --- invariance loss on the linear fixture ----------------------------------------


@pytest.fixture(scope="module")
def fixture():
    return linear_fixture()


def test_invariant_policy_has_zero_loss(fixture):
    problem, invariant, _, _ = fixture
    rng = np.random.default_rng(2)
    zb = rng.uniform(-0.5, 0.5, size=(20, 4))
    mean, per = invariance_loss(invariant, zb, problem, horizon=10, max_iter=30, tol=1e-13)
    assert mean < 1e-10
    assert np.nanmax(per) < 1e-10


def test_loss_nonnegative(fixture):
    problem, _, Psi, _ = fixture
    rng = np.random.default_rng(3)
    policy = LinearPolicy(Psi[:2] + 0.1 * rng.normal(size=(2, 4)))
    zb = rng.uniform(-0.5, 0.5, size=(10, 4))
    mean, per = invariance_loss(policy, zb, problem)
    assert mean >= 0.0 and np.nanmin(per) >= 0.0


def test_loss_quadratic_in_perturbation(fixture):
    problem, _, Psi, _ = fixture
    rng = np.random.default_rng(4)
    direction = rng.normal(size=(2, 4))
    direction /= np.linalg.norm(direction)
    zb = rng.uniform(-0.5, 0.5, size=(10, 4))
    losses = []
    for delta in (1e-3, 1e-2, 1e-1):
        policy = LinearPolicy(Psi[:2] + delta * direction)
        mean, _ = invariance_loss(policy, zb, problem, horizon=10, max_iter=30, tol=1e-13)
        losses.append(mean)
    # leading order is quadratic (log-log slope 2); the perturbation also
    # shifts z1*, contributing a small higher-order term
    slope_a = np.log10(losses[1] / losses[0])
    slope_b = np.log10(losses[2] / losses[1])
    assert 1.9 < slope_a < 2.1
    assert 1.9 < slope_b < 2.1


def test_loss_batch_permutation_invariant(fixture):
    problem, _, Psi, _ = fixture
    policy = LinearPolicy(Psi[:2] + 0.05)
    rng = np.random.default_rng(5)
    zb = rng.uniform(-0.5, 0.5, size=(16, 4))
    mean_a, _ = invariance_loss(policy, zb, problem)
    mean_b, _ = invariance_loss(policy, zb[::-1].copy(), problem)
    assert mean_a == pytest.approx(mean_b, abs=1e-12)


# --- gradients ---------------------------------------------------------------------


def test_gradient_zero_at_invariant_policy(fixture):
    problem, invariant, _, _ = fixture
    rng = np.random.default_rng(6)
    zb = rng.uniform(-0.5, 0.5, size=(8, 4))
    grad, mean, _ = loss_gradient(invariant, zb, problem, horizon=10, max_iter=30, tol=1e-13)
    assert mean < 1e-10
    assert np.linalg.norm(grad) < 1e-8


def test_gradient_deterministic(fixture):
    problem, _, Psi, _ = fixture
    policy = LinearPolicy(Psi[:2] + 0.02)
    zb = sample_batch(-np.ones(4) * 0.5, np.ones(4) * 0.5, 6, np.random.default_rng(8))
    g1, _, _ = loss_gradient(policy, zb, problem)
    g2, _, _ = loss_gradient(policy, zb, problem)
    assert np.array_equal(g1, g2)


def test_gradient_matches_finite_differences_linear(fixture):
    problem, _, Psi, _ = fixture
    rng = np.random.default_rng(9)
    policy = LinearPolicy(Psi[:2] + 0.05 * rng.normal(size=(2, 4)))
    zb = rng.uniform(-0.4, 0.4, size=(4, 4))
    grad, _, _ = loss_gradient(policy, zb, problem, horizon=10, max_iter=40, tol=1e-13)
    flat0 = policy.get_flat()
    eps = 1e-6
    for idx in range(flat0.size):
        d = np.zeros(flat0.size)
        d[idx] = eps
        up, dn = LinearPolicy(Psi[:2]), LinearPolicy(Psi[:2])
        up.set_flat(flat0 + d)
        dn.set_flat(flat0 - d)
        lu, _ = invariance_loss(up, zb, problem, horizon=10, max_iter=40, tol=1e-13)
        ld, _ = invariance_loss(dn, zb, problem, horizon=10, max_iter=40, tol=1e-13)
        fd = (lu - ld) / (2 * eps)
        assert abs(grad[idx] - fd) / max(1e-8, abs(fd)) < 1e-4


def probe_loss_gradient_fd(policy_ctor, params, zb, problem, n_probes, rng,
                           max_iter=60, tol=1e-13):
    """Worst relative error of the chain gradient against central differences."""
    policy = policy_ctor(params)
    grad, _, _ = loss_gradient(policy, zb, problem, horizon=10, max_iter=max_iter, tol=tol)
    flat0 = policy.get_flat()
    eps = 1e-6
    scale = np.median(np.abs(grad[np.abs(grad) > 0]))
    worst, checked = 0.0, 0
    for idx in rng.permutation(flat0.size)[:n_probes]:
        d = np.zeros(flat0.size)
        d[idx] = eps
        up, dn = policy_ctor(params), policy_ctor(params)
        up.set_flat(flat0 + d)
        dn.set_flat(flat0 - d)
        lu, _ = invariance_loss(up, zb, problem, horizon=10, max_iter=max_iter, tol=tol)
        ld, _ = invariance_loss(dn, zb, problem, horizon=10, max_iter=max_iter, tol=tol)
        fd = (lu - ld) / (2 * eps)
        if abs(fd) < 1e-3 * scale and abs(grad[idx]) < 1e-3 * scale:
            continue
        worst = max(worst, abs(grad[idx] - fd) / max(abs(fd), abs(grad[idx])))
        checked += 1
    return worst, checked


def test_gradient_matches_finite_differences_net(fixture):
    # the net on the linearized hop model: the feedback-matrix gradient is
    # exact there, so any mismatch is a chain-rule wiring error
    lin, _, _, _ = fixture
    box = InputBox()
    problem = InvarianceProblem(model=lin.model, cost=lin.cost, box=box, warm_start=None)
    params = pretrain(init_policy(4, 2, 8, box, seed=0), RaibertParams(), HopperParams(),
                      -np.ones(4), np.ones(4), steps=2000, rate=2e-3, seed=0,
                      target_mse=5e-4)
    rng = np.random.default_rng(10)
    zb = rng.uniform(-0.3, 0.3, size=(3, 4))
    worst, checked = probe_loss_gradient_fd(NetPolicy, params, zb, problem, 20, rng)
    assert checked >= 10
    assert worst < 1e-3


def test_gradient_near_origin_hopper_net():
    # on the true hop map the feedback-matrix gradient drops second-order
    # dynamics terms; near the origin they are negligible
    hp = HopperParams()
    box = InputBox()
    problem = make_hopper_problem(hp, box)
    params = pretrain(init_policy(4, 2, 8, box, seed=0), RaibertParams(), hp,
                      -np.ones(4), np.ones(4), steps=2000, rate=2e-3, seed=0,
                      target_mse=5e-4)
    rng = np.random.default_rng(11)
    zb = rng.uniform(-0.1, 0.1, size=(3, 4))
    worst, checked = probe_loss_gradient_fd(NetPolicy, params, zb, problem, 20, rng)
    assert checked >= 10
    assert worst < 5e-3


# --- training loop -----------------------------------------------------------------


def test_train_zero_steps_unchanged(fixture):
    problem, _, Psi, _ = fixture
    policy = LinearPolicy(Psi[:2] + 0.1)
    before = policy.get_flat().copy()
    cfg = TrainConfig(num_steps=0, z_lower=-0.5 * np.ones(4), z_upper=0.5 * np.ones(4))
    policy, records = train(policy, cfg, problem)
    assert records == []
    assert np.array_equal(policy.get_flat(), before)


def test_train_zero_rate_unchanged(fixture):
    problem, _, Psi, _ = fixture
    policy = LinearPolicy(Psi[:2] + 0.1)
    before = policy.get_flat().copy()
    cfg = TrainConfig(num_steps=3, learning_rate=0.0, batch_size=4,
                      z_lower=-0.5 * np.ones(4), z_upper=0.5 * np.ones(4))
    policy, _ = train(policy, cfg, problem)
    assert np.array_equal(policy.get_flat(), before)


def test_train_linear_fixture_converges(fixture):
    # 500 steps total: 300 at the base rate, then 200 at a tenth to settle
    problem, _, Psi, _ = fixture
    rng = np.random.default_rng(11)
    policy = LinearPolicy(Psi[:2] + 0.05 * rng.normal(size=(2, 4)))
    common = dict(batch_size=16, z_lower=-0.5 * np.ones(4), z_upper=0.5 * np.ones(4),
                  ilqr_max_iter=10, ilqr_tol=1e-13)
    policy, rec1 = train(policy, TrainConfig(num_steps=300, learning_rate=3e-2,
                                             seed=2, **common), problem)
    policy, rec2 = train(policy, TrainConfig(num_steps=200, learning_rate=3e-3,
                                             seed=3, **common), problem)
    heldout = sample_batch(-0.5 * np.ones(4), 0.5 * np.ones(4), 64,
                           np.random.default_rng(99))
    mean, _ = invariance_loss(policy, heldout, problem, horizon=10, max_iter=30, tol=1e-13)
    assert mean < 1e-8
    assert rec2[-1].loss < rec1[0].loss


def test_train_seeded_loss_curves_identical(fixture):
    problem, _, Psi, _ = fixture
    cfg = TrainConfig(num_steps=5, learning_rate=1e-2, batch_size=4, seed=3,
                      z_lower=-0.5 * np.ones(4), z_upper=0.5 * np.ones(4))
    a, rec_a = train(LinearPolicy(Psi[:2] + 0.1), cfg, problem)
    b, rec_b = train(LinearPolicy(Psi[:2] + 0.1), cfg, problem)
    assert [r.loss for r in rec_a] == [r.loss for r in rec_b]
    assert np.array_equal(a.get_flat(), b.get_flat())


def test_train_aborts_on_mass_divergence(fixture):
    problem, _, Psi, _ = fixture

    class SometimesExploding:
        def step(self, x, v):
            if abs(x[4]) > 0.1:
                return np.full(8, 1e200) * x[4]  # overflows to inf downstream
            return problem.model.step(x, v)

        def linearize(self, x, v):
            return problem.model.linearize(x, v)

    bad = InvarianceProblem(model=SometimesExploding(), cost=problem.cost,
                            box=problem.box, warm_start=None)
    cfg = TrainConfig(num_steps=1, batch_size=8, seed=4,
                      z_lower=np.array([-1.0, -0.5, -0.5, -0.5]),
                      z_upper=np.array([1.0, 0.5, 0.5, 0.5]))
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(TrainingAborted):
            train(LinearPolicy(Psi[:2]), cfg, bad, )


def test_parallel_matches_serial(fixture):
    problem, _, Psi, _ = fixture
    policy = LinearPolicy(Psi[:2] + 0.03)
    zb = sample_batch(-0.5 * np.ones(4), 0.5 * np.ones(4), 8, np.random.default_rng(12))
    g1, m1, p1 = loss_gradient(policy, zb, problem, jobs=1)
    g2, m2, p2 = loss_gradient(policy, zb, problem, jobs=2)
    assert np.array_equal(g1, g2)
    assert m1 == m2
    assert np.array_equal(p1, p2)


def test_write_train_log(tmp_path, fixture):
    problem, _, Psi, _ = fixture
    cfg = TrainConfig(num_steps=2, learning_rate=1e-2, batch_size=4, seed=5,
                      z_lower=-0.5 * np.ones(4), z_upper=0.5 * np.ones(4))
    _, records = train(LinearPolicy(Psi[:2] + 0.1), cfg, problem)
    path = tmp_path / "train.csv"
    write_train_log(path, records)
    lines = path.read_text().strip().split("\n")
    assert lines[0] == "step,loss,grad_norm,skipped,wall_ms"
    assert len(lines) == 3

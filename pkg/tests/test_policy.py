import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from zdp.evaluation import rollout
from zdp.hopper import HopperParams, InputBox, reduced_to_full, return_map
from zdp.policy import (
    CorruptFile,
    NetPolicy,
    NoProgress,
    PolicyParams,
    RaibertParams,
    RaibertPolicy,
    SchemaMismatch,
    flatten_grads,
    flatten_params,
    init_policy,
    load_weights,
    policy_backward,
    policy_forward,
    pretrain,
    raibert,
    save_weights,
    unflatten_params,
)

BOX = InputBox()


def small_policy(seed=0, hidden=16):
    return init_policy(4, 2, hidden, BOX, seed=seed)


# --- forward -------------------------------------------------------------------


def test_zero_params_zero_output():
    p = small_policy()
    for f in ("w1", "b1", "w2", "b2", "w3", "b3"):
        setattr(p, f, np.zeros_like(getattr(p, f)))
    assert np.allclose(policy_forward(p, np.array([0.3, -0.2, 0.5, 0.1])), 0.0)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_output_always_inside_box(seed):
    rng = np.random.default_rng(seed)
    p = small_policy(seed=seed % 17)
    # scale weights up to push the raw output far outside the box
    p.w3 = p.w3 * rng.uniform(1.0, 100.0)
    z = rng.uniform(-10.0, 10.0, size=4)
    out = policy_forward(p, z)
    # tanh saturates to exactly 1.0 in float64, so containment is closed
    assert np.all(out >= p.box_lo) and np.all(out <= p.box_hi)


def test_forward_matches_reimplementation():
    rng = np.random.default_rng(1)
    for trial in range(100):
        p = small_policy(seed=trial)
        z = rng.uniform(-2.0, 2.0, size=4)
        # independent matrix-arithmetic reimplementation
        h1 = np.maximum(p.w1 @ z + p.b1, 0.0)
        h2 = np.maximum(p.w2 @ h1 + p.b2, 0.0)
        raw = p.w3 @ h2 + p.b3
        half = 0.5 * (p.box_hi - p.box_lo)
        ref = 0.5 * (p.box_hi + p.box_lo) + half * np.tanh(raw / half)
        assert np.abs(policy_forward(p, z) - ref).max() < 1e-12


# --- backward ------------------------------------------------------------------


def test_zero_upstream_zero_grads():
    p = small_policy(2)
    grads, input_grad = policy_backward(p, np.array([0.1, 0.2, -0.3, 0.4]), np.zeros(2))
    assert np.abs(flatten_grads(grads)).max() == 0.0
    assert np.abs(input_grad).max() == 0.0


def test_backward_matches_finite_differences():
    rng = np.random.default_rng(3)
    p = small_policy(3, hidden=8)
    flat0 = flatten_params(p)
    eps = 1e-6
    for _ in range(100):
        z = rng.uniform(-1.0, 1.0, size=4)
        upstream = rng.normal(size=2)
        grads, input_grad = policy_backward(p, z, upstream)
        flat_g = flatten_grads(grads)
        # probe a handful of random parameter coordinates
        for idx in rng.integers(0, flat0.size, size=4):
            d = np.zeros(flat0.size)
            d[idx] = eps
            up = unflatten_params(p, flat0 + d)
            dn = unflatten_params(p, flat0 - d)
            fd = (upstream @ policy_forward(up, z) - upstream @ policy_forward(dn, z)) / (2 * eps)
            denom = max(1e-8, abs(fd), abs(flat_g[idx]))
            assert abs(flat_g[idx] - fd) / denom < 1e-5 or abs(flat_g[idx] - fd) < 1e-9
        # input gradient
        for i in range(4):
            d = np.zeros(4)
            d[i] = eps
            fd = (upstream @ policy_forward(p, z + d) - upstream @ policy_forward(p, z - d)) / (2 * eps)
            denom = max(1e-8, abs(fd), abs(input_grad[i]))
            assert abs(input_grad[i] - fd) / denom < 1e-5 or abs(input_grad[i] - fd) < 1e-9


def test_backward_linear_region_composition():
    # all preactivations positive: the net is affine and the input gradient is
    # (W3 W2 W1)^T upstream modulo the squash jacobian
    p = small_policy(4, hidden=8)
    p.w1 = np.abs(p.w1) * 0.02
    p.w2 = np.abs(p.w2) * 0.02
    p.w3 = p.w3 * 0.02
    p.b1 = np.ones_like(p.b1)
    p.b2 = np.ones_like(p.b2)
    z = np.array([0.2, 0.1, 0.3, 0.15])  # positive inputs keep h1 positive
    upstream = np.array([0.7, -0.4])
    h1 = p.w1 @ z + p.b1
    h2 = p.w2 @ h1 + p.b2
    assert np.all(h1 > 0) and np.all(h2 > 0)
    raw = p.w3 @ h2 + p.b3
    half = 0.5 * (p.box_hi - p.box_lo)
    squash_jac = 1.0 - np.tanh(raw / half) ** 2
    ref = (p.w3 @ p.w2 @ p.w1).T @ (squash_jac * upstream)
    _, input_grad = policy_backward(p, z, upstream)
    assert np.abs(input_grad - ref).max() < 1e-12


# --- raibert --------------------------------------------------------------------


def test_raibert_zero_state_zero_lean():
    assert np.allclose(raibert(np.zeros(4), RaibertParams(), HopperParams(), BOX), 0.0)


def test_raibert_decelerates_one_hop():
    hp = HopperParams()
    rp = RaibertParams()
    z = np.array([0.0, 0.0, 0.8, 0.0])
    lean = raibert(z, rp, hp, BOX)
    assert lean[1] < 0.0  # positive forward speed -> negative lean about y
    x1, _ = return_map(reduced_to_full(np.concatenate([lean, [0, 0]]), z, hp),
                       np.zeros(2), hp)
    assert abs(x1.pdot[0]) < abs(z[2])


def test_raibert_closed_loop_decreasing():
    hp = HopperParams()
    policy = RaibertPolicy(RaibertParams(), hp, BOX)
    x0 = reduced_to_full(np.zeros(4), np.array([0.5, 0.0, 0.0, 0.0]), hp)
    logs, _ = rollout(policy, x0, 20, hp, BOX)
    norms = [np.linalg.norm(log.z) for log in logs]
    assert all(b < a for a, b in zip(norms[2:], norms[3:]))
    assert norms[-1] < 0.5 * norms[0]


# --- pretraining -----------------------------------------------------------------


@pytest.fixture(scope="module")
def pretrained():
    hp = HopperParams()
    rp = RaibertParams()
    p0 = init_policy(4, 2, 32, BOX, seed=0)
    p = pretrain(p0, rp, hp, -np.ones(4), np.ones(4), steps=12000, rate=2e-3, seed=0,
                 target_mse=1.5e-5)
    return p, rp, hp


def test_pretrain_matches_heuristic(pretrained):
    p, rp, hp = pretrained
    grid = np.stack(np.meshgrid(*[np.linspace(-0.9, 0.9, 5)] * 4, indexing="ij"),
                    axis=-1).reshape(-1, 4)
    worst = 0.0
    sq = 0.0
    for z in grid:
        err = np.abs(policy_forward(p, z) - raibert(z, rp, hp, BOX)).max()
        worst = max(worst, err)
        sq += err * err
    assert worst < 0.02
    assert sq / grid.shape[0] < 1e-4


def test_pretrain_stabilizes_hopper(pretrained):
    p, rp, hp = pretrained
    policy = NetPolicy(p)
    x0 = reduced_to_full(np.zeros(4), np.array([0.3, -0.3, 0.0, 0.0]), hp)
    logs, _ = rollout(policy, x0, 20, hp, BOX)
    norms = [np.linalg.norm(log.z) for log in logs]
    assert norms[-1] < 0.2 * norms[0]


def test_pretrain_idempotent(pretrained):
    p, rp, hp = pretrained
    p2 = pretrain(p, rp, hp, -np.ones(4), np.ones(4), steps=300, rate=1e-4, seed=1)
    rng = np.random.default_rng(5)
    for _ in range(50):
        z = rng.uniform(-1.0, 1.0, 4)
        assert np.abs(policy_forward(p2, z) - policy_forward(p, z)).max() < 1e-3


def test_pretrain_deterministic():
    hp = HopperParams()
    rp = RaibertParams()
    a = pretrain(init_policy(4, 2, 8, BOX, seed=3), rp, hp, -np.ones(4), np.ones(4),
                 steps=200, rate=1e-3, seed=7)
    b = pretrain(init_policy(4, 2, 8, BOX, seed=3), rp, hp, -np.ones(4), np.ones(4),
                 steps=200, rate=1e-3, seed=7)
    assert np.array_equal(flatten_params(a), flatten_params(b))


def test_pretrain_no_progress_raises():
    hp = HopperParams()
    rp = RaibertParams()
    with pytest.raises(NoProgress):
        # zero learning rate cannot reduce the loss
        pretrain(init_policy(4, 2, 8, BOX, seed=0), rp, hp, -np.ones(4), np.ones(4),
                 steps=1200, rate=0.0, patience=1000)


# --- weight files -----------------------------------------------------------------


def test_save_load_roundtrip_bit_identical(tmp_path):
    p = small_policy(6)
    path = tmp_path / "w.txt"
    save_weights(p, path)
    q = load_weights(path)
    assert np.array_equal(flatten_params(p), flatten_params(q))
    assert np.array_equal(p.box_lo, q.box_lo) and np.array_equal(p.box_hi, q.box_hi)


def test_load_wrong_zdim_schema_mismatch(tmp_path):
    p = small_policy(7)
    path = tmp_path / "w.txt"
    save_weights(p, path)
    with pytest.raises(SchemaMismatch):
        load_weights(path, z_dim=6)


def test_load_corrupt_file(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("zdp-weights 1\nz_dim 4\nnot a real file\n")
    with pytest.raises((CorruptFile, SchemaMismatch)):
        load_weights(path)


def test_load_not_a_weight_file(tmp_path):
    path = tmp_path / "other.txt"
    path.write_text("something else\n")
    with pytest.raises(SchemaMismatch):
        load_weights(path)


def test_saved_weights_reproduce_outputs(tmp_path):
    p = small_policy(8)
    path = tmp_path / "w.txt"
    save_weights(p, path)
    q = load_weights(path)
    rng = np.random.default_rng(9)
    for _ in range(50):
        z = rng.uniform(-1.0, 1.0, 4)
        assert np.array_equal(policy_forward(p, z), policy_forward(q, z))

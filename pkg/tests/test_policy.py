import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from diffmass.dynamics import BodyModel
from diffmass.policy import (PARAM_ORDER, PHASE2_FROZEN, STANDARD_MASSES, CrossEvalResult, Demo, EncodedInput,
                             EnvFixture, GraspEnvConfig, GraspMLPParams, NetworkPolicy, NonFiniteLoss,
                             OraclePolicy, PolicyError, TrainConfig, _losses, _stack, backward_batch,
                             cross_mass_eval, demos_from_jsonl, demos_to_jsonl, encode_input, force_target,
                             forward_batch, generate_demos, grasp_env_rollout, mlp_forward, phase1_loss_and_grads,
                             phase1_train, phase2_train, pinch_action, pinch_width, positional_encode,
                             scaled_env_force, standard_mesh, train_policy)

MESH = standard_mesh()
ENV = GraspEnvConfig()
rng = np.random.default_rng(0)
VERTS50 = rng.uniform(-1, 1, (50, 3))


def test_encoding_length_and_layout():
    inp = encode_input(VERTS50, 0.3, bands=4)
    assert len(inp.features) == 50 * 27 + 1 == 1351
    assert positional_encode(VERTS50, 4).shape == (50, 27)
    assert inp.mass_feature == 0.3 and inp.rows().shape == (50, 28)
    raw = positional_encode(VERTS50, 0)
    assert raw.shape == (50, 3) and raw.min() == -1.0 and raw.max() == 1.0


def test_origin_vertex_encodes_to_sin0_cos1():
    pe = positional_encode(np.array([[-1.0, -1, -1], [0, 0, 0], [1, 1, 1]]), 3)
    row = pe[1, 3:].reshape(3, 3, 2)
    assert np.all(row[..., 0] == 0.0) and np.all(row[..., 1] == 1.0)
    # band b, axis c holds sin/cos(2^b pi c) of the normalized coordinate
    assert np.allclose(pe[2, 3:].reshape(3, 3, 2)[..., 1], [[-1], [1], [1]])


def test_flat_axis_maps_to_zero():
    pe = positional_encode(np.array([[0, 0, 5.0], [1, 2, 5.0], [2, 1, 5.0]]), 1)
    assert np.all(pe[:, 2] == 0.0)
    with pytest.raises(PolicyError):
        positional_encode(VERTS50, -1)


def test_encoded_input_validation():
    with pytest.raises(PolicyError):
        EncodedInput(np.zeros(10), 2, 1)
    with pytest.raises(PolicyError):
        EncodedInput(np.full(19, np.nan), 2, 1)


def test_zero_weights_give_biases():
    p = GraspMLPParams.init(2, 0, hidden=8)
    for k in PARAM_ORDER:
        p.arrays[k][...] = 0.0
    p.arrays["ba"][:] = np.arange(16)
    p.arrays["br"][:] = [0.5, -1.0]
    p.arrays["bf"][:] = [2.0]
    A, r, f = mlp_forward(p, encode_input(VERTS50, 0.1, 2))
    assert np.array_equal(A, np.arange(16))
    assert np.allclose(r, 1 / (1 + np.exp(-np.array([0.5, -1.0])))) and math.isclose(f, 1 / (1 + math.exp(-2)))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.floats(1e-3, 10.0))
def test_outputs_in_range_and_permutation_invariant(seed, mass):
    r_ = np.random.default_rng(seed)
    p = GraspMLPParams.init(2, seed, hidden=32)
    v = r_.normal(size=(20, 3))
    A, r, f = mlp_forward(p, encode_input(v, mass, 2))
    A2, r2, f2 = mlp_forward(p, encode_input(v[r_.permutation(20)], mass, 2))
    assert np.all((r > 0) & (r < 1)) and 0 < f < 1
    assert np.abs(A - A2).max() <= 1e-9 and np.abs(r - r2).max() <= 1e-9 and abs(f - f2) <= 1e-9


def test_shape_mismatch_errors():
    p = GraspMLPParams.init(4, 0, hidden=8)
    with pytest.raises(PolicyError):
        mlp_forward(p, encode_input(VERTS50, 0.1, 2))
    with pytest.raises(PolicyError):
        forward_batch(p, np.zeros((1, 5, 3)))
    bad = dict(p.arrays)
    bad["W2"] = np.zeros((3, 3))
    with pytest.raises(PolicyError):
        GraspMLPParams(bad, 4)


def test_default_architecture_shapes():
    p = GraspMLPParams.init()
    assert p.arrays["W1"].shape == (28, 256) and p.arrays["W3"].shape == (256, 256)
    assert p.arrays["Wa"].shape == (256, 16) and p.arrays["Wr"].shape == (256, 2) and p.arrays["Wf"].shape == (256, 1)


def test_force_target():
    assert math.isclose(force_target(0.1, 9.81, 4), 0.24525)
    assert force_target(0.3, 9.81, 1) == 0.3 * 9.81
    assert math.isclose(force_target(0.3, 9.81, 6), force_target(0.3, 9.81, 3) / 2)
    with pytest.raises(PolicyError):
        force_target(0.1, 9.81, 0)


@given(st.floats(1e-3, 10), st.integers(1, 16))
def test_force_target_identity(m, n):
    assert math.isclose(force_target(m, 9.81, n) * n, m * 9.81, rel_tol=1e-15)


def test_scaled_env_force():
    assert scaled_env_force(0.2, 9.81, 0, 20.0) == 0.0
    assert scaled_env_force(1.0, 10.0, 2, 20.0) == 1.0
    assert math.isclose(scaled_env_force(0.2, 9.81, 3, 20.0), 0.2943)
    assert scaled_env_force(5.0, 9.81, 4, 20.0) == 1.0
    with pytest.raises(PolicyError):
        scaled_env_force(0.2, 9.81, 3, 0.0)


def _body(m):
    return BodyModel.from_mesh(MESH, m, n_contact=1)


def test_grasp_env_examples():
    act = pinch_action(pinch_width(MESH), ENV)
    m = 0.2
    out = grasp_env_rollout(act, 1.5 * m * 9.81 / ENV.f_max, _body(m), ENV)
    assert out.held_at_end and out.failure == "" and out.n_active == [3] * ENV.horizon
    assert out.in_hand == [1] * ENV.horizon and out.sustained_contact
    assert not grasp_env_rollout(act, 0.0, _body(m), ENV).held_at_end
    light = 0.03
    out = grasp_env_rollout(act, 1.5 * 8 * light * 9.81 / ENV.f_max, _body(light), ENV)
    assert not out.held_at_end and out.failure == "bounce"


def test_grasp_env_slip_and_miss():
    act = pinch_action(pinch_width(MESH), ENV)
    out = grasp_env_rollout(act, 0.9 * 1.2 * 9.81 / ENV.f_max, _body(1.2), ENV)
    assert out.failure == "slip" and not out.held_at_end and out.n_active[-1] == 0
    wide = pinch_action(0.11, ENV)
    assert grasp_env_rollout(wide, 0.5, _body(0.2), ENV).failure == "no_contact"
    no_thumb = act.copy()
    no_thumb[1:4] = 0.0
    assert grasp_env_rollout(no_thumb, 0.5, _body(0.2), ENV).failure == "no_contact"


@given(st.lists(st.floats(-4, 4), min_size=16, max_size=16), st.floats(-1, 2), st.floats(0.01, 2.0))
@settings(max_examples=40, deadline=None)
def test_grasp_env_outcome_invariants(action, force, m):
    out = grasp_env_rollout(np.array(action), force, _body(m), ENV)
    assert len(out.n_active) == ENV.horizon == len(out.in_hand)
    assert all(n >= 0 for n in out.n_active)
    assert all(h == (1 if n >= 1 else 0) for n, h in zip(out.n_active, out.in_hand))


@pytest.mark.parametrize("m", [0.03, 0.2, 1.2])
def test_holding_window_is_contiguous_interval(m):
    act = pinch_action(pinch_width(MESH), ENV)
    cmds = np.linspace(0.0, 1.0, 4001)
    held = np.array([grasp_env_rollout(act, c, _body(m), ENV).held_at_end for c in cmds])
    idx = np.flatnonzero(held)
    assert len(idx) > 0 and np.all(np.diff(idx) == 1)
    lo = m * 9.81 * ENV.gamma / ENV.f_max
    hi = min(ENV.kappa * m * 9.81 / ENV.f_max, 1.0)
    step = cmds[1] - cmds[0]
    assert abs(cmds[idx[0]] - lo) <= step and abs(cmds[idx[-1]] - hi) <= step


def test_params_bytes_round_trip():
    p = GraspMLPParams.init(2, 3, hidden=16, m_ref=0.1)
    p.meta["train_masses"] = [0.2]
    q = GraspMLPParams.from_bytes(p.to_bytes())
    assert q.bands == 2 and q.m_ref == 0.1 and q.meta == p.meta
    for k in PARAM_ORDER:
        assert np.array_equal(q.arrays[k], p.arrays[k].astype(np.float32))
    assert q.to_bytes() == GraspMLPParams.from_bytes(q.to_bytes()).to_bytes()
    with pytest.raises(PolicyError):
        GraspMLPParams.from_bytes(p.to_bytes()[:-4])
    with pytest.raises(PolicyError):
        GraspMLPParams.from_bytes(b"no header")


def test_demo_validation_and_jsonl():
    demos = generate_demos(MESH, STANDARD_MASSES, 5, 1)
    back = demos_from_jsonl(demos_to_jsonl(demos))
    assert len(back) == 5
    for a, b in zip(demos, back):
        assert a.mass == b.mass and np.array_equal(a.action, b.action) and a.reward_label == b.reward_label
    assert [d.mass for d in demos] == [0.03, 0.2, 1.2, 0.03, 0.2]
    with pytest.raises(PolicyError):
        Demo(MESH.vertices, 0.1, np.full(16, 4.0))
    with pytest.raises(PolicyError):
        Demo(MESH.vertices, 0.1, np.zeros(15))
    with pytest.raises(PolicyError):
        Demo(MESH.vertices, 0.1, np.zeros(16), force_label=1.5)


def test_demo_actions_touch_the_object():
    for d in generate_demos(MESH, (0.2,), 10, 2):
        assert grasp_env_rollout(d.action, 0.1, _body(0.2), ENV).n_active[0] == 3


def test_backprop_matches_finite_differences():
    demos = generate_demos(MESH, STANDARD_MASSES, 5, 0)
    p = GraspMLPParams.init(2, 4, hidden=12, m_ref=0.1)
    X, A, _, _ = _stack(demos, p)
    r_ = np.random.default_rng(2)
    R, F = r_.uniform(0.1, 0.9, (5, 2)), r_.uniform(0.1, 0.9, 5)
    A = A + r_.normal(0, 0.1, A.shape)
    _, _, g = phase1_loss_and_grads(p, X, A, R, F)
    for k in PARAM_ORDER:
        a = p.arrays[k]
        for idx in list(np.ndindex(a.shape))[::7]:
            o = a[idx]
            h = 1e-6
            a[idx] = o + h
            lp = phase1_loss_and_grads(p, X, A, R, F)[0]
            a[idx] = o - h
            lm = phase1_loss_and_grads(p, X, A, R, F)[0]
            a[idx] = o
            fd = (lp - lm) / (2 * h)
            assert abs(fd - g[k][idx]) <= 1e-4 * max(abs(fd), 1e-6), k


def test_matching_labels_give_zero_head_gradients():
    p = GraspMLPParams.init(2, 0, hidden=8)
    X = np.stack([encode_input(VERTS50, 0.2, 2).rows()])
    c = forward_batch(p, X)
    (_, _, _), (_, dzr, dzf) = _losses(c, c.A, c.r, c.f)
    g = backward_batch(p, c, np.zeros_like(c.A), dzr, dzf)
    assert all(np.all(v == 0.0) for v in g.values())


def test_phase1_memorizes_and_pushes_labels_up():
    demos = generate_demos(MESH, (0.2,), 1, 0)
    cfg = TrainConfig(epochs_phase1=300)
    p, curves = phase1_train(GraspMLPParams.init(4, 0, m_ref=0.1), demos, cfg)
    assert curves["action"][-1] <= 1e-4
    _, r, f = mlp_forward(p, encode_input(demos[0].vertices, 0.2, 4, 0.1))
    assert np.all(r > 0.9) and f > 0.9


def test_phase1_smoothed_loss_non_increasing_and_deterministic():
    demos = generate_demos(MESH, STANDARD_MASSES, 32, 0)
    cfg = TrainConfig(epochs_phase1=60)
    p0 = GraspMLPParams.init(4, 0, hidden=64, m_ref=0.1)
    p, c = phase1_train(p0, demos, cfg)
    sm = np.convolve(c["total"], np.ones(10) / 10, mode="valid")
    assert np.all(np.diff(sm) <= 0.0)
    q, _ = phase1_train(p0, demos, cfg)
    assert all(np.array_equal(p.arrays[k], q.arrays[k]) for k in PARAM_ORDER)


def test_non_finite_loss_names_batch():
    demos = generate_demos(MESH, (0.2,), 4, 0)
    p = GraspMLPParams.init(4, 0, hidden=8)
    p.arrays["ba"][0] = np.nan
    with pytest.raises(NonFiniteLoss) as ei:
        phase1_train(p, demos, TrainConfig(epochs_phase1=1, batch_size=2))
    assert ei.value.batch == 0
    with pytest.raises(PolicyError):
        phase1_train(p, [], TrainConfig())


def test_phase2_only_moves_reward_and_force_heads():
    demos = generate_demos(MESH, (0.2,), 8, 0)
    cfg = TrainConfig(epochs_phase1=20, epochs_phase2=10)
    p1, _ = phase1_train(GraspMLPParams.init(4, 0, hidden=32, m_ref=0.1), demos, cfg)
    p2, curves = phase2_train(p1, [EnvFixture(MESH, 0.2)], cfg)
    for k in PARAM_ORDER:
        same = np.array_equal(p1.arrays[k], p2.arrays[k])
        assert same == (k in PHASE2_FROZEN), k
    assert len(curves["total"]) == 10


def test_oracle_succeeds_everywhere():
    pols = [(m, OraclePolicy(MESH)) for m in STANDARD_MASSES]
    res = cross_mass_eval(pols, STANDARD_MASSES, 10, 0, MESH, condition="eval")
    assert np.all(res.rates == 1.0) and all(res.diagonal_dominant())


def test_cross_eval_deterministic_and_csv():
    pols = [(m, OraclePolicy(MESH)) for m in STANDARD_MASSES]
    a = cross_mass_eval(pols, STANDARD_MASSES, 5, 3, MESH)
    b = cross_mass_eval(pols, STANDARD_MASSES, 5, 3, MESH, jobs=2)
    assert np.array_equal(a.successes, b.successes)
    lines = a.to_csv().splitlines()
    assert lines[0] == "train_mass,eval_mass,trials,successes,rate" and len(lines) == 10
    with pytest.raises(PolicyError):
        cross_mass_eval(pols, STANDARD_MASSES, 0, 0, MESH)


def test_diagonal_dominance_rule():
    r = CrossEvalResult([0.1, 0.2], [0.1, 0.2], np.array([[4, 2], [3, 3]]), 5)
    assert r.diagonal_dominant() == [True, True]
    r = CrossEvalResult([0.1, 0.2], [0.1, 0.2], np.array([[1, 2], [3, 3]]), 5)
    assert r.diagonal_dominant() == [False, True]


@pytest.fixture(scope="module")
def joint_policy():
    return train_policy(MESH, STANDARD_MASSES, TrainConfig())[0]


@pytest.mark.slow
def test_joint_training_monotone_force(joint_policy):
    f = [NetworkPolicy(joint_policy).act(MESH.vertices, m)[1] for m in STANDARD_MASSES]
    assert f[0] < f[1] < f[2]
    assert joint_policy.meta["train_masses"] == list(STANDARD_MASSES)


@pytest.mark.slow
def test_mass_blind_ablation_degrades(joint_policy):
    seen = cross_mass_eval([(m, NetworkPolicy(joint_policy)) for m in STANDARD_MASSES], STANDARD_MASSES, 20, 0,
                           MESH, condition="eval")
    blind = cross_mass_eval([(m, NetworkPolicy(joint_policy, mass_blind=True)) for m in STANDARD_MASSES],
                            STANDARD_MASSES, 20, 0, MESH, condition="eval")
    # conditioned: each object gets a force sized for it; blind: one force for all
    assert np.all(np.diag(seen.rates) == 1.0)
    assert np.sum(blind.rates[0] > 0) <= 1
    assert blind.rates.sum() < seen.rates.sum()

import numpy as np
import pytest

from diffmass.adjoint import (AlignmentError, GradReport, NonPhysicalMassError, TapeError, finite_diff_grad,
                              grad_mass, gradcheck, pose_loss, pushdown_closed_form, pushdown_least_squares,
                              pushdown_model, record_rollout, rollout_loss_fn)
from diffmass.dynamics import ForceSchedule, Integrator, SimConfig, rollout
from diffmass.fixtures import ballistic_scenario, gradient_fixtures, push_scenario, pushdown_free_scenario
from diffmass.identify import synthesize_real_trajectory
from diffmass.scenario import NoiseModel


def _parts(sc, m=None):
    return sc.initial_state(), sc.body(m), sc.schedule, sc.sim_config()


def _u(sc):
    return np.array([sum(e.force[2] for e in sc.schedule.active(sc.dt * k)) for k in range(sc.steps)])


def test_replay_bit_identical_to_rollout():
    init, body, sched, cfg = _parts(push_scenario(0.1))
    traj, tape = record_rollout(init, body, sched, cfg)
    ref, _ = rollout(init, body, sched, cfg)
    again = tape.replay()
    for t in (traj, again):
        assert t.positions.tobytes() == ref.positions.tobytes() and t.quats.tobytes() == ref.quats.tobytes()


def test_ballistic_tape_has_no_contact_branches():
    _, tape = record_rollout(*_parts(ballistic_scenario()))
    assert tape.contact_branches == 0 and len(tape) == ballistic_scenario().steps


def test_tape_grows_linearly_with_steps():
    sc = push_scenario(0.1)
    sizes = {}
    for n in (250, 500, 1000):
        s = sc.with_(steps=n)
        _, tape = record_rollout(*_parts(s))
        sizes[n] = len(tape)
    a = (sizes[500] - sizes[250]) / 250
    b = (sizes[1000] - sizes[500]) / 500
    assert abs(a - b) <= 0.1 * b
    assert tape.contact_branches > 0


def test_explicit_tape_refused():
    init, body, sched, cfg = _parts(push_scenario(0.1))
    from dataclasses import replace
    with pytest.raises(TapeError):
        record_rollout(init, body, sched, replace(cfg, integrator=Integrator.EXPLICIT))


def test_real_equals_sim_gives_zero():
    traj, tape = record_rollout(*_parts(push_scenario(0.1)))
    rep = grad_mass(tape, traj)
    assert rep.loss == 0.0 and rep.grad == 0.0


def test_contact_free_grad_matches_closed_form():
    sc = pushdown_free_scenario(0.1)
    real = synthesize_real_trajectory(sc, noise=NoiseModel(pos_sigma=0.002, z_bias=0.003, seed=5))
    init = sc.initial_state()
    model = pushdown_model(_u(sc), init.p[2], init.v[2], 9.81, sc.dt)
    for m in (0.04, 0.13, 0.5):
        _, tape = record_rollout(*_parts(sc, m))
        rep = grad_mass(tape, real)
        r = model.alpha + model.beta / m - real.positions[:, 2]
        want = float(np.sum(2 * r * (-model.beta / m ** 2)))
        assert abs(rep.grad - want) <= 1e-9 * abs(want)


def test_grad_sign_drives_toward_truth():
    sc = pushdown_free_scenario(0.1)
    real = synthesize_real_trajectory(sc)
    assert grad_mass(record_rollout(*_parts(sc, 0.2))[1], real).grad > 0
    assert grad_mass(record_rollout(*_parts(sc, 0.05))[1], real).grad < 0


@pytest.mark.parametrize("idx", range(5))
def test_gradient_fixtures_match_finite_differences(idx):
    sc, m, contact = gradient_fixtures()[idx]
    real = synthesize_real_trajectory(sc)
    rep = gradcheck(sc.initial_state(), sc.body(m), sc.schedule, sc.sim_config(), real)
    assert rep.rel_err <= (1e-3 if contact else 1e-6)
    assert np.isfinite([rep.grad, rep.loss, rep.fd_grad]).all()


def test_length_mismatch_is_alignment_error():
    sc = push_scenario(0.1)
    _, tape = record_rollout(*_parts(sc))
    longer, _ = sc.with_(steps=600).simulate()
    with pytest.raises(AlignmentError):
        grad_mass(tape, longer)
    shifted, _ = sc.simulate()
    shifted.times = shifted.times + 0.5e-3
    with pytest.raises(AlignmentError):
        pose_loss(tape.trajectory, shifted)


def test_pose_loss_sign_aligns_quaternions():
    traj, _ = push_scenario(0.1).simulate()
    flipped, _ = push_scenario(0.1).simulate()
    flipped.quats = -flipped.quats
    assert pose_loss(traj, flipped) == 0.0


def test_finite_diff_quadratic():
    assert abs(finite_diff_grad(lambda m: (m - 2.0) ** 2, 3.0, 1e-4) - 2.0) <= 1e-6
    with pytest.raises(ValueError):
        finite_diff_grad(lambda m: m, 1e-5, 1e-4)


def test_finite_diff_stationary_at_optimum():
    sc = pushdown_free_scenario(0.1)
    real = synthesize_real_trajectory(sc)
    f = rollout_loss_fn(*_parts(sc), real)
    h = 1e-5 * 0.1
    fd = finite_diff_grad(f, 0.1, h)
    curv = (f(0.1 + 1e-3) - 2 * f(0.1) + f(0.1 - 1e-3)) / 1e-6
    assert abs(fd) <= 1e-4 * abs(curv) * h


def test_closed_form_examples():
    dt, z0, v0, g, m = 1e-3, 2.0, 0.5, 9.81, 0.3
    n = 300
    t = dt * np.arange(n + 1)
    z = pushdown_closed_form(np.zeros(n), z0, v0, g, m, dt)
    assert np.allclose(z, z0 + v0 * t - 0.5 * g * t * (t + dt), atol=1e-12)
    z = pushdown_closed_form(np.full(n, m * g), z0, v0, g, m, dt)
    assert np.allclose(z, z0 + v0 * t, atol=1e-12)


def test_closed_form_matches_rollout():
    sc = pushdown_free_scenario(0.17)
    traj, _ = sc.simulate()
    init = sc.initial_state()
    z = pushdown_closed_form(_u(sc), init.p[2], init.v[2], 9.81, 0.17, sc.dt)
    assert np.abs(z - traj.positions[:, 2]).max() <= 1e-12 * np.abs(z).max()


def test_least_squares_examples():
    u = np.concatenate([np.zeros(20), np.full(100, 0.8), np.zeros(80)])
    model = pushdown_model(u, 1.0, 0.0, 9.81, 5e-3)
    z = model.alpha + model.beta / 0.5
    m_hat, res = pushdown_least_squares(z, model.alpha, model.beta)
    assert abs(m_hat - 0.5) <= 1e-10 and res <= 1e-20
    flat = pushdown_model(np.zeros(200), 1.0, 0.0, 9.81, 5e-3)
    with pytest.raises(ValueError):
        pushdown_least_squares(flat.alpha, flat.alpha, flat.beta)
    with pytest.raises(NonPhysicalMassError):
        pushdown_least_squares(model.alpha - model.beta, model.alpha, model.beta)


def test_least_squares_is_global_minimum():
    u = np.full(200, 0.5)
    model = pushdown_model(u, 1.0, 0.0, 9.81, 5e-3)
    rng = np.random.default_rng(0)
    z = model.alpha + model.beta / 0.2 + rng.normal(0, 1e-3, 201)
    m_hat, res = pushdown_least_squares(z, model.alpha, model.beta)
    for d in (-1e-3, 1e-3):
        th = (1 / m_hat) * (1 + d)
        r = model.alpha + th * model.beta - z
        assert float(r @ r) >= res


def test_least_squares_monte_carlo():
    u = np.concatenate([np.zeros(50), np.full(100, 0.5), np.zeros(50)])
    model = pushdown_model(u, 1.0, 0.0, 9.81, 5e-3)
    clean = model.alpha + model.beta / 0.2
    errs = []
    for seed in range(100):
        z = clean + np.random.default_rng(seed).normal(0, 1e-3, len(clean))
        errs.append(abs(pushdown_least_squares(z, model.alpha, model.beta)[0] - 0.2) / 0.2)
    assert np.percentile(errs, 95) <= 0.03


def test_grad_report_json_round_trip():
    r = GradReport(1.5, 0.25, 1.4999, 1e-4)
    assert GradReport.from_json(r.to_json()) == r

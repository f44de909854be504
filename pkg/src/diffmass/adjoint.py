"""Reverse-mode d(loss)/d(mass) through a semi-implicit rollout.

The forward pass is the same code as :func:`dynamics.rollout`; the tape keeps
the per-step inputs and branch decisions, and the backward sweep applies the
hand-written vector-Jacobian product of one step in reverse order. Contact
forces do not depend on mass directly, but every acceleration is ``F / m``,
so mass enters each step through the velocity update.

Also here: the central finite-difference oracle and the closed-form push-down
model whose trajectory is affine in 1/m.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .dynamics import (
    BodyModel,
    DivergenceError,
    ForceSchedule,
    Integrator,
    RigidState,
    SimConfig,
    Trajectory,
    _advance,
    _as_tuple,
    _check,
    _contact_and_forces,
    _mtv,
    _mv,
    _Prepared,
    _xs,
)


class AlignmentError(ValueError):
    """Observed and simulated trajectories do not line up sample for sample."""


class TapeError(ValueError):
    pass


class NonPhysicalMassError(ValueError):
    pass


# ---------------------------------------------------------------------------
# pose loss shared with identify.trajectory_loss

def match_indices(sim: Trajectory, real: Trajectory) -> np.ndarray:
    """Index of the simulated sample at each observed timestamp.

    Every observed time must coincide with a simulated one within 1e-9 s;
    observations may be sparser than the simulation (e.g. resampled).
    """
    if len(real) == 0:
        raise AlignmentError("observed trajectory is empty")
    if len(real) > len(sim):
        raise AlignmentError(f"cannot align {len(real)} observed samples with {len(sim)} simulated")
    idx = np.searchsorted(sim.times, real.times - 1e-9)
    if idx[-1] >= len(sim):
        raise AlignmentError("observed window runs past the simulated trajectory")
    bad = np.abs(sim.times[np.minimum(idx, len(sim) - 1)] - real.times) > 1e-9
    if np.any(bad):
        j = int(np.argmax(bad))
        raise AlignmentError(f"observed t={real.times[j]:.9g} s has no simulated sample within 1e-9 s")
    return idx


def pose_loss(sim: Trajectory, real: Trajectory, q_weight: float = 1.0, *, with_grads: bool = False):
    """Sum of squared position and sign-aligned quaternion residuals.

    Each observed sample is compared with the simulated sample at the same
    time. With ``with_grads`` also returns (indices, dL/dp, dL/dq) for the
    matched simulated samples.
    """
    idx = match_indices(sim, real)
    dp = sim.positions[idx] - real.positions
    qs = sim.quats[idx]
    sign = np.where(np.einsum("ij,ij->i", qs, real.quats) < 0.0, -1.0, 1.0)
    dq = qs - sign[:, None] * real.quats
    loss = float(np.sum(dp * dp) + q_weight * np.sum(dq * dq))
    if not with_grads:
        return loss
    return loss, idx, 2.0 * dp, 2.0 * q_weight * dq


# ---------------------------------------------------------------------------
# tape

@dataclass
class Tape:
    """Record of one semi-implicit rollout.

    ``states[k]`` holds ``(p, q, v, w)`` entering step ``k``; ``steps[k]``
    holds the force aggregate and the contact branch taken in that step.
    """
    init: RigidState
    body: BodyModel
    schedule: ForceSchedule
    cfg: SimConfig
    mass: float
    prepared: _Prepared
    states: list = field(default_factory=list)
    steps: list = field(default_factory=list)
    trajectory: Trajectory | None = None

    def __len__(self) -> int:
        # one entry per step plus one per active contact branch
        return sum(1 + len(rec[5]) for rec in self.steps)

    @property
    def contact_branches(self) -> int:
        return sum(len(rec[5]) for rec in self.steps)

    @property
    def active_sets(self) -> list[tuple[int, ...]]:
        """Contact vertices (positions in ``body.contact_vertices``) carrying force at each step."""
        return [tuple(rec[5]) for rec in self.steps]

    def replay(self) -> Trajectory:
        traj, _ = _run(self.init, self.body.with_mass(self.mass), self.schedule, self.cfg, record=None)
        return traj


def _run(init, body, sched, cfg, record: Tape | None):
    P = _Prepared(body, sched, cfg, init.t) if record is None else record.prepared
    n = cfg.steps
    times = init.t + cfg.dt * np.arange(n + 1)
    P_out = np.empty((n + 1, 3))
    Q_out = np.empty((n + 1, 4))
    p, q, v, w = (_as_tuple(x) for x in (init.p, init.q, init.v, init.w))
    P_out[0], Q_out[0] = p, q
    m = float(body.mass)
    for k in range(n):
        rec = _contact_and_forces(P, p, q, v, w, k)
        F, tau, R = rec[0], rec[1], rec[2]
        if record is not None:
            record.states.append((p, q, v, w))
            record.steps.append(rec)
        p, q, v, w = _advance(P, p, q, v, w, F, tau, R, m, False, body.per_particle_full_mass)
        _check(k, p, v, w, cfg.max_speed)
        P_out[k + 1], Q_out[k + 1] = p, q
    if record is not None:
        record.states.append((p, q, v, w))
    return Trajectory(times, P_out, Q_out, 1.0 / cfg.dt, body.mesh.name), P


def record_rollout(init: RigidState, body: BodyModel, sched: ForceSchedule, cfg: SimConfig):
    """Run the semi-implicit rollout and keep a tape for the backward pass."""
    if cfg.integrator is not Integrator.SEMI_IMPLICIT:
        raise TapeError("tapes are only recorded for the semi-implicit integrator")
    tape = Tape(init, body, sched, cfg, float(body.mass), _Prepared(body, sched, cfg, init.t))
    traj, _ = _run(init, body, sched, cfg, record=tape)
    tape.trajectory = traj
    return traj, tape


# ---------------------------------------------------------------------------
# backward

def _rotmat_vjp(q, G):
    """Gradient w.r.t. ``q`` of ``sum(G * R(q))``; ``G`` is a nested 3x3 list."""
    w, x, y, z = q
    (g00, g01, g02), (g10, g11, g12), (g20, g21, g22) = G
    return [
        2.0 * (-z * g01 + y * g02 + z * g10 - x * g12 - y * g20 + x * g21),
        2.0 * (y * g01 + z * g02 + y * g10 - 2.0 * x * g11 - w * g12 + z * g20 + w * g21 - 2.0 * x * g22),
        2.0 * (-2.0 * y * g00 + x * g01 + w * g02 + x * g10 + z * g12 - w * g20 + z * g21 - 2.0 * y * g22),
        2.0 * (-2.0 * z * g00 - w * g01 + x * g02 + w * g10 - 2.0 * z * g11 + y * g12 + x * g20 + y * g21),
    ]


def _add_outer(G, a, b):
    for i in range(3):
        row = G[i]
        ai = a[i]
        row[0] += ai * b[0]
        row[1] += ai * b[1]
        row[2] += ai * b[2]


def _step_vjp(C: _Prepared, k: int, state, nxt, rec, m: float, gp1, gq1, gv1, gw1):
    """Pull (gp1, gq1, gv1, gw1) back through step ``k``.

    ``state`` / ``nxt`` are the tape states entering and leaving the step.
    Returns the gradients of the incoming state and this step's dL/dm term.
    """
    q = state[1]
    w = state[3]
    q1 = nxt[1]
    w1 = nxt[3]
    F, tau, R, rw, fz, active = rec
    dt = C.dt
    half = 0.5 * dt
    qw, qx, qy, qz = q

    # q1 = normalize(q + dt/2 (0, w1) q); gradients w.r.t. q and w1
    a1, a2, a3 = w1
    if a1 == 0.0 and a2 == 0.0 and a3 == 0.0:
        c = qw * gq1[0] + qx * gq1[1] + qy * gq1[2] + qz * gq1[3]
        gqq = [gq1[i] - q[i] * c for i in range(4)]
        gq = list(gq1)
    else:
        # unnormalised update, then projection of the incoming gradient
        qq = [qw + half * (-a1 * qx - a2 * qy - a3 * qz),
              qx + half * (a1 * qw + a2 * qz - a3 * qy),
              qy + half * (-a1 * qz + a2 * qw + a3 * qx),
              qz + half * (a1 * qy - a2 * qx + a3 * qw)]
        nrm = math.sqrt(qq[0] * qq[0] + qq[1] * qq[1] + qq[2] * qq[2] + qq[3] * qq[3])
        c = q1[0] * gq1[0] + q1[1] * gq1[1] + q1[2] * gq1[2] + q1[3] * gq1[3]
        gqq = [(gq1[i] - q1[i] * c) / nrm for i in range(4)]
        b0, b1, b2, b3 = gqq
        # + half * (0, -w1) * gqq
        gq = [b0 + half * (a1 * b1 + a2 * b2 + a3 * b3),
              b1 + half * (-a1 * b0 - a2 * b3 + a3 * b2),
              b2 + half * (a1 * b3 - a2 * b0 - a3 * b1),
              b3 + half * (-a1 * b2 + a2 * b1 - a3 * b0)]
    b0, b1, b2, b3 = gqq
    # vector part of gqq * conj(q)
    gw1 = [gw1[0] + half * (-b0 * qx + b1 * qw - b2 * qz + b3 * qy),
           gw1[1] + half * (-b0 * qy + b1 * qz + b2 * qw - b3 * qx),
           gw1[2] + half * (-b0 * qz - b1 * qy + b2 * qx + b3 * qw)]

    # p1 = p + dt v1
    gp = list(gp1)
    gv1 = [gv1[i] + dt * gp1[i] for i in range(3)]

    # w1 = w + dt R Ib^-1 R^T (tau - w x (R Ib R^T w))
    gw = list(gw1)
    G = [[0.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]]
    if C.Ib_inv is not None:
        Ib, Ibi = C.Ib, C.Ib_inv
        e = _mv(Ib, _mtv(R, w))
        L = _mv(R, e)
        wl = _xs(w, L)
        y = (tau[0] - wl[0], tau[1] - wl[1], tau[2] - wl[2])
        u = _mv(Ibi, _mtv(R, y))
        gz = (dt * gw1[0], dt * gw1[1], dt * gw1[2])
        _add_outer(G, gz, u)
        gs = _mtv(Ibi, _mtv(R, gz))
        gy = _mv(R, gs)
        _add_outer(G, y, gs)
        gtau = gy
        gc = (-gy[0], -gy[1], -gy[2])
        t = _xs(L, gc)
        gw[0] += t[0]
        gw[1] += t[1]
        gw[2] += t[2]
        gL = _xs(gc, w)
        _add_outer(G, gL, e)
        gf = _mtv(Ib, _mtv(R, gL))
        t = _mv(R, gf)
        gw[0] += t[0]
        gw[1] += t[1]
        gw[2] += t[2]
        _add_outer(G, w, gf)
    else:
        gtau = (0.0, 0.0, 0.0)

    # v1 = v + dt (F / m + g)
    gv = list(gv1)
    s = dt / m
    gF = (s * gv1[0], s * gv1[1], s * gv1[2])
    gm = -dt * (gv1[0] * F[0] + gv1[1] * F[1] + gv1[2] * F[2]) / (m * m)

    # scheduled forces: tau += (R a_b) x f
    for f_s, a_b in C.sched[k]:
        _add_outer(G, _xs(f_s, gtau), a_b)

    # contact branch: only vertices with positive penalty force carry gradient
    if active:
        ke, kd = C.k_e, C.k_d
        for i in active:
            rx, ry, _ = rw[i]
            fzi = fz[i]
            gmag = gF[2] + gtau[0] * ry - gtau[1] * rx
            gpen = ke * gmag
            grate = kd * gmag
            # pen = h - p_z - rw_z ; rate = -v_z - w_x rw_y + w_y rw_x
            gp[2] -= gpen
            gv[2] -= grate
            gw[0] -= grate * ry
            gw[1] += grate * rx
            grw = (-gtau[1] * fzi + grate * w[1], gtau[0] * fzi - grate * w[0], -gpen)
            _add_outer(G, grw, C.offsets[i])

    gr = _rotmat_vjp(q, G)
    gq = [gq[i] + gr[i] for i in range(4)]
    return gp, gq, gv, gw, gm


@dataclass
class GradReport:
    grad: float
    loss: float
    fd_grad: float | None = None
    rel_err: float | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "GradReport":
        return cls(**json.loads(text))


def grad_mass(tape: Tape, real: Trajectory, q_weight: float = 1.0) -> GradReport:
    """Exact dL/dm of the pose loss by a reverse sweep over the tape.

    The contact-active set recorded in the tape is held fixed (the usual
    one-sided derivative at switching instants).
    """
    sim = tape.trajectory
    loss, idx, gP, gQ = pose_loss(sim, real, q_weight, with_grads=True)
    n = tape.cfg.steps
    m = tape.mass
    # loss gradient w.r.t. every simulated sample (zero where unobserved)
    GP = np.zeros((n + 1, 3))
    GQ = np.zeros((n + 1, 4))
    np.add.at(GP, idx, gP)
    np.add.at(GQ, idx, gQ)
    GP = GP.tolist()
    GQ = GQ.tolist()
    C = tape.prepared
    gp = [0.0] * 3
    gq = [0.0] * 4
    gv = [0.0] * 3
    gw = [0.0] * 3
    gm = 0.0
    for k in range(n, 0, -1):
        a, b = GP[k], GQ[k]
        gp = [gp[0] + a[0], gp[1] + a[1], gp[2] + a[2]]
        gq = [gq[0] + b[0], gq[1] + b[1], gq[2] + b[2], gq[3] + b[3]]
        gp, gq, gv, gw, dm = _step_vjp(C, k - 1, tape.states[k - 1], tape.states[k], tape.steps[k - 1], m,
                                       gp, gq, gv, gw)
        gm += dm
    return GradReport(grad=float(gm), loss=loss)


# ---------------------------------------------------------------------------
# finite differences

def finite_diff_grad(loss_fn: Callable[[float], float], m: float, h: float) -> float:
    """Central difference ``(L(m+h) - L(m-h)) / 2h``; each side is a fresh evaluation."""
    if not m - h > 0.0:
        raise ValueError("finite difference requires m - h > 0")
    return (loss_fn(m + h) - loss_fn(m - h)) / (2.0 * h)


def rollout_loss_fn(init: RigidState, body: BodyModel, sched: ForceSchedule, cfg: SimConfig,
                    real: Trajectory, q_weight: float = 1.0) -> Callable[[float], float]:
    """``m -> pose_loss(rollout at m, real)`` for any integrator."""
    from .dynamics import rollout

    def f(m: float) -> float:
        traj, _ = rollout(init, body.with_mass(m), sched, cfg)
        return pose_loss(traj, real, q_weight)

    return f


def gradcheck(init, body, sched, cfg, real, *, rel_h: float = 1e-5, q_weight: float = 1.0) -> GradReport:
    """Adjoint gradient at ``body.mass`` together with its finite-difference check."""
    _, tape = record_rollout(init, body, sched, cfg)
    rep = grad_mass(tape, real, q_weight)
    fd = finite_diff_grad(rollout_loss_fn(init, body, sched, cfg, real, q_weight), body.mass, rel_h * body.mass)
    rep.fd_grad = float(fd)
    rep.rel_err = float(abs(rep.grad - fd) / max(abs(fd), 1e-12))
    return rep


# ---------------------------------------------------------------------------
# push-down closed form: z_k = alpha_k + beta_k / m

@dataclass
class PushdownModel:
    alpha: np.ndarray
    beta: np.ndarray
    z0: float
    v0: float


def pushdown_model(u_samples, z0: float, v0: float, g: float, dt: float) -> PushdownModel:
    """Sampled alpha/beta for the semi-implicit discretisation.

    ``u_samples[i]`` is the push-axis force during step ``i``; ``g`` is the
    gravity magnitude along that axis. Sample ``k`` (k = 0..len(u)) is

        z_k = z0 + k dt v0 - g dt^2 k(k+1)/2 + (dt^2 / m) sum_{i<k} (k - i) u_i

    which is what velocity-then-position Euler produces step by step.
    """
    u = np.asarray(u_samples, dtype=float)
    n = len(u)
    k = np.arange(n + 1, dtype=float)
    alpha = z0 + k * dt * v0 - g * dt * dt * k * (k + 1.0) / 2.0
    # sum_{i<k} (k - i) u_i = sum_{j<=k} U_j with U the inclusive prefix sum
    U = np.concatenate([[0.0], np.cumsum(u)])
    beta = dt * dt * np.concatenate([[0.0], np.cumsum(U[1:])])
    return PushdownModel(alpha, beta, float(z0), float(v0))


def pushdown_closed_form(u_samples, z0: float, v0: float, g: float, m: float, dt: float) -> np.ndarray:
    if not m > 0.0:
        raise ValueError("mass must be positive")
    model = pushdown_model(u_samples, z0, v0, g, dt)
    return model.alpha + model.beta / m


def pushdown_least_squares(observed_z, alpha, beta) -> tuple[float, float]:
    """Least squares in theta = 1/m; returns ``(m_hat, residual)``."""
    z = np.asarray(observed_z, dtype=float)
    a = np.asarray(alpha, dtype=float)
    b = np.asarray(beta, dtype=float)
    bb = float(b @ b)
    if not bb > 0.0:
        raise ValueError("sum of beta^2 is zero: mass is unobservable without an applied force")
    theta = float(b @ (z - a)) / bb
    if theta <= 0.0:
        raise NonPhysicalMassError(f"least-squares inverse mass {theta:.3g} <= 0")
    r = a + theta * b - z
    return 1.0 / theta, float(r @ r)

"""Single rigid body under gravity, scheduled pushes and penalty ground contact.

The body frame has its origin at the centre of mass of the mesh vertices
(uniform particle masses). Ground is the plane ``z = ground_height`` with
upward surface normal; contact is frictionless and acts only along z.
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .geomcore import (
    IDENTITY_QUAT,
    MeshModel,
    ParticleSet,
    center_of_mass,
    inertia_tensor,
    quat_integrate,
    quat_to_matrix,
    sample_contact_vertices,
)

GROUND_NORMAL = np.array([0.0, 0.0, 1.0])


class DynamicsError(ValueError):
    pass


class DivergenceError(RuntimeError):
    """Raised when a rollout leaves the finite / bounded regime."""

    def __init__(self, step: int, reason: str):
        super().__init__(f"rollout diverged at step {step}: {reason}")
        self.step = step
        self.reason = reason


class Integrator(str, enum.Enum):
    SEMI_IMPLICIT = "semi"
    EXPLICIT = "explicit"


# ---------------------------------------------------------------------------
# data types

@dataclass(frozen=True)
class RigidState:
    p: np.ndarray
    q: np.ndarray
    v: np.ndarray
    w: np.ndarray
    t: float = 0.0

    @classmethod
    def at_rest(cls, p, q=None) -> "RigidState":
        return cls(np.asarray(p, dtype=float), IDENTITY_QUAT.copy() if q is None else np.asarray(q, float),
                   np.zeros(3), np.zeros(3), 0.0)


@dataclass(frozen=True)
class BodyModel:
    mesh: MeshModel
    mass: float
    inertia_body: np.ndarray
    contact_vertices: tuple[int, ...]
    k_e: float = 1.0e4
    k_d: float = 10.0
    per_particle_full_mass: bool = True

    def __post_init__(self):
        if not self.mass > 0.0:
            raise DynamicsError("mass must be positive")
        if self.k_e < 0.0 or self.k_d < 0.0:
            raise DynamicsError("contact stiffness and damping must be non-negative")
        if len(self.contact_vertices) == 0:
            raise DynamicsError("at least one contact vertex is required")
        object.__setattr__(self, "contact_vertices", tuple(int(i) for i in self.contact_vertices))
        object.__setattr__(self, "inertia_body", np.asarray(self.inertia_body, dtype=float))

    @classmethod
    def from_mesh(cls, mesh: MeshModel, mass: float, *, k_e: float = 1.0e4, k_d: float = 10.0,
                  n_contact: int | None = None, seed: int = 0, inertia_mass: float | None = None,
                  per_particle_full_mass: bool = True) -> "BodyModel":
        """Build a body whose inertia comes from the vertices.

        ``inertia_mass`` (default: ``mass``) is spread uniformly over the
        vertices to get the inertia tensor; it is then held fixed even if the
        mass is later changed with :meth:`with_mass`.
        """
        ps = ParticleSet.uniform(mesh.vertices, inertia_mass if inertia_mass is not None else mass)
        inertia = inertia_tensor(ps, center_of_mass(ps))
        k = len(mesh.vertices) if n_contact is None else n_contact
        contacts = sample_contact_vertices(mesh, k, seed)
        return cls(mesh, mass, inertia, tuple(contacts), k_e, k_d, per_particle_full_mass)

    def with_mass(self, mass: float) -> "BodyModel":
        return replace(self, mass=float(mass))

    @property
    def com_mesh(self) -> np.ndarray:
        return self.mesh.vertices.mean(axis=0)

    @property
    def contact_offsets(self) -> np.ndarray:
        """Contact vertices in the body frame (relative to the COM)."""
        return self.mesh.vertices[list(self.contact_vertices)] - self.com_mesh


@dataclass(frozen=True)
class SimConfig:
    dt: float = 1.0e-3
    steps: int = 500
    gravity: tuple[float, float, float] = (0.0, 0.0, -9.81)
    integrator: Integrator = Integrator.SEMI_IMPLICIT
    ground_height: float = 0.0
    # desk-scale bodies never move this fast; treat it as numerical blow-up
    max_speed: float = 10.0

    def __post_init__(self):
        if not self.dt > 0.0:
            raise DynamicsError("dt must be positive")
        if self.steps < 1:
            raise DynamicsError("steps must be >= 1")
        object.__setattr__(self, "integrator", Integrator(self.integrator))


@dataclass(frozen=True)
class ForceEntry:
    t_start: float
    t_end: float
    force: tuple[float, float, float]
    point: tuple[float, float, float] = (0.0, 0.0, 0.0)  # body frame, relative to COM

    def __post_init__(self):
        if not self.t_start < self.t_end:
            raise DynamicsError("force entry needs t_start < t_end")


@dataclass(frozen=True)
class ForceSchedule:
    entries: tuple[ForceEntry, ...] = ()

    def __init__(self, entries: Iterable[ForceEntry] = ()):
        object.__setattr__(self, "entries", tuple(entries))

    def active(self, t: float) -> list[ForceEntry]:
        return [e for e in self.entries if e.t_start <= t < e.t_end]


@dataclass(frozen=True)
class ContactEvent:
    vertex_index: int
    point_world: np.ndarray
    normal: np.ndarray
    penetration: float
    penetration_rate: float
    force: np.ndarray


@dataclass
class Trajectory:
    times: np.ndarray  # (T,)
    positions: np.ndarray  # (T, 3)
    quats: np.ndarray  # (T, 4)
    frame_rate: float
    body: str = "body"

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        self.quats = np.asarray(self.quats, dtype=float).reshape(-1, 4)
        if not (len(self.times) == len(self.positions) == len(self.quats)):
            raise DynamicsError("trajectory arrays differ in length")
        if len(self.times) > 1 and np.any(np.diff(self.times) <= 0.0):
            raise DynamicsError("trajectory timestamps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.times)

    def slice(self, start: int, end: int) -> "Trajectory":
        return Trajectory(self.times[start:end], self.positions[start:end], self.quats[start:end],
                          self.frame_rate, self.body)

    # JSON lines: header {"frame_rate", "body"} then {"t", "p", "q"} per sample
    def to_jsonl(self) -> str:
        lines = [json.dumps({"frame_rate": float(self.frame_rate), "body": self.body})]
        for t, p, q in zip(self.times, self.positions, self.quats):
            lines.append(json.dumps({"t": float(t), "p": [float(x) for x in p], "q": [float(x) for x in q]}))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> "Trajectory":
        rows = [json.loads(line) for line in text.splitlines() if line.strip()]
        if not rows or "frame_rate" not in rows[0]:
            raise DynamicsError("trajectory file lacks a frame_rate header line")
        head, recs = rows[0], rows[1:]
        return cls(np.array([r["t"] for r in recs], dtype=float),
                   np.array([r["p"] for r in recs], dtype=float).reshape(-1, 3),
                   np.array([r["q"] for r in recs], dtype=float).reshape(-1, 4),
                   float(head["frame_rate"]), head.get("body", "body"))


# ---------------------------------------------------------------------------
# contact

def contact_force(penetration: float, penetration_rate: float, normal, k_e: float, k_d: float) -> np.ndarray:
    """Penalty force ``-n (k_e C + k_d dC/dt)``, never adhesive.

    ``normal`` points from the body into the obstacle (for a floor:
    ``(0, 0, -1)``), so a positive magnitude pushes the body out.
    """
    mag = k_e * penetration + k_d * penetration_rate
    if mag <= 0.0:
        return np.zeros(3)
    return -np.asarray(normal, dtype=float) * mag


def detect_ground_contacts(state: RigidState, body: BodyModel, ground_height: float = 0.0) -> list[ContactEvent]:
    R = quat_to_matrix(state.q)
    offsets = body.contact_offsets @ R.T
    events = []
    for idx, r in zip(body.contact_vertices, offsets):
        x = state.p + r
        if x[2] > ground_height:
            continue
        vel = state.v + np.cross(state.w, r)
        pen = ground_height - x[2]
        rate = -float(vel @ GROUND_NORMAL)
        f = contact_force(pen, rate, -GROUND_NORMAL, body.k_e, body.k_d)
        events.append(ContactEvent(idx, x, GROUND_NORMAL.copy(), pen, rate, f))
    return events


# ---------------------------------------------------------------------------
# integration

def _cross(a, b):
    return np.array([a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]])


def _inv_inertia(body: BodyModel) -> np.ndarray | None:
    I = body.inertia_body
    if abs(np.linalg.det(I)) <= 1e-12 * max(np.abs(I).max(), 1e-300) ** 3:
        return None
    return np.linalg.inv(I)


def _angular_update(w, tau, R, Ib, Ib_inv, dt):
    if not (w.any() or tau.any()):
        return w.copy()
    if Ib_inv is None:
        if np.any(tau != 0.0) or np.any(w != 0.0):
            raise DynamicsError("singular inertia with nonzero torque or spin")
        return w.copy()
    L = R @ (Ib @ (R.T @ w))
    return w + dt * (R @ (Ib_inv @ (R.T @ (tau - _cross(w, L)))))


def step_semi_implicit(state: RigidState, body: BodyModel, net_force, net_torque, cfg: SimConfig) -> RigidState:
    """Velocity first, then position with the new velocity."""
    dt = cfg.dt
    g = np.asarray(cfg.gravity, dtype=float)
    v1 = state.v + dt * (np.asarray(net_force, float) / body.mass + g)
    p1 = state.p + dt * v1
    R = quat_to_matrix(state.q)
    w1 = _angular_update(state.w, np.asarray(net_torque, float), R, body.inertia_body, _inv_inertia(body), dt)
    q1 = quat_integrate(state.q, w1, dt)
    return RigidState(p1, q1, v1, w1, state.t + dt)


def step_explicit(state: RigidState, body: BodyModel, net_force, net_torque, cfg: SimConfig) -> RigidState:
    """Forward Euler: position and orientation advance with the old velocities."""
    dt = cfg.dt
    g = np.asarray(cfg.gravity, dtype=float)
    v1 = state.v + dt * (np.asarray(net_force, float) / body.mass + g)
    p1 = state.p + dt * state.v
    R = quat_to_matrix(state.q)
    w1 = _angular_update(state.w, np.asarray(net_torque, float), R, body.inertia_body, _inv_inertia(body), dt)
    q1 = quat_integrate(state.q, state.w, dt)
    return RigidState(p1, q1, v1, w1, state.t + dt)


# The rollout loops below run on plain Python floats: for 3-vectors the
# per-call overhead of numpy dominates the arithmetic by an order of magnitude.

class _Prepared:
    """Per-rollout constants shared by the plain and the recording rollout."""

    def __init__(self, body: BodyModel, sched: ForceSchedule, cfg: SimConfig, t0: float):
        self.offsets = [tuple(r) for r in body.contact_offsets.tolist()]
        self.k_e = float(body.k_e)
        self.k_d = float(body.k_d)
        self.Ib = body.inertia_body.tolist()
        inv = _inv_inertia(body)
        self.Ib_inv = None if inv is None else inv.tolist()
        self.g = tuple(float(x) for x in cfg.gravity)
        self.h = float(cfg.ground_height)
        self.dt = float(cfg.dt)
        self.n_vertices = len(body.mesh.vertices)
        # scheduled (force, body-frame point) pairs active during each step
        self.sched = []
        for k in range(cfg.steps):
            active = sched.active(t0 + k * cfg.dt)
            self.sched.append([(tuple(map(float, e.force)), tuple(map(float, e.point))) for e in active])


def _rot(q):
    w, x, y, z = q
    return [[1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
            [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
            [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)]]


def _mv(M, x):
    return (M[0][0] * x[0] + M[0][1] * x[1] + M[0][2] * x[2],
            M[1][0] * x[0] + M[1][1] * x[1] + M[1][2] * x[2],
            M[2][0] * x[0] + M[2][1] * x[1] + M[2][2] * x[2])


def _mtv(M, x):
    return (M[0][0] * x[0] + M[1][0] * x[1] + M[2][0] * x[2],
            M[0][1] * x[0] + M[1][1] * x[1] + M[2][1] * x[2],
            M[0][2] * x[0] + M[1][2] * x[1] + M[2][2] * x[2])


def _xs(a, b):
    return (a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0])


def _contact_and_forces(P: _Prepared, p, q, v, w, k):
    """Aggregate contact and scheduled forces at step ``k``.

    Returns ``(F, tau, R, rw, fz, active)``: world force and torque about the
    COM, the rotation matrix, world-frame contact offsets, per-vertex penalty
    magnitudes and the indices whose penalty force is positive (the
    differentiable branch).
    """
    R = _rot(q)
    pz = p[2]
    vz = v[2]
    wx, wy = w[0], w[1]
    ke, kd, h = P.k_e, P.k_d, P.h
    rw = []
    fz = []
    active = []
    Fz = tx = ty = 0.0
    for i, o in enumerate(P.offsets):
        r = _mv(R, o)
        rw.append(r)
        pen = h - (pz + r[2])
        f = 0.0
        if pen >= 0.0:
            # dC/dt = -(v + w x r)_z
            mag = ke * pen + kd * (-(vz + wx * r[1] - wy * r[0]))
            if mag > 0.0:
                f = mag
                active.append(i)
                Fz += f
                # r x (0, 0, f)
                tx += r[1] * f
                ty -= r[0] * f
        fz.append(f)
    F = [0.0, 0.0, Fz]
    tau = [tx, ty, 0.0]
    for f_s, a_b in P.sched[k]:
        F[0] += f_s[0]
        F[1] += f_s[1]
        F[2] += f_s[2]
        t = _xs(_mv(R, a_b), f_s)
        tau[0] += t[0]
        tau[1] += t[1]
        tau[2] += t[2]
    return tuple(F), tuple(tau), R, rw, fz, active


def _check(k: int, p, v, w, max_speed: float):
    if not all(math.isfinite(x) for x in (*p, *v, *w)):
        raise DivergenceError(k, "non-finite state")
    sp = math.sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2])
    if sp > max_speed:
        raise DivergenceError(k, f"speed {sp:.3g} m/s exceeds {max_speed:g}")


def _spin_update(P: _Prepared, w, tau, R):
    """w + dt R Ib^-1 R^T (tau - w x (R Ib R^T w))."""
    if not (w[0] or w[1] or w[2] or tau[0] or tau[1] or tau[2]):
        return w
    if P.Ib_inv is None:
        raise DynamicsError("singular inertia with nonzero torque or spin")
    L = _mv(R, _mv(P.Ib, _mtv(R, w)))
    c = _xs(w, L)
    a = _mv(R, _mv(P.Ib_inv, _mtv(R, (tau[0] - c[0], tau[1] - c[1], tau[2] - c[2]))))
    dt = P.dt
    return (w[0] + dt * a[0], w[1] + dt * a[1], w[2] + dt * a[2])


def _quat_step(q, om, dt):
    a1, a2, a3 = om
    if a1 == 0.0 and a2 == 0.0 and a3 == 0.0:
        return q
    qw, qx, qy, qz = q
    h = 0.5 * dt
    nw = qw + h * (-a1 * qx - a2 * qy - a3 * qz)
    nx = qx + h * (a1 * qw + a2 * qz - a3 * qy)
    ny = qy + h * (-a1 * qz + a2 * qw + a3 * qx)
    nz = qz + h * (a1 * qy - a2 * qx + a3 * qw)
    n = math.sqrt(nw * nw + nx * nx + ny * ny + nz * nz)
    return (nw / n, nx / n, ny / n, nz / n)


def _advance(P: _Prepared, p, q, v, w, F, tau, R, m, explicit: bool, per_particle_full_mass: bool):
    dt = P.dt
    g = P.g
    if per_particle_full_mass:
        inv_m = 1.0 / m
        acc = (F[0] * inv_m + g[0], F[1] * inv_m + g[1], F[2] * inv_m + g[2])
    else:
        # conventional split: every vertex carries m/N
        mp = m / P.n_vertices
        tot = P.n_vertices * mp
        acc = tuple((F[i] + tot * g[i]) / tot for i in range(3))
    v1 = (v[0] + dt * acc[0], v[1] + dt * acc[1], v[2] + dt * acc[2])
    w1 = _spin_update(P, w, tau, R)
    if explicit:
        return (p[0] + dt * v[0], p[1] + dt * v[1], p[2] + dt * v[2]), _quat_step(q, w, dt), v1, w1
    return (p[0] + dt * v1[0], p[1] + dt * v1[1], p[2] + dt * v1[2]), _quat_step(q, w1, dt), v1, w1


def _as_tuple(x) -> tuple:
    return tuple(float(c) for c in x)


def rollout(init: RigidState, body: BodyModel, sched: ForceSchedule, cfg: SimConfig,
            *, collect_contacts: bool = False):
    """Integrate ``cfg.steps`` steps; returns ``(trajectory, contacts)``.

    The trajectory has ``steps + 1`` samples (initial pose included). When
    ``collect_contacts`` is set, ``contacts[k]`` lists the ContactEvents
    detected at the start of step ``k``; otherwise it is empty.
    """
    P = _Prepared(body, sched, cfg, init.t)
    explicit = cfg.integrator is Integrator.EXPLICIT
    n = cfg.steps
    times = init.t + cfg.dt * np.arange(n + 1)
    P_out = np.empty((n + 1, 3))
    Q_out = np.empty((n + 1, 4))
    p, q, v, w = (_as_tuple(x) for x in (init.p, init.q, init.v, init.w))
    P_out[0], Q_out[0] = p, q
    contacts: list[list[ContactEvent]] = []
    m = float(body.mass)
    for k in range(n):
        if collect_contacts:
            contacts.append(detect_ground_contacts(RigidState(np.array(p), np.array(q), np.array(v), np.array(w),
                                                              times[k]), body, P.h))
        F, tau, R, _, _, _ = _contact_and_forces(P, p, q, v, w, k)
        p, q, v, w = _advance(P, p, q, v, w, F, tau, R, m, explicit, body.per_particle_full_mass)
        _check(k, p, v, w, cfg.max_speed)
        P_out[k + 1], Q_out[k + 1] = p, q
    return Trajectory(times, P_out, Q_out, 1.0 / cfg.dt, body.mesh.name), contacts


def initial_placement(body: BodyModel, ground_height: float = 0.0, xy=(0.05, 0.05), clearance: float = 0.01) -> np.ndarray:
    """COM position that puts the lowest vertex ``clearance`` above the ground."""
    half_height = 0.5 * float(body.mesh.extent[2])
    return np.array([xy[0], xy[1], ground_height + half_height + clearance])

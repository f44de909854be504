"""Position-based dynamics for a free particle set.

One step: predict with semi-implicit Euler, run Gauss-Seidel sweeps that
project each constraint in list order, then recover velocities from the
position change. Constraints are inequality/equality functions ``C(x)``
corrected by ``dx_i = -s * lambda * w_i * grad_i C`` with
``lambda = C / sum_j w_j |grad_j C|^2`` (``w = 1/m``, ``s`` the stiffness).
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np


class PbdError(ValueError):
    pass


@dataclass(frozen=True)
class PbdParticleState:
    positions: np.ndarray  # (N, 3)
    prev_positions: np.ndarray  # (N, 3)
    velocities: np.ndarray  # (N, 3)
    inv_masses: np.ndarray  # (N,), 0 = pinned

    def __post_init__(self):
        arrs = [np.array(a, dtype=float) for a in (self.positions, self.prev_positions, self.velocities)]
        arrs = [a.reshape(-1, 3) for a in arrs]
        w = np.array(self.inv_masses, dtype=float).reshape(-1)
        if not (len(arrs[0]) == len(arrs[1]) == len(arrs[2]) == len(w)):
            raise PbdError("particle arrays differ in length")
        if np.any(w < 0.0):
            raise PbdError("inverse masses must be non-negative")
        for name, a in zip(("positions", "prev_positions", "velocities"), arrs):
            object.__setattr__(self, name, a)
        object.__setattr__(self, "inv_masses", w)

    @classmethod
    def at_rest(cls, positions, inv_masses) -> "PbdParticleState":
        x = np.array(positions, dtype=float).reshape(-1, 3)
        return cls(x, x.copy(), np.zeros_like(x), inv_masses)

    def __len__(self) -> int:
        return len(self.inv_masses)

    def to_jsonl_record(self, t: float) -> str:
        return json.dumps({"t": float(t), "particles": self.positions.tolist()})


class ConstraintKind(str, enum.Enum):
    DISTANCE = "distance"
    GROUND = "ground"


@dataclass(frozen=True)
class Constraint:
    """``Distance(i, j, rest)``: |x_i - x_j| = rest. ``Ground(i, height)``: z_i >= height."""
    kind: ConstraintKind
    i: int
    j: int = -1
    rest: float = 0.0
    height: float = 0.0
    stiffness: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", ConstraintKind(self.kind))
        if not 0.0 <= self.stiffness <= 1.0:
            raise PbdError("stiffness must lie in [0, 1]")
        if self.kind is ConstraintKind.DISTANCE:
            if self.rest < 0.0:
                raise PbdError("rest length must be >= 0")
            if self.i == self.j:
                raise PbdError("distance constraint needs two distinct particles")

    @classmethod
    def distance(cls, i: int, j: int, rest: float, stiffness: float = 1.0) -> "Constraint":
        return cls(ConstraintKind.DISTANCE, i, j, rest=rest, stiffness=stiffness)

    @classmethod
    def ground(cls, i: int, height: float = 0.0, stiffness: float = 1.0) -> "Constraint":
        return cls(ConstraintKind.GROUND, i, height=height, stiffness=stiffness)

    def value(self, x: np.ndarray) -> float:
        """Signed constraint function; for ground only negative values are violations."""
        if self.kind is ConstraintKind.DISTANCE:
            return float(np.linalg.norm(x[self.i] - x[self.j]) - self.rest)
        return float(x[self.i, 2] - self.height)

    def residual(self, x: np.ndarray) -> float:
        c = self.value(x)
        return abs(c) if self.kind is ConstraintKind.DISTANCE else max(-c, 0.0)

    def indices(self) -> tuple[int, ...]:
        return (self.i, self.j) if self.kind is ConstraintKind.DISTANCE else (self.i,)


@dataclass(frozen=True)
class Projection:
    state: PbdParticleState
    satisfiable: bool = True


def _check_indices(state: PbdParticleState, c: Constraint):
    n = len(state)
    for k in c.indices():
        if not 0 <= k < n:
            raise PbdError(f"constraint index {k} outside [0, {n})")


def pbd_predict(state: PbdParticleState, external_force_per_particle, dt: float) -> PbdParticleState:
    """``v += dt f / m`` (pinned particles untouched), then ``x += dt v``.

    ``external_force_per_particle`` is one force applied to each particle, or
    an ``(N, 3)`` array.
    """
    if not dt > 0.0:
        raise PbdError("dt must be positive")
    f = np.broadcast_to(np.asarray(external_force_per_particle, dtype=float), state.positions.shape)
    w = state.inv_masses[:, None]
    free = w > 0.0
    v = np.where(free, state.velocities + dt * w * f, state.velocities)
    x = np.where(free, state.positions + dt * v, state.positions)
    return PbdParticleState(x, state.positions.copy(), v, state.inv_masses)


def gravity_forces(state: PbdParticleState, g=(0.0, 0.0, -9.81)) -> np.ndarray:
    """Per-particle weight m_i g (zero for pinned particles)."""
    w = state.inv_masses
    m = np.divide(1.0, w, out=np.zeros_like(w), where=w > 0.0)
    return m[:, None] * np.asarray(g, dtype=float)


def project_constraint(state: PbdParticleState, c: Constraint) -> Projection:
    """Apply one mass-weighted correction for ``c``.

    Returns the new state and whether the constraint could be acted on: a
    violated constraint whose particles are all pinned (or, for a distance
    constraint, coincident) is reported unsatisfiable and left unchanged.
    """
    _check_indices(state, c)
    x = state.positions
    w = state.inv_masses
    if c.kind is ConstraintKind.DISTANCE:
        d = x[c.i] - x[c.j]
        length = math.sqrt(float(d @ d))
        C = length - c.rest
        if C == 0.0:
            return Projection(state)
        wsum = w[c.i] + w[c.j]
        if wsum == 0.0 or length == 0.0:
            return Projection(state, satisfiable=False)
        n = d / length  # grad_i C = n, grad_j C = -n
        lam = C / wsum
        out = x.copy()
        out[c.i] = x[c.i] - c.stiffness * lam * w[c.i] * n
        out[c.j] = x[c.j] + c.stiffness * lam * w[c.j] * n
        return Projection(replace(state, positions=out))
    # ground: C = z - h >= 0, gradient (0, 0, 1)
    C = x[c.i, 2] - c.height
    if C >= 0.0:
        return Projection(state)
    if w[c.i] == 0.0:
        return Projection(state, satisfiable=False)
    lam = C / w[c.i]
    out = x.copy()
    out[c.i, 2] = x[c.i, 2] - c.stiffness * lam * w[c.i]
    return Projection(replace(state, positions=out))


def pbd_velocity_update(state: PbdParticleState, dt: float) -> PbdParticleState:
    if not dt > 0.0:
        raise PbdError("dt must be positive")
    return replace(state, velocities=(state.positions - state.prev_positions) / dt)


def max_residual(state: PbdParticleState, constraints) -> float:
    return max((c.residual(state.positions) for c in constraints), default=0.0)


@dataclass
class StepInfo:
    residuals: list = field(default_factory=list)  # max residual after each sweep
    unsatisfiable: list = field(default_factory=list)  # constraint positions flagged at least once


def pbd_step(state: PbdParticleState, constraints, forces, dt: float, iterations: int,
             info: StepInfo | None = None) -> PbdParticleState:
    """Predict, ``iterations`` Gauss-Seidel sweeps in list order, velocity update."""
    if iterations < 1:
        raise PbdError("iterations must be >= 1")
    constraints = list(constraints)
    s = pbd_predict(state, forces, dt)
    for _ in range(iterations):
        for k, c in enumerate(constraints):
            res = project_constraint(s, c)
            s = res.state
            if not res.satisfiable and info is not None and k not in info.unsatisfiable:
                info.unsatisfiable.append(k)
        if info is not None:
            info.residuals.append(max_residual(s, constraints))
    return pbd_velocity_update(s, dt)


CHAIN_DT = 2.0e-3


def chain_fixture(n: int = 8, link: float = 0.05, height: float = 0.5, mass: float = 0.01,
                  tilt: float = 0.2) -> tuple[PbdParticleState, list[Constraint]]:
    """A straight chain of ``n`` particles tilted by ``tilt`` rad, above the ground.

    Constraints: consecutive distance links, then one ground plane per particle.
    """
    s = np.arange(n) * link
    pos = np.column_stack([s * math.cos(tilt), np.zeros(n), height + s * math.sin(tilt)])
    state = PbdParticleState.at_rest(pos, np.full(n, 1.0 / mass))
    cons = [Constraint.distance(i, i + 1, link) for i in range(n - 1)]
    cons += [Constraint.ground(i, 0.0) for i in range(n)]
    return state, cons

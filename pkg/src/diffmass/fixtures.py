"""Built-in scenarios used by the tests, the acceptance run and the CLI.

Identification fixtures push a 5 cm cube across frictionless ground with
soft contact (4 bottom vertices, ``k_e = 1000`` N/m and ``k_d = 0.4`` N s/m
each). That contact is stable under the semi-implicit step down to about
1.4 g, so descent can start from 2 g. The push impulse (0.015 N s) keeps
the cube under the 10 m/s divergence bound even at 2 g.
"""
from __future__ import annotations

import numpy as np

from .dynamics import ForceEntry, ForceSchedule, Integrator, RigidState
from .geomcore import box_mesh, quat_from_axis_angle
from .scenario import NoiseModel, Scenario

CUBE = (0.05, 0.05, 0.05)
SOFT_KE = 1.0e3
SOFT_KD = 0.4
PUSH = ForceSchedule([ForceEntry(0.1, 0.2, (0.15, 0.0, 0.0))])

# tabletop tracking noise: 2 mm isotropic, 5 mm constant z offset
DESK_NOISE = NoiseModel(pos_sigma=0.002, z_bias=0.005, quat_sigma=0.0, seed=0)

RECOVERY_MASSES = (0.05, 0.1, 0.2, 0.8)
# identical geometry, masses in the 82:125:218 g ratio
TRIPLET_MASSES = (0.082, 0.125, 0.218)


def _mesh():
    return box_mesh(CUBE, name="cube")


def push_scenario(true_mass: float, *, noise: NoiseModel | None = None, m_prior: float | None = None,
                  name: str | None = None) -> Scenario:
    """Horizontal push through the COM of a cube resting on the ground."""
    return Scenario(mesh=_mesh(), true_mass=true_mass, k_e=SOFT_KE, k_d=SOFT_KD, schedule=PUSH,
                    noise=noise or NoiseModel(), m_prior=m_prior, mesh_ref={"box": list(CUBE)},
                    name=name or f"push_{round(true_mass * 1000)}g")


def triplet_scenarios(noise: NoiseModel | None = None) -> list[Scenario]:
    # one shared prior: the three objects look the same
    return [push_scenario(m, noise=noise, m_prior=0.1, name=f"triplet_{round(m * 1000)}g") for m in TRIPLET_MASSES]


def stiff_scenario(noise: NoiseModel | None = None, integrator: Integrator = Integrator.SEMI_IMPLICIT) -> Scenario:
    """Stiff contact: total damping 20 N s/m is below k dt = 40 N s/m.

    Explicit Euler is unstable in sustained contact here; semi-implicit is
    stable above about 20 g, so descent starts at 30 g. Observations come
    from a 10x finer semi-implicit reference.
    """
    return Scenario(mesh=_mesh(), true_mass=0.1, m_init=0.03, k_e=1.0e4, k_d=5.0, schedule=PUSH,
                    noise=noise or NoiseModel(), integrator=integrator, ref_substeps=10,
                    mesh_ref={"box": list(CUBE)}, name="stiff_push")


def pushdown_free_scenario(true_mass: float = 0.1, noise: NoiseModel | None = None) -> Scenario:
    """Contact-free vertical push: z is affine in 1/m."""
    return Scenario(mesh=_mesh(), true_mass=true_mass, k_e=SOFT_KE, k_d=SOFT_KD,
                    schedule=ForceSchedule([ForceEntry(0.05, 0.25, (0.0, 0.0, -0.04))]),
                    noise=noise or NoiseModel(), init=RigidState.at_rest(np.array([0.0, 0.0, 5.0])),
                    mesh_ref={"box": list(CUBE)}, name="pushdown_free")


def ballistic_scenario() -> Scenario:
    init = RigidState(np.array([0.0, 0.0, 1.0]), np.array([1.0, 0.0, 0.0, 0.0]), np.array([1.0, 0.5, 4.0]),
                      np.zeros(3))
    return Scenario(mesh=_mesh(), true_mass=0.1, steps=1000, init=init, ground_height=-100.0,
                    mesh_ref={"box": list(CUBE)}, name="ballistic")


def unforced_free_scenario() -> Scenario:
    """No push, no contact: every mass yields the same trajectory."""
    return Scenario(mesh=_mesh(), true_mass=0.1, init=RigidState.at_rest(np.array([0.0, 0.0, 2.0])),
                    mesh_ref={"box": list(CUBE)}, name="unforced_free")


# -- gradient-fidelity fixtures --------------------------------------------
# Each pairs a scenario with an evaluation mass. Contact cases are evaluated
# at masses where no contact switch moves between m - h and m + h
# (h = 1e-5 m); across a switch the loss itself jumps and no finite
# difference can agree with a derivative.

_GRAD_BOX = (0.05, 0.04, 0.03)


def _gbox():
    return box_mesh(_GRAD_BOX, name="gradbox")


def gradient_fixtures() -> list[tuple[Scenario, float, bool]]:
    """``(scenario, eval_mass, has_contact)`` for the five fidelity cases."""
    mref = {"box": list(_GRAD_BOX)}
    common = dict(mesh=_gbox(), true_mass=0.1, k_e=1.0e4, k_d=10.0, n_contact=8, inertia_mass=0.1, mesh_ref=mref)
    out = []
    out.append((Scenario(**common, name="grad_pushdown_free",
                         schedule=ForceSchedule([ForceEntry(0.05, 0.25, (0.0, 0.0, 1.5))]),
                         init=RigidState.at_rest(np.array([0.0, 0.0, 1.0]))), 0.13, False))
    out.append((Scenario(**common, name="grad_spin_free",
                         schedule=ForceSchedule([ForceEntry(0.05, 0.25, (0.3, 0.1, 1.2), (0.02, 0.01, 0.015))]),
                         init=RigidState(np.array([0.0, 0.0, 1.0]), quat_from_axis_angle([1, 2, 3], 0.4),
                                         np.zeros(3), np.array([3.0, -2.0, 5.0]))), 0.08, False))
    out.append((Scenario(**common, name="grad_slide", clearance=0.01,
                         schedule=ForceSchedule([ForceEntry(0.1, 0.3, (0.2, 0.0, 0.0), (-0.025, 0.0, 0.0))])),
                0.07, True))
    out.append((Scenario(**common, name="grad_tilt", clearance=0.01,
                         schedule=ForceSchedule([ForceEntry(0.1, 0.3, (0.3, 0.05, 0.0), (-0.025, 0.0, 0.012))])),
                0.12, True))
    # softer, better-damped floor so the tumbling drop settles after a few contacts
    common.update(k_e=2.0e3, k_d=5.0)
    out.append((Scenario(**common, name="grad_dropspin",
                         init=RigidState(np.array([0.05, 0.05, 0.045]), quat_from_axis_angle([1, 1, 0], 0.3),
                                         np.zeros(3), np.array([2.0, -1.0, 0.5]))), 0.15, True))
    return out

"""Scenario files: one object, one push schedule, one observation setup.

A scenario is a JSON object::

    {"mesh": "cube.obj" | {"box": [sx, sy, sz]},
     "true_mass_kg": 0.1, "m_init_kg": 0.002, "k_e": 1000, "k_d": 0.5,
     "dt": 0.001, "steps": 500, "ground_height": 0.0,
     "schedule": [{"t0": 0.1, "t1": 0.3, "force": [x, y, z], "point": [x, y, z]}],
     "noise": {"pos_sigma": 0.002, "z_bias": 0.005, "quat_sigma": 0.0, "seed": 0},
     "sync": {"start": 0, "end": 501, "recenter": [0, 0, 0]}}

Optional extra keys: ``name``, ``integrator``, ``n_contact``, ``contact_seed``,
``inertia_mass_kg``, ``m_prior_kg``, ``q_weight``, ``max_speed``,
``gravity``, ``clearance``, ``ref_substeps`` and ``init`` (``{"p", "q", "v",
"w"}``; by default the body rests with its lowest vertex ``clearance`` above
the ground).
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .dynamics import (
    BodyModel,
    ForceEntry,
    ForceSchedule,
    Integrator,
    RigidState,
    SimConfig,
    initial_placement,
    rollout,
)
from .geomcore import GeometryError, MeshModel, MeshParseError, box_mesh, load_mesh, quat_normalize


class ScenarioError(ValueError):
    """Malformed scenario file or inconsistent scenario values."""


@dataclass(frozen=True)
class NoiseModel:
    pos_sigma: float = 0.0
    z_bias: float = 0.0
    quat_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.pos_sigma < 0.0 or self.quat_sigma < 0.0:
            raise ScenarioError("noise sigmas must be non-negative")

    @property
    def is_zero(self) -> bool:
        return self.pos_sigma == 0.0 and self.z_bias == 0.0 and self.quat_sigma == 0.0


@dataclass(frozen=True)
class SyncSpec:
    start_index: int = 0
    end_index: int | None = None  # exclusive; None means "to the end"
    recenter: tuple[float, float, float] = (0.0, 0.0, 0.0)
    resample_rate: float | None = None

    def __post_init__(self):
        if self.start_index < 0:
            raise ScenarioError("sync start must be >= 0")
        if self.end_index is not None and not self.start_index < self.end_index:
            raise ScenarioError("sync window needs start < end")
        if self.resample_rate is not None and not self.resample_rate > 0.0:
            raise ScenarioError("resample rate must be positive")
        object.__setattr__(self, "recenter", tuple(float(x) for x in self.recenter))


@dataclass(frozen=True)
class Scenario:
    mesh: MeshModel
    true_mass: float
    m_init: float = 0.002
    k_e: float = 1.0e3
    k_d: float = 0.5
    dt: float = 1.0e-3
    steps: int = 500
    ground_height: float = 0.0
    schedule: ForceSchedule = field(default_factory=ForceSchedule)
    noise: NoiseModel = field(default_factory=NoiseModel)
    sync: SyncSpec = field(default_factory=SyncSpec)
    name: str = "scenario"
    integrator: Integrator = Integrator.SEMI_IMPLICIT
    n_contact: int = 4
    contact_seed: int = 0
    inertia_mass: float | None = None
    m_prior: float | None = None
    q_weight: float = 1.0
    max_speed: float = 10.0
    gravity: tuple[float, float, float] = (0.0, 0.0, -9.81)
    init: RigidState | None = None
    clearance: float = 0.0
    ref_substeps: int = 1  # observations come from a rollout this many times finer
    mesh_ref: object = None  # what the file said, for round-tripping

    def __post_init__(self):
        if not self.true_mass > 0.0:
            raise ScenarioError("true_mass_kg must be positive")
        if not self.m_init > 0.0:
            raise ScenarioError("m_init_kg must be positive")
        if self.ref_substeps < 1:
            raise ScenarioError("ref_substeps must be >= 1")
        object.__setattr__(self, "integrator", Integrator(self.integrator))

    # -- derived objects --------------------------------------------------
    def body(self, mass: float | None = None) -> BodyModel:
        m = self.true_mass if mass is None else mass
        inertia_mass = self.inertia_mass if self.inertia_mass is not None else self.true_mass
        return BodyModel.from_mesh(self.mesh, m, k_e=self.k_e, k_d=self.k_d, n_contact=self.n_contact,
                                   seed=self.contact_seed, inertia_mass=inertia_mass)

    def sim_config(self, integrator: Integrator | str | None = None) -> SimConfig:
        return SimConfig(dt=self.dt, steps=self.steps, gravity=tuple(self.gravity),
                         integrator=Integrator(integrator) if integrator is not None else self.integrator,
                         ground_height=self.ground_height, max_speed=self.max_speed)

    def initial_state(self) -> RigidState:
        if self.init is not None:
            return self.init
        p = initial_placement(self.body(), self.ground_height, clearance=self.clearance)
        return RigidState.at_rest(p)

    def simulate(self, mass: float | None = None, integrator=None, **kw):
        return rollout(self.initial_state(), self.body(mass), self.schedule, self.sim_config(integrator), **kw)

    @property
    def prior_mass(self) -> float:
        """Mass-scale guess used to pick an optimizer schedule."""
        return self.m_prior if self.m_prior is not None else self.true_mass

    def with_(self, **kw) -> "Scenario":
        return replace(self, **kw)

    # -- serialization ----------------------------------------------------
    def to_dict(self) -> dict:
        d = {
            "name": self.name,
            "mesh": self.mesh_ref if self.mesh_ref is not None else {"box": [float(x) for x in self.mesh.extent]},
            "true_mass_kg": self.true_mass,
            "m_init_kg": self.m_init,
            "k_e": self.k_e,
            "k_d": self.k_d,
            "dt": self.dt,
            "steps": self.steps,
            "ground_height": self.ground_height,
            "schedule": [{"t0": e.t_start, "t1": e.t_end, "force": list(map(float, e.force)),
                          "point": list(map(float, e.point))} for e in self.schedule.entries],
            "noise": asdict(self.noise),
            "sync": {"start": self.sync.start_index, "end": self.sync.end_index,
                     "recenter": list(self.sync.recenter), "resample_rate": self.sync.resample_rate},
            "integrator": self.integrator.value,
            "n_contact": self.n_contact,
            "contact_seed": self.contact_seed,
            "inertia_mass_kg": self.inertia_mass,
            "m_prior_kg": self.m_prior,
            "q_weight": self.q_weight,
            "max_speed": self.max_speed,
            "gravity": list(self.gravity),
            "clearance": self.clearance,
            "ref_substeps": self.ref_substeps,
        }
        if self.init is not None:
            d["init"] = {k: [float(x) for x in getattr(self.init, k)] for k in ("p", "q", "v", "w")}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


_KNOWN = {"name", "mesh", "true_mass_kg", "m_init_kg", "k_e", "k_d", "dt", "steps", "ground_height",
          "schedule", "noise", "sync", "integrator", "n_contact", "contact_seed", "inertia_mass_kg",
          "m_prior_kg", "q_weight", "max_speed", "gravity", "init", "clearance", "ref_substeps"}


def _vec(x, n: int, what: str) -> tuple[float, ...]:
    try:
        out = tuple(float(v) for v in x)
    except (TypeError, ValueError):
        raise ScenarioError(f"{what}: expected {n} numbers") from None
    if len(out) != n or not all(math.isfinite(v) for v in out):
        raise ScenarioError(f"{what}: expected {n} finite numbers")
    return out


def _mesh_from(ref, base: Path | None) -> MeshModel:
    if isinstance(ref, dict) and "box" in ref:
        return box_mesh(_vec(ref["box"], 3, "mesh.box"), name="box")
    if isinstance(ref, str):
        path = Path(ref)
        if not path.is_absolute() and base is not None:
            path = base / path
        try:
            data = path.read_bytes()
        except OSError as exc:
            raise ScenarioError(f"cannot read mesh {path}: {exc.strerror}") from None
        try:
            return load_mesh(data, name=path.stem)
        except MeshParseError as exc:
            raise ScenarioError(f"{path}: {exc}") from None
    raise ScenarioError("mesh must be a path or {\"box\": [sx, sy, sz]}")


def scenario_from_dict(d: dict, base: Path | None = None) -> Scenario:
    if not isinstance(d, dict):
        raise ScenarioError("scenario must be a JSON object")
    unknown = set(d) - _KNOWN
    if unknown:
        raise ScenarioError(f"unknown scenario keys: {sorted(unknown)}")
    for key in ("mesh", "true_mass_kg"):
        if key not in d:
            raise ScenarioError(f"missing required key {key!r}")
    try:
        mesh = _mesh_from(d["mesh"], base)
        entries = []
        for i, e in enumerate(d.get("schedule", [])):
            entries.append(ForceEntry(float(e["t0"]), float(e["t1"]), _vec(e["force"], 3, f"schedule[{i}].force"),
                                      _vec(e.get("point", (0, 0, 0)), 3, f"schedule[{i}].point")))
        nz = d.get("noise") or {}
        noise = NoiseModel(float(nz.get("pos_sigma", 0.0)), float(nz.get("z_bias", 0.0)),
                           float(nz.get("quat_sigma", 0.0)), int(nz.get("seed", 0)))
        sy = d.get("sync") or {}
        sync = SyncSpec(int(sy.get("start", 0)), None if sy.get("end") is None else int(sy["end"]),
                        _vec(sy.get("recenter", (0, 0, 0)), 3, "sync.recenter"),
                        None if sy.get("resample_rate") is None else float(sy["resample_rate"]))
        init = None
        if "init" in d:
            i0 = d["init"]
            init = RigidState(np.array(_vec(i0["p"], 3, "init.p")),
                              quat_normalize(np.array(_vec(i0.get("q", (1, 0, 0, 0)), 4, "init.q"))),
                              np.array(_vec(i0.get("v", (0, 0, 0)), 3, "init.v")),
                              np.array(_vec(i0.get("w", (0, 0, 0)), 3, "init.w")))
        opt = lambda k: None if d.get(k) is None else float(d[k])  # noqa: E731
        sc = Scenario(
            mesh=mesh, true_mass=float(d["true_mass_kg"]), m_init=float(d.get("m_init_kg", 0.002)),
            k_e=float(d.get("k_e", 1.0e3)), k_d=float(d.get("k_d", 0.5)), dt=float(d.get("dt", 1.0e-3)),
            steps=int(d.get("steps", 500)), ground_height=float(d.get("ground_height", 0.0)),
            schedule=ForceSchedule(entries), noise=noise, sync=sync, name=str(d.get("name", "scenario")),
            integrator=d.get("integrator", "semi"), n_contact=int(d.get("n_contact", 4)),
            contact_seed=int(d.get("contact_seed", 0)), inertia_mass=opt("inertia_mass_kg"),
            m_prior=opt("m_prior_kg"), q_weight=float(d.get("q_weight", 1.0)),
            max_speed=float(d.get("max_speed", 10.0)),
            gravity=_vec(d.get("gravity", (0.0, 0.0, -9.81)), 3, "gravity"), init=init,
            clearance=float(d.get("clearance", 0.0)), ref_substeps=int(d.get("ref_substeps", 1)),
            mesh_ref=d["mesh"])
        sc.sim_config()  # validates dt / steps
        if sc.n_contact > len(mesh.vertices):
            raise ScenarioError(f"n_contact={sc.n_contact} exceeds the mesh's {len(mesh.vertices)} vertices")
    except ScenarioError:
        raise
    except (KeyError, TypeError) as exc:
        raise ScenarioError(f"malformed scenario: {exc!r}") from None
    except (ValueError, GeometryError) as exc:
        raise ScenarioError(str(exc)) from None
    return sc


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ScenarioError(f"cannot read {path}: {exc.strerror}") from None
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    return scenario_from_dict(d, path.parent)

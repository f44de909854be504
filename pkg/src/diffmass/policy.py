"""Force-aware grasp policy: encoding, three-headed MLP, grasp environment.

Network: every vertex feature row (positional encoding plus the normalized
mass) goes through three shared 256-wide ReLU layers, rows are mean-pooled,
and three linear heads read the pooled vector: 16 joint targets, 2 contact
rewards (sigmoid) and 1 force command (sigmoid). Gradients are written out
by hand; training uses Adam.

The grasp environment is a force-balance abstraction of a four-finger pinch
(thumb opposing the other fingers). A finger touches the object when its
aperture matches the object width; the object stays put while the total
squeeze lies in ``[gamma m g, kappa m g]``, slips out below that and is
knocked out of the hand above it.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Protocol, Sequence

import numpy as np

from .dynamics import BodyModel, ForceEntry, RigidState, SimConfig, step_semi_implicit
from .geomcore import MeshModel, box_mesh

N_JOINTS = 16
N_FINGERS = 4
HIDDEN = 256
JOINT_LIMIT = math.pi


class PolicyError(ValueError):
    pass


class NonFiniteLoss(RuntimeError):
    def __init__(self, phase: int, epoch: int, batch: int):
        super().__init__(f"non-finite loss in phase {phase}, epoch {epoch}, batch {batch}")
        self.batch = batch


# ---------------------------------------------------------------------------
# encoding

@dataclass(frozen=True)
class EncodedInput:
    """Flat features: per-vertex encodings (row-major) followed by m / m_ref."""
    features: np.ndarray
    vertex_count: int
    band_count: int

    def __post_init__(self):
        f = np.asarray(self.features, dtype=float).reshape(-1)
        width = 3 + 6 * self.band_count
        if len(f) != self.vertex_count * width + 1:
            raise PolicyError(f"feature length {len(f)} != {self.vertex_count}*{width}+1")
        if not np.all(np.isfinite(f)):
            raise PolicyError("non-finite features")
        object.__setattr__(self, "features", f)

    @property
    def mass_feature(self) -> float:
        return float(self.features[-1])

    def rows(self) -> np.ndarray:
        """(V, 3 + 6B + 1): encoding of each vertex with the mass appended."""
        width = 3 + 6 * self.band_count
        enc = self.features[:-1].reshape(self.vertex_count, width)
        return np.hstack([enc, np.full((self.vertex_count, 1), self.features[-1])])


def positional_encode(vertices, bands: int) -> np.ndarray:
    """Per-vertex Fourier features, shape ``(V, 3 + 6 * bands)``.

    Coordinates are first mapped to [-1, 1] by the bounding box (an axis of
    zero extent maps to 0). Row layout: ``x, y, z`` then for each band ``b``
    and axis ``c``: ``sin(2^b pi c), cos(2^b pi c)``.
    """
    if bands < 0:
        raise PolicyError("bands must be >= 0")
    v = np.asarray(vertices, dtype=float).reshape(-1, 3)
    lo, hi = v.min(axis=0), v.max(axis=0)
    ext = hi - lo
    safe = np.where(ext > 0.0, ext, 1.0)
    c = np.where(ext > 0.0, 2.0 * (v - lo) / safe - 1.0, 0.0)
    cols = [c]
    for b in range(bands):
        arg = (2.0 ** b) * math.pi * c
        s, co = np.sin(arg), np.cos(arg)
        cols.append(np.stack([s, co], axis=2).reshape(len(v), 6))
    return np.hstack(cols)


def encode_input(vertices, mass: float, bands: int = 4, m_ref: float = 1.0) -> EncodedInput:
    pe = positional_encode(vertices, bands)
    return EncodedInput(np.concatenate([pe.reshape(-1), [mass / m_ref]]), len(pe), bands)


# ---------------------------------------------------------------------------
# network

PARAM_ORDER = ("W1", "b1", "W2", "b2", "W3", "b3", "Wa", "ba", "Wr", "br", "Wf", "bf")
ACTION_PARAMS = ("Wa", "ba")
# phase 2 moves only the reward and force heads; the trunk feeds the action
# head too and would drift the executed grasp without any action label
PHASE2_FROZEN = ("W1", "b1", "W2", "b2", "W3", "b3") + ACTION_PARAMS


def param_shapes(in_dim: int, hidden: int = HIDDEN) -> dict[str, tuple[int, ...]]:
    return {"W1": (in_dim, hidden), "b1": (hidden,), "W2": (hidden, hidden), "b2": (hidden,),
            "W3": (hidden, hidden), "b3": (hidden,), "Wa": (hidden, N_JOINTS), "ba": (N_JOINTS,),
            "Wr": (hidden, 2), "br": (2,), "Wf": (hidden, 1), "bf": (1,)}


@dataclass
class GraspMLPParams:
    arrays: dict
    bands: int
    m_ref: float = 1.0
    meta: dict = field(default_factory=dict)  # free-form, e.g. the training masses

    def __post_init__(self):
        in_dim = 3 + 6 * self.bands + 1
        hidden = self.arrays["W1"].shape[1] if "W1" in self.arrays else HIDDEN
        want = param_shapes(in_dim, hidden)
        for k, shp in want.items():
            if k not in self.arrays:
                raise PolicyError(f"missing parameter {k}")
            a = np.asarray(self.arrays[k], dtype=float)
            if a.shape != shp:
                raise PolicyError(f"{k} has shape {a.shape}, expected {shp}")
            self.arrays[k] = a

    @property
    def in_dim(self) -> int:
        return 3 + 6 * self.bands + 1

    @classmethod
    def init(cls, bands: int = 4, seed: int = 0, hidden: int = HIDDEN, m_ref: float = 1.0) -> "GraspMLPParams":
        """Uniform fan-in initialisation, zero biases."""
        rng = np.random.default_rng(seed)
        arrays = {}
        for k, shp in param_shapes(3 + 6 * bands + 1, hidden).items():
            if k.startswith("W"):
                bound = 1.0 / math.sqrt(shp[0])
                arrays[k] = rng.uniform(-bound, bound, shp)
            else:
                arrays[k] = np.zeros(shp)
        return cls(arrays, bands, m_ref)

    def copy(self) -> "GraspMLPParams":
        return GraspMLPParams({k: v.copy() for k, v in self.arrays.items()}, self.bands, self.m_ref,
                              dict(self.meta))

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.arrays.values())

    # binary: one JSON header line, then little-endian float32 in PARAM_ORDER
    def to_bytes(self) -> bytes:
        header = {"format": "graspmlp-f32le", "bands": self.bands, "m_ref": self.m_ref, "meta": self.meta,
                  "order": list(PARAM_ORDER), "shapes": {k: list(self.arrays[k].shape) for k in PARAM_ORDER}}
        body = b"".join(self.arrays[k].astype("<f4").tobytes() for k in PARAM_ORDER)
        return (json.dumps(header, sort_keys=True) + "\n").encode() + body

    @classmethod
    def from_bytes(cls, data: bytes) -> "GraspMLPParams":
        nl = data.find(b"\n")
        if nl < 0:
            raise PolicyError("params file lacks a JSON header line")
        try:
            header = json.loads(data[:nl])
        except json.JSONDecodeError as exc:
            raise PolicyError(f"bad params header: {exc.msg}") from None
        off = nl + 1
        arrays = {}
        for k in header["order"]:
            shp = tuple(header["shapes"][k])
            n = int(np.prod(shp))
            chunk = data[off:off + 4 * n]
            if len(chunk) != 4 * n:
                raise PolicyError("params file truncated")
            arrays[k] = np.frombuffer(chunk, dtype="<f4").astype(float).reshape(shp)
            off += 4 * n
        if off != len(data):
            raise PolicyError("trailing bytes after parameters")
        return cls(arrays, int(header["bands"]), float(header["m_ref"]), dict(header.get("meta", {})))


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class _Cache:
    X: np.ndarray
    z1: np.ndarray
    h1: np.ndarray
    z2: np.ndarray
    h2: np.ndarray
    z3: np.ndarray
    h3: np.ndarray
    pooled: np.ndarray
    A: np.ndarray
    r: np.ndarray
    f: np.ndarray


def forward_batch(params: GraspMLPParams, X: np.ndarray) -> _Cache:
    """``X``: (B, V, D) vertex rows. Returns all intermediates."""
    P = params.arrays
    if X.ndim != 3 or X.shape[2] != params.in_dim:
        raise PolicyError(f"input rows have width {X.shape[-1]}, network expects {params.in_dim}")
    z1 = X @ P["W1"] + P["b1"]
    h1 = np.maximum(z1, 0.0)
    z2 = h1 @ P["W2"] + P["b2"]
    h2 = np.maximum(z2, 0.0)
    z3 = h2 @ P["W3"] + P["b3"]
    h3 = np.maximum(z3, 0.0)
    pooled = h3.mean(axis=1)
    A = pooled @ P["Wa"] + P["ba"]
    r = _sigmoid(pooled @ P["Wr"] + P["br"])
    f = _sigmoid(pooled @ P["Wf"] + P["bf"])[:, 0]
    return _Cache(X, z1, h1, z2, h2, z3, h3, pooled, A, r, f)


def backward_batch(params: GraspMLPParams, c: _Cache, dA, dzr, dzf) -> dict:
    """Parameter gradients given gradients w.r.t. A and the r / f logits."""
    P = params.arrays
    g = {}
    g["Wa"] = c.pooled.T @ dA
    g["ba"] = dA.sum(axis=0)
    g["Wr"] = c.pooled.T @ dzr
    g["br"] = dzr.sum(axis=0)
    dzf2 = dzf[:, None]
    g["Wf"] = c.pooled.T @ dzf2
    g["bf"] = dzf2.sum(axis=0)
    dpool = dA @ P["Wa"].T + dzr @ P["Wr"].T + dzf2 @ P["Wf"].T
    V = c.X.shape[1]
    dh3 = np.repeat(dpool[:, None, :] / V, V, axis=1)
    dz3 = dh3 * (c.z3 > 0.0)
    g["W3"] = np.einsum("bvi,bvj->ij", c.h2, dz3)
    g["b3"] = dz3.sum(axis=(0, 1))
    dz2 = (dz3 @ P["W3"].T) * (c.z2 > 0.0)
    g["W2"] = np.einsum("bvi,bvj->ij", c.h1, dz2)
    g["b2"] = dz2.sum(axis=(0, 1))
    dz1 = (dz2 @ P["W2"].T) * (c.z1 > 0.0)
    g["W1"] = np.einsum("bvi,bvj->ij", c.X, dz1)
    g["b1"] = dz1.sum(axis=(0, 1))
    return g


def mlp_forward(params: GraspMLPParams, inp: EncodedInput) -> tuple[np.ndarray, np.ndarray, float]:
    """(A_hat (16,), r_hat (2,), f_hat) for one encoded object."""
    if inp.band_count != params.bands:
        raise PolicyError(f"input uses {inp.band_count} bands, network {params.bands}")
    c = forward_batch(params, inp.rows()[None])
    return c.A[0], c.r[0], float(c.f[0])


# ---------------------------------------------------------------------------
# force targets

def force_target(m: float, g: float, n_active: int) -> float:
    """Per-contact normal force that carries the weight: m g / n_active."""
    if n_active < 1:
        raise PolicyError("no active contact, no force target")
    return m * g / n_active


def scaled_env_force(m: float, g: float, n_contacts: int, f_max: float) -> float:
    """Training label for the force head: clip(m g n / f_max, 0, 1)."""
    if not f_max > 0.0:
        raise PolicyError("f_max must be positive")
    return float(min(max(m * g * n_contacts / f_max, 0.0), 1.0))


# ---------------------------------------------------------------------------
# losses

LOSS_NAMES = ("action", "reward", "force")


def _losses(c: _Cache, a_t, r_t, f_t):
    B = len(c.f)
    eps = 1e-12
    La = float(np.mean((c.A - a_t) ** 2))
    Lr = float(-np.mean(r_t * np.log(c.r + eps) + (1.0 - r_t) * np.log(1.0 - c.r + eps)))
    Lf = float(np.mean((c.f - f_t) ** 2))
    dA = 2.0 * (c.A - a_t) / (B * N_JOINTS)
    dzr = (c.r - r_t) / (B * 2)
    dzf = 2.0 * (c.f - f_t) * c.f * (1.0 - c.f) / B
    return (La, Lr, Lf), (dA, dzr, dzf)


def phase1_loss_and_grads(params: GraspMLPParams, X, a_t, r_t, f_t):
    """Summed phase-1 loss L_a + L_r + L_f and its parameter gradients."""
    c = forward_batch(params, X)
    (La, Lr, Lf), (dA, dzr, dzf) = _losses(c, a_t, r_t, f_t)
    return La + Lr + Lf, (La, Lr, Lf), backward_batch(params, c, dA, dzr, dzf)


# ---------------------------------------------------------------------------
# demonstrations

@dataclass(frozen=True)
class Demo:
    vertices: np.ndarray
    mass: float
    action: np.ndarray
    reward_label: tuple[float, float] = (1.0, 1.0)
    force_label: float = 1.0

    def __post_init__(self):
        a = np.asarray(self.action, dtype=float).reshape(-1)
        if a.shape != (N_JOINTS,):
            raise PolicyError("action must have 16 joint targets")
        if np.any(np.abs(a) > JOINT_LIMIT):
            raise PolicyError("action outside joint limits")
        if not all(0.0 <= x <= 1.0 for x in self.reward_label) or not 0.0 <= self.force_label <= 1.0:
            raise PolicyError("labels must lie in [0, 1]")
        if not self.mass > 0.0:
            raise PolicyError("demo mass must be positive")
        object.__setattr__(self, "action", a)
        object.__setattr__(self, "vertices", np.asarray(self.vertices, dtype=float).reshape(-1, 3))

    def to_json(self) -> str:
        return json.dumps({"vertices": self.vertices.tolist(), "mass_kg": self.mass,
                           "action": self.action.tolist(), "reward": list(self.reward_label),
                           "force": self.force_label})

    @classmethod
    def from_json(cls, line: str) -> "Demo":
        d = json.loads(line)
        return cls(np.array(d["vertices"]), float(d["mass_kg"]), np.array(d["action"]),
                   tuple(float(x) for x in d["reward"]), float(d["force"]))


def demos_to_jsonl(demos: Sequence[Demo]) -> str:
    return "".join(d.to_json() + "\n" for d in demos)


def demos_from_jsonl(text: str) -> list[Demo]:
    return [Demo.from_json(line) for line in text.splitlines() if line.strip()]


@dataclass(frozen=True)
class GraspEnvConfig:
    f_max: float = 60.0  # N, force at command 1
    g: float = 9.81
    n_min: int = 2
    horizon: int = 50
    dt: float = 0.01
    gamma: float = 1.2  # slip margin
    kappa: float = 8.0  # bounce-off margin
    aperture: float = 0.12  # m, fully open finger gap
    contact_tol: float = 0.006  # m, aperture mismatch still counted as touching
    slip_tol: float = 0.002  # m, drop that breaks the grasp
    kinetic_ratio: float = 0.5  # sliding grip / static grip
    pose_jitter: float = 0.0015  # m, per-trial object offset along the pinch axis
    pinch_fingers: tuple[int, ...] = (0, 1, 2)  # thumb, index, middle


def pinch_closure(width: float, cfg: GraspEnvConfig) -> float:
    """Flexion (rad) at which a finger's aperture equals ``width``."""
    return math.acos(min(max(width / cfg.aperture, -1.0), 1.0))


def pinch_width(mesh: MeshModel) -> float:
    return float(mesh.extent[0])


def pinch_action(width: float, cfg: GraspEnvConfig, rng: np.random.Generator | None = None,
                 noise: float = 0.01) -> np.ndarray:
    """Joint targets of the pinch family: per finger [spread, flex, flex, flex]."""
    c = pinch_closure(width, cfg)
    a = np.zeros(N_JOINTS)
    for f in cfg.pinch_fingers:
        a[4 * f + 1:4 * f + 4] = c
    if rng is not None:
        a += rng.normal(0.0, noise, N_JOINTS)
    return np.clip(a, -JOINT_LIMIT, JOINT_LIMIT)


def generate_demos(mesh: MeshModel, masses: Sequence[float], n: int, seed: int,
                   cfg: GraspEnvConfig = GraspEnvConfig()) -> list[Demo]:
    """``n`` synthetic pinch demonstrations, cycling through ``masses``.

    Labels follow the pre-training convention: reward and force heads are
    told 1 (a demonstration is a successful grasp).
    """
    rng = np.random.default_rng(seed)
    w = pinch_width(mesh)
    return [Demo(mesh.vertices.copy(), float(masses[i % len(masses)]), pinch_action(w, cfg, rng))
            for i in range(n)]


# ---------------------------------------------------------------------------
# grasp environment

@dataclass
class GraspEnvOutcome:
    n_active: list
    in_hand: list
    held_at_end: bool
    mean_force_applied: float
    failure: str = ""  # "", "no_contact", "slip", "bounce"

    @property
    def sustained_contact(self) -> bool:
        return all(x == 1 for x in self.in_hand)


def _finger_contacts(action, width: float, cfg: GraspEnvConfig) -> list[bool]:
    a = np.clip(np.asarray(action, dtype=float), -JOINT_LIMIT, JOINT_LIMIT)
    out = []
    for f in range(N_FINGERS):
        flex = float(np.mean(a[4 * f + 1:4 * f + 4]))
        gap = cfg.aperture * math.cos(flex)
        out.append(abs(gap - width) <= cfg.contact_tol)
    return out


def grasp_env_rollout(actions, force_command: float, body: BodyModel, cfg: GraspEnvConfig = GraspEnvConfig(),
                      width_offset: float = 0.0) -> GraspEnvOutcome:
    """Close the hand with ``actions`` and squeeze with ``force_command * f_max``.

    The thumb (finger 0) must touch for any finger to press. The object is
    integrated with the rigid-body step under gravity plus the frictional
    support the squeeze provides.
    """
    m = body.mass
    weight = m * cfg.g
    width = pinch_width(body.mesh) + width_offset
    touch = _finger_contacts(actions, width, cfg)
    n0 = sum(touch) if touch[0] else 0
    total = float(min(max(force_command, 0.0), 1.0)) * cfg.f_max
    H = cfg.horizon
    if n0 == 0 or total == 0.0:
        return GraspEnvOutcome([0] * H, [0] * H, False, 0.0, "no_contact")
    if total > cfg.kappa * weight:
        # the squeeze launches the object out of the fingers at the first step
        n = [n0] + [0] * (H - 1)
        return GraspEnvOutcome(n, [1] + [0] * (H - 1), False, total / H, "bounce")
    sim = SimConfig(dt=cfg.dt, steps=1, gravity=(0.0, 0.0, -cfg.g), max_speed=1.0e3)
    state = RigidState.at_rest(np.zeros(3))
    grip = total / cfg.gamma if n0 >= cfg.n_min else 0.0
    n_active, in_hand, forces = [], [], []
    active = n0
    failure = ""
    for _ in range(H):
        if active:
            forces.append(total)
            if grip < weight:  # static grip carries the weight exactly; nothing moves
                state = step_semi_implicit(state, body, (0.0, 0.0, cfg.kinetic_ratio * grip),
                                           (0.0, 0.0, 0.0), sim)
            if -state.p[2] > cfg.slip_tol:
                active = 0
                failure = "slip"
        n_active.append(active)
        in_hand.append(1 if active >= 1 else 0)
    held = n_active[-1] >= cfg.n_min
    return GraspEnvOutcome(n_active, in_hand, held, float(np.mean(forces)) if forces else 0.0, failure)


# ---------------------------------------------------------------------------
# training

@dataclass(frozen=True)
class TrainConfig:
    epochs_phase1: int = 150
    epochs_phase2: int = 600
    lr: float = 1.0e-3
    lr_phase2: float = 3.0e-3
    betas_phase2: tuple[float, float] = (0.5, 0.9)
    batch_size: int = 16
    w_r: float = 0.8
    w_f: float = 0.3
    bands: int = 4
    m_ref: float = 0.1  # kg
    seed: int = 0
    env: GraspEnvConfig = field(default_factory=GraspEnvConfig)

    def __post_init__(self):
        if self.epochs_phase1 < 0 or self.epochs_phase2 < 0:
            raise PolicyError("epoch counts must be >= 0")
        if not (self.lr > 0.0 and self.lr_phase2 > 0.0) or self.batch_size < 1:
            raise PolicyError("lr and batch size must be positive")


class _Adam:
    def __init__(self, lr: float, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def step(self, params: GraspMLPParams, grads: dict, frozen=()):
        self.t += 1
        for k, g in grads.items():
            if k in frozen:
                continue
            m = self.m.setdefault(k, np.zeros_like(g))
            v = self.v.setdefault(k, np.zeros_like(g))
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            mh = m / (1 - self.b1 ** self.t)
            vh = v / (1 - self.b2 ** self.t)
            params.arrays[k] -= self.lr * mh / (np.sqrt(vh) + self.eps)


def _rows(vertices, mass, params: GraspMLPParams) -> np.ndarray:
    return encode_input(vertices, mass, params.bands, params.m_ref).rows()


def _stack(demos: Sequence[Demo], params: GraspMLPParams):
    X = np.stack([_rows(d.vertices, d.mass, params) for d in demos])
    a = np.stack([d.action for d in demos])
    r = np.array([d.reward_label for d in demos], dtype=float)
    f = np.array([d.force_label for d in demos], dtype=float)
    return X, a, r, f


def phase1_train(params: GraspMLPParams, demos: Sequence[Demo], cfg: TrainConfig):
    """Supervised pre-training on demonstrations; returns (params, curves).

    ``curves`` maps "total", "action", "reward", "force" to per-epoch means.
    """
    if not demos:
        raise PolicyError("no demonstrations")
    p = params.copy()
    X, A, R, F = _stack(demos, p)
    rng = np.random.default_rng(cfg.seed)
    opt = _Adam(cfg.lr)
    curves = {k: [] for k in ("total",) + LOSS_NAMES}
    n = len(demos)
    for ep in range(cfg.epochs_phase1):
        order = rng.permutation(n)
        sums = np.zeros(4)
        for bi, s in enumerate(range(0, n, cfg.batch_size)):
            idx = order[s:s + cfg.batch_size]
            total, parts, grads = phase1_loss_and_grads(p, X[idx], A[idx], R[idx], F[idx])
            if not math.isfinite(total):
                raise NonFiniteLoss(1, ep, bi)
            opt.step(p, grads)
            sums += len(idx) * np.array((total,) + parts)
        for k, v in zip(curves, sums / n):
            curves[k].append(float(v))
    return p, curves


@dataclass(frozen=True)
class EnvFixture:
    mesh: MeshModel
    mass: float

    def body(self) -> BodyModel:
        return BodyModel.from_mesh(self.mesh, self.mass, n_contact=1)


def phase2_train(params: GraspMLPParams, fixtures: Sequence[EnvFixture], cfg: TrainConfig):
    """Environment-interaction fine-tuning of the reward and force heads.

    Each batch runs the current policy in the grasp environment and derives
    labels from the outcome: ``r = (sustained contact, held at end)`` and
    ``f = scaled_env_force(m, g, n_contacts, f_max)``. Loss is
    ``w_r L_r + w_f L_f``. Only the reward and force heads are updated.
    """
    if not fixtures:
        raise PolicyError("no environment fixtures")
    p = params.copy()
    rng = np.random.default_rng(cfg.seed + 1)
    opt = _Adam(cfg.lr_phase2, *cfg.betas_phase2)
    env = cfg.env
    bodies = [fx.body() for fx in fixtures]
    rows = [_rows(fx.mesh.vertices, fx.mass, p) for fx in fixtures]
    curves = {k: [] for k in ("total", "reward", "force", "success")}
    for ep in range(cfg.epochs_phase2):
        idx = rng.integers(0, len(fixtures), cfg.batch_size)
        X = np.stack([rows[i] for i in idx])
        c = forward_batch(p, X)
        r_t = np.zeros((len(idx), 2))
        f_t = np.zeros(len(idx))
        for b, i in enumerate(idx):
            out = grasp_env_rollout(c.A[b], float(c.f[b]), bodies[i], env,
                                    width_offset=float(rng.normal(0.0, env.pose_jitter)))
            r_t[b] = (float(out.sustained_contact), float(out.held_at_end))
            f_t[b] = scaled_env_force(fixtures[i].mass, env.g, out.n_active[0], env.f_max)
        (_, Lr, Lf), (_, dzr, dzf) = _losses(c, c.A, r_t, f_t)
        total = cfg.w_r * Lr + cfg.w_f * Lf
        if not math.isfinite(total):
            raise NonFiniteLoss(2, ep, 0)
        grads = backward_batch(p, c, np.zeros_like(c.A), cfg.w_r * dzr, cfg.w_f * dzf)
        opt.step(p, grads, frozen=PHASE2_FROZEN)
        curves["total"].append(float(total))
        curves["reward"].append(float(Lr))
        curves["force"].append(float(Lf))
        curves["success"].append(float(r_t[:, 1].mean()))
    return p, curves


def train_policy(mesh: MeshModel, masses: Sequence[float], cfg: TrainConfig, n_demos: int = 32):
    """Both phases on one geometry and the given masses; returns (params, curves1, curves2)."""
    demos = generate_demos(mesh, masses, n_demos, cfg.seed, cfg.env)
    p0 = GraspMLPParams.init(cfg.bands, cfg.seed, m_ref=cfg.m_ref)
    p1, c1 = phase1_train(p0, demos, cfg)
    p2, c2 = phase2_train(p1, [EnvFixture(mesh, m) for m in masses], cfg)
    p2.meta["train_masses"] = [float(m) for m in masses]
    return p2, c1, c2


# ---------------------------------------------------------------------------
# evaluation

class Policy(Protocol):
    def act(self, vertices: np.ndarray, mass: float) -> tuple[np.ndarray, float]:
        """(16 joint targets, force command in [0, 1])."""


@dataclass
class NetworkPolicy:
    params: GraspMLPParams
    mass_blind: bool = False  # zero the mass slot

    def act(self, vertices, mass):
        inp = encode_input(vertices, 0.0 if self.mass_blind else mass, self.params.bands, self.params.m_ref)
        A, _, f = mlp_forward(self.params, inp)
        return A, f


@dataclass
class OraclePolicy:
    """Emits the pinch action and a squeeze sized from ``force_target``.

    The total is ``force_target * n * sqrt(gamma * kappa)``: the geometric
    middle of the holding window.
    """
    mesh: MeshModel
    env: GraspEnvConfig = field(default_factory=GraspEnvConfig)

    def act(self, vertices, mass):
        n = len(self.env.pinch_fingers)
        total = force_target(mass, self.env.g, n) * n * math.sqrt(self.env.gamma * self.env.kappa)
        return pinch_action(pinch_width(self.mesh), self.env), total / self.env.f_max


@dataclass
class CrossEvalResult:
    train_masses: list
    eval_masses: list
    successes: np.ndarray  # (n_train, n_eval) counts
    trials: int

    @property
    def rates(self) -> np.ndarray:
        return self.successes / self.trials

    def diagonal_dominant(self) -> list[bool]:
        """Per row: is the matched cell >= every other cell of the row?"""
        out = []
        R = self.rates
        for i, mt in enumerate(self.train_masses):
            j = int(np.argmin(np.abs(np.asarray(self.eval_masses) - mt)))
            out.append(bool(np.all(R[i, j] >= R[i])))
        return out

    def to_csv(self) -> str:
        lines = ["train_mass,eval_mass,trials,successes,rate"]
        for i, mt in enumerate(self.train_masses):
            for j, me in enumerate(self.eval_masses):
                s = int(self.successes[i, j])
                lines.append(f"{mt!r},{me!r},{self.trials},{s},{s / self.trials!r}")
        return "\n".join(lines) + "\n"


def _eval_cell(policy: Policy, mesh: MeshModel, cond_mass: float, eval_mass: float, trials: int,
               seed_key: Sequence[int], env: GraspEnvConfig) -> int:
    rng = np.random.default_rng(list(seed_key))
    body = BodyModel.from_mesh(mesh, eval_mass, n_contact=1)
    action, force = policy.act(mesh.vertices, cond_mass)
    wins = 0
    for _ in range(trials):
        out = grasp_env_rollout(action, force, body, env, width_offset=float(rng.normal(0.0, env.pose_jitter)))
        wins += int(out.held_at_end)
    return wins


def cross_mass_eval(policies: Sequence[tuple[float, Policy]], eval_masses: Sequence[float], trials: int,
                    seed: int, mesh: MeshModel, env: GraspEnvConfig = GraspEnvConfig(), *,
                    condition: str = "train", jobs: int = 1) -> CrossEvalResult:
    """Success counts of each (train mass, policy) executed on each eval mass.

    ``condition="train"`` feeds each policy the mass it was trained for (its
    identified mass); ``"eval"`` feeds the true mass of the evaluated object.
    Trial jitter is seeded per cell from ``(seed, i, j)``.
    """
    if trials < 1:
        raise PolicyError("need at least one trial per cell")
    if condition not in ("train", "eval"):
        raise PolicyError("condition must be 'train' or 'eval'")
    tasks = []
    for i, (mt, pol) in enumerate(policies):
        for j, me in enumerate(eval_masses):
            cond = mt if condition == "train" else me
            tasks.append((pol, mesh, cond, me, trials, (seed, i, j), env))
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(jobs) as ex:
            wins = list(ex.map(_eval_cell_star, tasks))
    else:
        wins = [_eval_cell(*t) for t in tasks]
    S = np.array(wins, dtype=int).reshape(len(policies), len(eval_masses))
    return CrossEvalResult([float(m) for m, _ in policies], [float(m) for m in eval_masses], S, trials)


def _eval_cell_star(t):
    return _eval_cell(*t)


STANDARD_MASSES = (0.03, 0.2, 1.2)


def standard_mesh() -> MeshModel:
    return box_mesh((0.05, 0.05, 0.05), name="cube")

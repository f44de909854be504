"""Geometric and inertial primitives.

Conventions: quaternions are stored scalar-first ``[w, x, y, z]`` (Hamilton
product); vectors are length-3 float arrays; matrices are 3x3 arrays.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class GeometryError(ValueError):
    """Invalid geometric input (empty particle set, bad sample size, ...)."""


class MeshParseError(ValueError):
    def __init__(self, line_no: int, msg: str):
        super().__init__(f"line {line_no}: {msg}")
        self.line_no = line_no


# ---------------------------------------------------------------------------
# quaternion algebra

IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


def quat_normalize(q: np.ndarray) -> np.ndarray:
    n = math.sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3])
    if n == 0.0:
        raise GeometryError("cannot normalize a zero quaternion")
    return q / n


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a*b."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conj(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a unit quaternion (body -> world)."""
    w, x, y, z = q
    return np.array([
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ])


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    n = np.linalg.norm(axis)
    if n == 0.0:
        return IDENTITY_QUAT.copy()
    s = math.sin(0.5 * angle) / n
    return np.array([math.cos(0.5 * angle), axis[0] * s, axis[1] * s, axis[2] * s])


def quat_integrate(q: np.ndarray, omega: np.ndarray, dt: float) -> np.ndarray:
    """First-order update ``normalize(q + dt/2 * (0, omega) * q)``.

    ``omega`` is the world-frame angular velocity in rad/s.
    """
    wx, wy, wz = omega
    if wx == 0.0 and wy == 0.0 and wz == 0.0:
        return np.array(q, dtype=float)
    dq = quat_mul(np.array([0.0, wx, wy, wz]), q)
    return quat_normalize(q + (0.5 * dt) * dq)


# ---------------------------------------------------------------------------
# particle mass properties

@dataclass(frozen=True)
class ParticleSet:
    positions: np.ndarray  # (N, 3) meters
    masses: np.ndarray  # (N,) kg

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        ms = np.asarray(self.masses, dtype=float).reshape(-1)
        if len(pos) != len(ms):
            raise GeometryError("positions and masses differ in length")
        if np.any(ms <= 0.0):
            raise GeometryError("particle masses must be positive")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "masses", ms)

    @classmethod
    def uniform(cls, positions, total_mass: float) -> "ParticleSet":
        pos = np.asarray(positions, dtype=float).reshape(-1, 3)
        return cls(pos, np.full(len(pos), total_mass / len(pos)))


def center_of_mass(ps: ParticleSet) -> np.ndarray:
    if len(ps.masses) == 0:
        raise GeometryError("empty particle set")
    total = ps.masses.sum()
    if total <= 0.0:
        raise GeometryError("total mass must be positive")
    return (ps.masses[:, None] * ps.positions).sum(axis=0) / total


def inertia_tensor(ps: ParticleSet, com: np.ndarray) -> np.ndarray:
    """Sum of m_i (|r_i|^2 E - r_i r_i^T) about ``com``."""
    r = ps.positions - np.asarray(com, dtype=float)
    m = ps.masses
    r2 = np.einsum("ij,ij->i", r, r)
    inertia = np.eye(3) * np.dot(m, r2) - np.einsum("i,ij,ik->jk", m, r, r)
    # exact symmetry regardless of summation order
    return 0.5 * (inertia + inertia.T)


# ---------------------------------------------------------------------------
# meshes

@dataclass(frozen=True)
class MeshModel:
    vertices: np.ndarray  # (N, 3) meters
    faces: np.ndarray  # (F, 3) zero-based vertex indices
    name: str = "mesh"

    def __post_init__(self):
        verts = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if faces.size and (faces.min() < 0 or faces.max() >= len(verts)):
            raise GeometryError("face index out of range")
        object.__setattr__(self, "vertices", verts)
        object.__setattr__(self, "faces", faces)

    @property
    def extent(self) -> np.ndarray:
        return self.vertices.max(axis=0) - self.vertices.min(axis=0)


def load_mesh(data: bytes | str, name: str = "mesh") -> MeshModel:
    """Parse the OBJ subset: ``v x y z`` and triangular ``f i j k`` lines.

    Comments (``#``), blank lines and any other keyword are skipped. Face
    entries of the form ``i/t/n`` keep only the vertex index.
    """
    text = data.decode("utf-8") if isinstance(data, (bytes, bytearray)) else data
    verts: list[tuple[float, float, float]] = []
    faces: list[tuple[int, int, int]] = []
    face_lines: list[int] = []
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        key, args = parts[0], parts[1:]
        if key == "v":
            if len(args) < 3:
                raise MeshParseError(line_no, "vertex needs 3 coordinates")
            try:
                verts.append((float(args[0]), float(args[1]), float(args[2])))
            except ValueError:
                raise MeshParseError(line_no, f"bad vertex coordinate in {raw.strip()!r}") from None
        elif key == "f":
            if len(args) != 3:
                raise MeshParseError(line_no, "only triangular faces are supported")
            try:
                idx = tuple(int(a.split("/")[0]) for a in args)
            except ValueError:
                raise MeshParseError(line_no, f"bad face index in {raw.strip()!r}") from None
            if any(i < 1 for i in idx):
                raise MeshParseError(line_no, "face indices are 1-based and positive")
            faces.append((idx[0] - 1, idx[1] - 1, idx[2] - 1))
            face_lines.append(line_no)
    n = len(verts)
    for line_no, face in zip(face_lines, faces):
        if max(face) >= n:
            raise MeshParseError(line_no, f"face index {max(face) + 1} exceeds vertex count {n}")
    return MeshModel(np.array(verts, dtype=float).reshape(-1, 3),
                     np.array(faces, dtype=np.int64).reshape(-1, 3), name)


def dump_mesh(mesh: MeshModel) -> str:
    """Canonical OBJ text; ``load_mesh(dump_mesh(m))`` reproduces ``m``."""
    out = [f"# {mesh.name}"]
    out += ["v {!r} {!r} {!r}".format(*map(float, v)) for v in mesh.vertices]
    out += ["f {} {} {}".format(*(int(i) + 1 for i in f)) for f in mesh.faces]
    return "\n".join(out) + "\n"


def box_mesh(size=(0.05, 0.05, 0.05), name: str = "box") -> MeshModel:
    """Axis-aligned box centred at the origin, 8 vertices / 12 triangles."""
    hx, hy, hz = (0.5 * float(s) for s in size)
    verts = np.array([
        [-hx, -hy, -hz], [hx, -hy, -hz], [hx, hy, -hz], [-hx, hy, -hz],
        [-hx, -hy, hz], [hx, -hy, hz], [hx, hy, hz], [-hx, hy, hz],
    ])
    faces = np.array([
        [0, 2, 1], [0, 3, 2],  # bottom
        [4, 5, 6], [4, 6, 7],  # top
        [0, 1, 5], [0, 5, 4],
        [1, 2, 6], [1, 6, 5],
        [2, 3, 7], [2, 7, 6],
        [3, 0, 4], [3, 4, 7],
    ])
    return MeshModel(verts, faces, name)


def sample_contact_vertices(mesh: MeshModel, k: int, seed: int, band: float = 0.05) -> list[int]:
    """Pick ``k`` distinct vertex indices biased toward the lowest-z face.

    The ceil(k/2) lowest vertices are taken deterministically (ties broken by
    index). The rest are drawn at random, first from the bottom band (z within
    ``band`` * z-extent of the minimum), then from all remaining vertices.
    """
    n = len(mesh.vertices)
    if not 1 <= k <= n:
        raise GeometryError(f"k={k} outside [1, {n}]")
    z = mesh.vertices[:, 2]
    order = np.lexsort((np.arange(n), z))
    n_fixed = (k + 1) // 2
    chosen = [int(i) for i in order[:n_fixed]]
    rest = order[n_fixed:]
    if k > n_fixed:
        rng = np.random.default_rng(seed)
        z_cut = z.min() + band * (z.max() - z.min())
        low = rest[z[rest] <= z_cut]
        high = rest[z[rest] > z_cut]
        need = k - n_fixed
        take_low = min(need, len(low))
        chosen += [int(i) for i in rng.choice(low, size=take_low, replace=False)]
        if need > take_low:
            chosen += [int(i) for i in rng.choice(high, size=need - take_low, replace=False)]
    return sorted(chosen)

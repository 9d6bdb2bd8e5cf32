"""Mass properties of closed triangle meshes under constant density.

Volume, center of mass and inertia are accumulated over the signed
tetrahedra (origin, a, b, c) spanned by each outward-oriented face.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DEFAULT_DENSITY = 1000.0  # kg/m^3


class MeshTopologyError(ValueError):
    """Mesh is not a closed, consistently oriented 2-manifold."""


class DegenerateMeshError(ValueError):
    """Mesh encloses (numerically) zero volume."""


@dataclass(frozen=True)
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float)
        f = np.asarray(self.faces, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise ValueError("vertices must be (V, 3)")
        if f.ndim != 2 or f.shape[1] != 3:
            raise ValueError("faces must be (F, 3) index triples")
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise ValueError("face index out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    def translated(self, c) -> "TriangleMesh":
        return TriangleMesh(self.vertices + np.asarray(c, dtype=float), self.faces)

    def transformed(self, R, c=(0.0, 0.0, 0.0)) -> "TriangleMesh":
        return TriangleMesh(self.vertices @ np.asarray(R).T + np.asarray(c, dtype=float), self.faces)

    def flipped(self) -> "TriangleMesh":
        return TriangleMesh(self.vertices, self.faces[:, ::-1])


@dataclass(frozen=True)
class BodyParams:
    """Mass (kg), center of mass (m) and inertia about the center of mass (kg m^2)."""

    mass: float
    com: np.ndarray
    inertia: np.ndarray

    def __post_init__(self):
        com = np.asarray(self.com, dtype=float).reshape(3)
        inertia = np.asarray(self.inertia, dtype=float).reshape(3, 3)
        if not self.mass > 0:
            raise ValueError("mass must be positive")
        scale = max(np.abs(inertia).max(), 1e-300)
        if np.abs(inertia - inertia.T).max() > 1e-9 * scale:
            raise ValueError("inertia tensor must be symmetric")
        inertia = 0.5 * (inertia + inertia.T)
        ev = np.linalg.eigvalsh(inertia)
        if ev[0] <= 0:
            raise ValueError("inertia tensor must be positive definite")
        tol = 1e-9 * ev[-1]
        if ev[0] + ev[1] < ev[2] - tol:
            raise ValueError("principal moments violate the triangle inequality")
        object.__setattr__(self, "mass", float(self.mass))
        object.__setattr__(self, "com", com)
        object.__setattr__(self, "inertia", inertia)

    def to_json(self) -> dict:
        return {"mass": self.mass, "com": self.com.tolist(), "inertia": self.inertia.tolist()}

    @classmethod
    def from_json(cls, doc: dict) -> "BodyParams":
        return cls(doc["mass"], doc["com"], doc["inertia"])


def check_watertight(mesh: TriangleMesh) -> None:
    """Raise unless every directed edge occurs once and its reverse once."""
    f = mesh.faces
    if len(f) == 0:
        raise MeshTopologyError("mesh has no faces")
    edges = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    counts = Counter(map(tuple, edges.tolist()))
    for (i, j), n in counts.items():
        if n != 1 or counts.get((j, i), 0) != 1:
            raise MeshTopologyError(f"edge ({i}, {j}) is not shared by exactly two opposite faces")


def _tetra_terms(mesh: TriangleMesh):
    a, b, c = (mesh.vertices[mesh.faces[:, k]] for k in range(3))
    det = np.einsum("ij,ij->i", a, np.cross(b, c))
    return a, b, c, det


def mesh_volume(mesh: TriangleMesh) -> float:
    """Signed enclosed volume (m^3); negative for inward-oriented faces."""
    check_watertight(mesh)
    *_, det = _tetra_terms(mesh)
    vol = det.sum() / 6.0
    if abs(vol) < 1e-12:
        raise DegenerateMeshError("mesh volume is numerically zero")
    return float(vol)


def mesh_mass_properties(mesh: TriangleMesh, density: float = DEFAULT_DENSITY) -> BodyParams:
    vol = mesh_volume(mesh)
    if vol <= 0:
        raise DegenerateMeshError("mesh must enclose positive volume (check face orientation)")
    a, b, c, det = _tetra_terms(mesh)
    s = a + b + c
    com = (det[:, None] * s).sum(axis=0) / 24.0 / vol
    # second moment of each origin tetrahedron: det/120 (sum_k v_k v_k^T + s s^T)
    outer = (np.einsum("fi,fj->fij", a, a) + np.einsum("fi,fj->fij", b, b)
             + np.einsum("fi,fj->fij", c, c) + np.einsum("fi,fj->fij", s, s))
    second = density * np.einsum("f,fij->ij", det, outer) / 120.0
    inertia_origin = np.trace(second) * np.eye(3) - second
    mass = density * vol
    inertia = inertia_origin - mass * (com @ com * np.eye(3) - np.outer(com, com))
    return BodyParams(mass, com, inertia)


def segment_parts(mesh: TriangleMesh, weights) -> list[np.ndarray]:
    """Vertex indices owned by each part (row-wise arg-max, lowest index on ties)."""
    w = np.asarray(weights, dtype=float)
    if w.ndim != 2 or w.shape[0] != len(mesh.vertices):
        raise ValueError(f"weights must be ({len(mesh.vertices)}, J), got {w.shape}")
    if np.any(w < 0) or np.abs(w.sum(axis=1) - 1).max() > 1e-6:
        raise ValueError("part weights must be nonnegative rows summing to 1")
    owner = np.argmax(w, axis=1)
    return [np.flatnonzero(owner == k) for k in range(w.shape[1])]


# ---------------------------------------------------------------------------
# Primitive meshes


def box_mesh(size=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)) -> TriangleMesh:
    """Axis-aligned box with minimum corner ``origin``; 12 outward triangles."""
    sx, sy, sz = size
    ox, oy, oz = origin
    v = np.array([[x, y, z] for z in (0, sz) for y in (0, sy) for x in (0, sx)], dtype=float)
    v += (ox, oy, oz)
    f = np.array([
        [0, 2, 1], [1, 2, 3],  # z = 0
        [4, 5, 6], [5, 7, 6],  # z = sz
        [0, 1, 4], [1, 5, 4],  # y = 0
        [2, 6, 3], [3, 6, 7],  # y = sy
        [0, 4, 2], [2, 4, 6],  # x = 0
        [1, 3, 5], [3, 7, 5],  # x = sx
    ])
    return TriangleMesh(v, f)


def icosphere(radius: float = 1.0, subdivisions: int = 3, center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    t = (1 + 5 ** 0.5) / 2
    v = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t),
         (0, -1, -t), (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    verts = [np.array(p, dtype=float) / np.linalg.norm(p) for p in v]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
             (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
             (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def mid(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    return TriangleMesh(np.array(verts) * radius + np.asarray(center, dtype=float), np.array(faces))


def tetrahedron_mesh(vertices) -> TriangleMesh:
    """Closed tetrahedron with faces oriented outward."""
    v = np.asarray(vertices, dtype=float)
    faces = np.array([[0, 2, 1], [0, 1, 3], [1, 2, 3], [0, 3, 2]])
    if np.dot(v[1] - v[0], np.cross(v[2] - v[0], v[3] - v[0])) < 0:
        faces = faces[:, ::-1]
    return TriangleMesh(v, faces)


# ---------------------------------------------------------------------------
# File formats


def read_obj(path) -> TriangleMesh:
    """ASCII OBJ subset: ``v x y z`` and triangular ``f i j k`` lines (1-based)."""
    verts, faces = [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            idx = [int(p.split("/")[0]) - 1 for p in parts[1:]]
            if len(idx) != 3:
                raise ValueError("only triangular faces are supported")
            faces.append(idx)
    return TriangleMesh(np.array(verts, dtype=float).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))


def write_obj(mesh: TriangleMesh, path) -> None:
    lines = [f"v {float(x)!r} {float(y)!r} {float(z)!r}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    Path(path).write_text("\n".join(lines) + "\n")


def read_part_weights(path) -> np.ndarray:
    w = np.loadtxt(path, delimiter=",", ndmin=2)
    if np.any(w < 0) or np.abs(w.sum(axis=1) - 1).max() > 1e-6:
        raise ValueError("part weights must be nonnegative rows summing to 1")
    return w

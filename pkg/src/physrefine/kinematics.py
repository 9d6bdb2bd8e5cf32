"""Kinematic trees, rotation-vector coordinates, forward kinematics and
finite-difference derivatives.

Generalized coordinates are a flat vector

    q = [root_rot (3), root_pos (3), joint_1 (3), ..., joint_{J-1} (3)]

where every rotation is a rotation vector (axis * angle, radians) and
``root_pos`` is the world position of the root link origin in meters.
All functions accept arbitrary leading batch dimensions.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DEFAULT_DT = 1.0 / 30.0
_SMALL_ANGLE = 0.05


class ShapeError(ValueError):
    """Array shapes do not match the kinematic tree."""


class InsufficientFramesError(ValueError):
    """Fewer than three frames were given to a finite-difference operation."""


# ---------------------------------------------------------------------------
# SO(3) helpers


def skew(v):
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def _angle_coeffs(theta):
    """sin(t)/t, (1-cos t)/t^2, (t-sin t)/t^3 with small-angle series."""
    small = theta < _SMALL_ANGLE
    t = np.where(small, 1.0, theta)
    t2 = theta * theta
    s = np.where(small, 1 - t2 / 6 + t2 * t2 / 120, np.sin(t) / t)
    a = np.where(small, 0.5 - t2 / 24 + t2 * t2 / 720, (1 - np.cos(t)) / t**2)
    b = np.where(small, 1 / 6 - t2 / 120 + t2 * t2 / 5040, (t - np.sin(t)) / t**3)
    return s, a, b


def so3_exp(r):
    """Rotation matrices for rotation vectors ``r`` of shape (..., 3)."""
    r = np.asarray(r, dtype=float)
    theta = np.linalg.norm(r, axis=-1)
    s, a, _ = _angle_coeffs(theta)
    K = skew(r)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + s[..., None, None] * K + a[..., None, None] * (K @ K)


def so3_log(R):
    """Rotation vector of a rotation matrix, magnitude in [0, pi]."""
    R = np.asarray(R, dtype=float)
    cos = np.clip((np.trace(R, axis1=-2, axis2=-1) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos)
    w = np.stack([R[..., 2, 1] - R[..., 1, 2],
                  R[..., 0, 2] - R[..., 2, 0],
                  R[..., 1, 0] - R[..., 0, 1]], axis=-1)
    small = theta < 1e-6
    near_pi = theta > np.pi - 1e-4
    safe = np.where(small | near_pi, 1.0, theta)
    out = w * np.where(small, 0.5, safe / (2 * np.sin(safe)))[..., None]
    if np.any(near_pi):
        # axis from the symmetric part; sign fixed from the antisymmetric part
        B = (R + np.swapaxes(R, -1, -2)) / 2 - np.eye(3) * cos[..., None, None]
        idx = np.argmax(np.diagonal(B, axis1=-2, axis2=-1), axis=-1)
        col = np.take_along_axis(B, idx[..., None, None].repeat(3, axis=-1), axis=-2)[..., 0, :]
        axis = col / np.linalg.norm(col, axis=-1, keepdims=True)
        sign = np.where(np.sum(axis * w, axis=-1) < 0, -1.0, 1.0)
        out = np.where(near_pi[..., None], axis * (sign * theta)[..., None], out)
    return out


def right_jacobian(r):
    """J_r(r) with R(r)^T dR/dt = skew(J_r(r) dr/dt) (body-frame angular velocity)."""
    r = np.asarray(r, dtype=float)
    theta = np.linalg.norm(r, axis=-1)
    _, a, b = _angle_coeffs(theta)
    K = skew(r)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye - a[..., None, None] * K + b[..., None, None] * (K @ K)


def right_jacobian_dot(r, rdot):
    """Time derivative of ``right_jacobian(r)`` along ``rdot``."""
    r = np.asarray(r, dtype=float)
    rdot = np.asarray(rdot, dtype=float)
    theta = np.linalg.norm(r, axis=-1)
    _, a, b = _angle_coeffs(theta)
    small = theta < _SMALL_ANGLE
    t = np.where(small, 1.0, theta)
    t2 = theta * theta
    # a'(t)/t and b'(t)/t
    da = np.where(small, -1 / 12 + t2 / 180 - t2 * t2 / 6720,
                  (t * np.sin(t) - 2 * (1 - np.cos(t))) / t**4)
    db = np.where(small, -1 / 60 + t2 / 1260 - t2 * t2 / 60480,
                  ((1 - np.cos(t)) * t - 3 * (t - np.sin(t))) / t**5)
    rr = np.sum(r * rdot, axis=-1)
    K = skew(r)
    Kd = skew(rdot)
    return (-(da * rr)[..., None, None] * K - a[..., None, None] * Kd
            + (db * rr)[..., None, None] * (K @ K)
            + b[..., None, None] * (Kd @ K + K @ Kd))


def canonicalize_rotvec(r):
    """Map rotation vectors to the equivalent one with magnitude in [0, pi]."""
    r = np.asarray(r, dtype=float)
    theta = np.linalg.norm(r, axis=-1, keepdims=True)
    wrapped = np.mod(theta + np.pi, 2 * np.pi) - np.pi
    safe = np.where(theta > 0, theta, 1.0)
    return np.where(theta > np.pi, r * (wrapped / safe), r)


def _rotvec_candidates(r, k):
    theta = np.linalg.norm(r, axis=-1, keepdims=True)
    safe = np.where(theta > 0, theta, 1.0)
    return r * ((theta + 2 * np.pi * k) / safe)


def unwrap_rotvecs(seq):
    """Unwrap a (..., T, 3) rotation-vector sequence frame by frame.

    Each frame is replaced by the equivalent representation r * (1 + 2 pi k / |r|)
    closest to the previous (already unwrapped) frame.
    """
    seq = np.array(seq, dtype=float)
    for t in range(1, seq.shape[-2]):
        cands = np.stack([_rotvec_candidates(seq[..., t, :], k) for k in (-2, -1, 0, 1, 2)])
        best = np.argmin(np.linalg.norm(cands - seq[..., t - 1, :], axis=-1), axis=0)
        seq[..., t, :] = np.take_along_axis(cands, best[None, ..., None], axis=0)[0]
    return seq


# ---------------------------------------------------------------------------
# Trees and trajectories


@dataclass(frozen=True)
class Link:
    parent: int
    offset: tuple[float, float, float]


@dataclass(frozen=True)
class KinematicTree:
    """Topologically ordered links; link 0 is the free-floating root."""

    links: tuple[Link, ...]
    _parents: np.ndarray = field(init=False, repr=False, compare=False)
    _offsets: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        links = tuple(Link(int(l.parent), tuple(float(c) for c in l.offset)) for l in self.links)
        if not links:
            raise ValueError("tree needs at least one link")
        if links[0].parent != -1:
            raise ValueError("link 0 must be the root (parent -1)")
        for k, l in enumerate(links[1:], start=1):
            if not 0 <= l.parent < k:
                raise ValueError(f"link {k}: parent {l.parent} breaks topological order")
        offsets = np.array([l.offset for l in links], dtype=float)
        if not np.all(np.isfinite(offsets)):
            raise ValueError("link offsets must be finite")
        object.__setattr__(self, "links", links)
        object.__setattr__(self, "_parents", np.array([l.parent for l in links]))
        object.__setattr__(self, "_offsets", offsets)

    @classmethod
    def from_parents(cls, parents, offsets):
        return cls(tuple(Link(p, tuple(o)) for p, o in zip(parents, offsets)))

    @property
    def part_count(self) -> int:
        return len(self.links)

    @property
    def dim(self) -> int:
        return 6 + 3 * (self.part_count - 1)

    @property
    def parents(self) -> np.ndarray:
        return self._parents

    @property
    def offsets(self) -> np.ndarray:
        return self._offsets

    def dof_slice(self, k: int) -> slice:
        if k == 0:
            return slice(0, 6)
        return slice(3 + 3 * k, 6 + 3 * k)

    def rot_slice(self, k: int) -> slice:
        """Slice of the rotation vector driving link ``k``."""
        return slice(0, 3) if k == 0 else self.dof_slice(k)

    def rotation_slots(self) -> list[slice]:
        return [self.rot_slice(k) for k in range(self.part_count)]

    def coord_link(self) -> np.ndarray:
        """Index of the link owning each generalized coordinate."""
        return np.array([0] * 6 + [k for k in range(1, self.part_count) for _ in range(3)])

    def check_q(self, q) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        if q.shape[-1] != self.dim:
            raise ShapeError(f"expected {self.dim} generalized coordinates, got {q.shape[-1]}")
        return q

    def zero_pose(self) -> np.ndarray:
        return np.zeros(self.dim)

    def to_json(self) -> dict:
        return {"links": [{"parent": l.parent, "offset": list(l.offset)} for l in self.links]}

    @classmethod
    def from_json(cls, doc: dict) -> "KinematicTree":
        return cls(tuple(Link(int(l["parent"]), tuple(l["offset"])) for l in doc["links"]))


def chain_tree(n_links: int, offset=(0.0, 0.0, 0.1)) -> KinematicTree:
    """Serial chain: root plus ``n_links - 1`` children along ``offset``."""
    return KinematicTree.from_parents(range(-1, n_links - 1), [(0.0, 0.0, 0.0)] + [offset] * (n_links - 1))


def mini_hand_tree() -> KinematicTree:
    """Palm plus two two-segment fingers; the default synthetic body."""
    return KinematicTree.from_parents(
        [-1, 0, 1, 0, 3],
        [(0.0, 0.0, 0.0),
         (0.02, 0.0, 0.08), (0.0, 0.0, 0.04),
         (-0.02, 0.0, 0.08), (0.0, 0.0, 0.04)])


def canonicalize_q(tree: KinematicTree, q) -> np.ndarray:
    q = np.array(tree.check_q(q), dtype=float)
    for s in tree.rotation_slots():
        q[..., s] = canonicalize_rotvec(q[..., s])
    return q


@dataclass(frozen=True)
class Trajectory:
    """T frames of generalized coordinates sampled every ``dt`` seconds."""

    values: np.ndarray
    dt: float = DEFAULT_DT

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim != 2:
            raise ShapeError("trajectory values must be (T, dim)")
        if v.shape[0] < 3:
            raise InsufficientFramesError(f"need at least 3 frames, got {v.shape[0]}")
        if not np.all(np.isfinite(v)):
            raise ValueError("trajectory contains non-finite values")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "dt", float(self.dt))

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def to_json(self) -> dict:
        return {"dt": self.dt, "dim": self.dim, "frames": self.values.tolist()}

    @classmethod
    def from_json(cls, doc: dict) -> "Trajectory":
        frames = np.asarray(doc["frames"], dtype=float)
        if frames.ndim != 2 or frames.shape[1] != int(doc["dim"]):
            raise ShapeError("frame width does not match 'dim'")
        return cls(frames, float(doc["dt"]))


@dataclass(frozen=True)
class TrajectoryDerivatives:
    qdot: np.ndarray
    qddot: np.ndarray


def save_json(obj: dict, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True))


def load_trajectory(path) -> Trajectory:
    return Trajectory.from_json(json.loads(Path(path).read_text()))


def load_tree(path) -> KinematicTree:
    return KinematicTree.from_json(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# Forward kinematics


def forward_kinematics(tree: KinematicTree, q):
    """World rotations (..., J, 3, 3) and origins (..., J, 3) of every link."""
    q = tree.check_q(q)
    J = tree.part_count
    rv = np.concatenate([q[..., None, 0:3], q[..., 6:].reshape(q.shape[:-1] + (J - 1, 3))], axis=-2)
    locals_ = so3_exp(rv)
    rots = [None] * J
    origins = [None] * J
    for k in range(J):
        local = locals_[..., k, :, :]
        if k == 0:
            rots[0] = local
            origins[0] = q[..., 3:6]
        else:
            p = tree.parents[k]
            rots[k] = rots[p] @ local
            origins[k] = origins[p] + rots[p] @ tree.offsets[k]
    return np.stack(rots, axis=-3), np.stack(origins, axis=-2)


def joint_positions(tree: KinematicTree, q) -> np.ndarray:
    """Joint origins in world coordinates, shape (..., J, 3), meters."""
    return forward_kinematics(tree, q)[1]


# ---------------------------------------------------------------------------
# Finite differences


def difference_matrices(T: int, dt: float):
    """Stencil matrices D1, D2 with qdot = D1 @ q and qddot = D2 @ q.

    Interior frames use second-order central differences. End frames use
    second-order one-sided stencils (four points for the second derivative
    when T >= 4, otherwise the three-point first-order one).
    """
    if T < 3:
        raise InsufficientFramesError(f"need at least 3 frames, got {T}")
    D1 = np.zeros((T, T))
    D2 = np.zeros((T, T))
    for t in range(1, T - 1):
        D1[t, t - 1:t + 2] = (-0.5, 0.0, 0.5)
        D2[t, t - 1:t + 2] = (1.0, -2.0, 1.0)
    D1[0, :3] = (-1.5, 2.0, -0.5)
    D1[-1, -3:] = (0.5, -2.0, 1.5)
    if T >= 4:
        D2[0, :4] = (2.0, -5.0, 4.0, -1.0)
        D2[-1, -4:] = (-1.0, 4.0, -5.0, 2.0)
    else:
        D2[0, :3] = (1.0, -2.0, 1.0)
        D2[-1, -3:] = (1.0, -2.0, 1.0)
    return D1 / dt, D2 / dt**2


def unwrap_values(values, rotation_slots) -> np.ndarray:
    values = np.array(values, dtype=float)
    for s in rotation_slots:
        values[..., s] = unwrap_rotvecs(values[..., s])
    return values


def finite_difference(traj: Trajectory, rotation_slots=None) -> TrajectoryDerivatives:
    """Velocities and accelerations of a trajectory by finite differences.

    ``rotation_slots`` lists the coordinate slices holding rotation vectors;
    they are unwrapped before differencing. Defaults to every 3-block except
    the root position, i.e. the layout of a :class:`KinematicTree`.
    """
    values = np.asarray(traj.values)
    if values.shape[0] < 3:
        raise InsufficientFramesError(f"need at least 3 frames, got {values.shape[0]}")
    if rotation_slots is None:
        rotation_slots = [slice(0, 3)] + [slice(i, i + 3) for i in range(6, values.shape[1], 3)]
    values = unwrap_values(values, rotation_slots)
    D1, D2 = difference_matrices(values.shape[0], traj.dt)
    return TrajectoryDerivatives(D1 @ values, D2 @ values)

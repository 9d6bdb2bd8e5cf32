"""Euler-Lagrange dynamics of a free-floating kinematic tree.

Equations of motion in generalized coordinates,

    M(q) qdd + C(q, qd) + g(q) = F,

are evaluated with spatial (6D) vector algebra in link frames: inverse
dynamics by recursive Newton-Euler, the mass matrix by the composite
rigid-body algorithm. Each spherical joint is parameterized by a rotation
vector r, so its motion subspace is S = [J_r(r); 0] and the velocity-product
term is [dJ_r/dt rd; 0]. The root is free: rotation vector plus world
position, with S = blockdiag(J_r, R^T). Gravity enters as a fictitious base
acceleration.

Every public function accepts arbitrary leading batch dimensions.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .inertia import BodyParams, TriangleMesh, mesh_mass_properties, DEFAULT_DENSITY
from .kinematics import (
    KinematicTree,
    ShapeError,
    Trajectory,
    difference_matrices,
    joint_positions,
    right_jacobian,
    right_jacobian_dot,
    skew,
    so3_exp,
    unwrap_values,
)

GRAVITY = np.array([0.0, 0.0, -9.81])


class SingularDynamicsError(np.linalg.LinAlgError):
    """Mass matrix is not positive definite."""


@dataclass(frozen=True)
class RigidBodySet:
    """Per-link inertial parameters in link-local frames at the zero pose."""

    bodies: tuple[BodyParams, ...]

    def __post_init__(self):
        object.__setattr__(self, "bodies", tuple(self.bodies))
        mats = []
        for b in self.bodies:
            c = skew(b.com)
            I6 = np.zeros((6, 6))
            I6[:3, :3] = b.inertia + b.mass * c @ c.T
            I6[:3, 3:] = b.mass * c
            I6[3:, :3] = b.mass * c.T
            I6[3:, 3:] = b.mass * np.eye(3)
            mats.append(I6)
        object.__setattr__(self, "_spatial", np.array(mats))

    def __len__(self):
        return len(self.bodies)

    @property
    def spatial(self) -> np.ndarray:
        return self._spatial

    @property
    def total_mass(self) -> float:
        return float(sum(b.mass for b in self.bodies))

    def scaled(self, factor: float) -> "RigidBodySet":
        return RigidBodySet(tuple(BodyParams(b.mass * factor, b.com, b.inertia * factor) for b in self.bodies))

    def to_json(self) -> dict:
        return {"bodies": [b.to_json() for b in self.bodies]}

    @classmethod
    def from_json(cls, doc: dict) -> "RigidBodySet":
        return cls(tuple(BodyParams.from_json(b) for b in doc["bodies"]))


def load_bodies(path) -> RigidBodySet:
    return RigidBodySet.from_json(json.loads(Path(path).read_text()))


def bodies_from_meshes(tree: KinematicTree, meshes: Sequence[TriangleMesh],
                       density: float = DEFAULT_DENSITY) -> RigidBodySet:
    """Mass properties of per-link closed meshes posed at the zero configuration.

    Centers of mass are re-expressed relative to each link's joint origin;
    link axes coincide with world axes at the zero pose.
    """
    if len(meshes) != tree.part_count:
        raise ShapeError(f"need {tree.part_count} meshes, got {len(meshes)}")
    origins = joint_positions(tree, tree.zero_pose())
    out = []
    for k, mesh in enumerate(meshes):
        p = mesh_mass_properties(mesh, density)
        out.append(BodyParams(p.mass, p.com - origins[k], p.inertia))
    return RigidBodySet(tuple(out))


def _check(tree: KinematicTree, bodies: RigidBodySet, *arrays):
    if len(bodies) != tree.part_count:
        raise ShapeError(f"{len(bodies)} bodies for {tree.part_count} links")
    out = [tree.check_q(a) for a in arrays]
    shape = np.broadcast_shapes(*(a.shape for a in out))
    return [np.broadcast_to(a, shape).reshape(-1, tree.dim) for a in out], shape[:-1]


def _cross(a, b):
    a0, a1, a2 = a[..., 0], a[..., 1], a[..., 2]
    b0, b1, b2 = b[..., 0], b[..., 1], b[..., 2]
    return np.stack([a1 * b2 - a2 * b1, a2 * b0 - a0 * b2, a0 * b1 - a1 * b0], axis=-1)


def _mv(A, x):
    return np.einsum("...ij,...j->...i", A, x)


def _xform_motion(E, r, m):
    """Plucker transform [E 0; -E skew(r) E] applied to a motion vector."""
    w, v = m[..., :3], m[..., 3:]
    return np.concatenate([_mv(E, w), _mv(E, v - _cross(r, w))], axis=-1)


def _xform_force_T(E, r, f):
    """Transpose of the Plucker transform applied to a force vector."""
    n_ = _mv(np.swapaxes(E, -1, -2), f[..., :3])
    f_ = _mv(np.swapaxes(E, -1, -2), f[..., 3:])
    return np.concatenate([n_ + _cross(r, f_), f_], axis=-1)


def _cross_motion(v, m):
    w, u = v[..., :3], v[..., 3:]
    return np.concatenate([_cross(w, m[..., :3]), _cross(w, m[..., 3:]) + _cross(u, m[..., :3])], axis=-1)


def _cross_force(v, f):
    w, u = v[..., :3], v[..., 3:]
    return np.concatenate([_cross(w, f[..., :3]) + _cross(u, f[..., 3:]), _cross(w, f[..., 3:])], axis=-1)


def _plucker(E, r):
    B = E.shape[:-2]
    X = np.zeros(B + (6, 6))
    X[..., :3, :3] = E
    X[..., 3:, 3:] = E
    X[..., 3:, :3] = -E @ skew(r)
    return X


def _joint_frames(tree: KinematicTree, q):
    """Per link: (E = R^T, translation r, J_r) where E maps parent to link coordinates."""
    B = q.shape[0]
    rv = _link_rotvecs(tree, q)
    E_all = np.swapaxes(so3_exp(rv), -1, -2)
    Jr_all = right_jacobian(rv)
    frames = []
    for k in range(tree.part_count):
        r = q[:, 3:6] if k == 0 else np.broadcast_to(tree.offsets[k], (B, 3))
        frames.append((E_all[:, k], r, Jr_all[:, k]))
    return frames


def _link_rotvecs(tree: KinematicTree, q):
    """(B, J, 3) rotation vectors of every link."""
    return np.concatenate([q[:, None, 0:3], q[:, 6:].reshape(q.shape[0], -1, 3)], axis=1)


def _rnea(tree, bodies, q, qd, qdd, gravity):
    B = q.shape[0]
    I6 = bodies.spatial
    a_base = np.zeros(6)
    a_base[3:] = -np.asarray(gravity, dtype=float)
    frames = _joint_frames(tree, q)
    J = tree.part_count
    Jr_dot = right_jacobian_dot(_link_rotvecs(tree, q), _link_rotvecs(tree, qd))
    v = [None] * J
    acc = [None] * J
    f = [None] * J
    for k in range(J):
        E, r, Jr = frames[k]
        s = tree.rot_slice(k)
        rd, rdd = qd[:, s], qdd[:, s]
        w_rel = _mv(Jr, rd)
        alpha_rel = _mv(Jr, rdd) + _mv(Jr_dot[:, k], rd)
        if k == 0:
            vlin = _mv(E, qd[:, 3:6])
            v[0] = np.concatenate([w_rel, vlin], axis=-1)
            a = _xform_motion(E, r, np.broadcast_to(a_base, (B, 6)))
            a = a + np.concatenate([alpha_rel, _mv(E, qdd[:, 3:6]) - _cross(w_rel, vlin)], axis=-1)
        else:
            p = tree.parents[k]
            vJ = np.concatenate([w_rel, np.zeros_like(w_rel)], axis=-1)
            v[k] = _xform_motion(E, r, v[p]) + vJ
            a = (_xform_motion(E, r, acc[p]) + np.concatenate([alpha_rel, np.zeros_like(alpha_rel)], axis=-1)
                 + _cross_motion(v[k], vJ))
        acc[k] = a
        Iv = _mv(I6[k], v[k])
        f[k] = _mv(I6[k], a) + _cross_force(v[k], Iv)
    tau = np.zeros_like(q)
    for k in range(J - 1, -1, -1):
        E, r, Jr = frames[k]
        JrT = np.swapaxes(Jr, -1, -2)
        if k == 0:
            tau[:, 0:3] = _mv(JrT, f[0][:, :3])
            tau[:, 3:6] = _mv(np.swapaxes(E, -1, -2), f[0][:, 3:])
        else:
            tau[:, tree.dof_slice(k)] = _mv(JrT, f[k][:, :3])
            p = tree.parents[k]
            f[p] = f[p] + _xform_force_T(E, r, f[k])
    return tau


def inverse_dynamics(tree: KinematicTree, bodies: RigidBodySet, q, qdot, qddot, gravity=GRAVITY):
    """Generalized forces F = M qdd + C + g (recursive Newton-Euler)."""
    (q, qd, qdd), batch = _check(tree, bodies, q, qdot, qddot)
    return _rnea(tree, bodies, q, qd, qdd, gravity).reshape(batch + (tree.dim,))


def mass_matrix(tree: KinematicTree, bodies: RigidBodySet, q) -> np.ndarray:
    """Joint-space inertia matrix via the composite rigid-body algorithm."""
    (q,), batch = _check(tree, bodies, q)
    B = q.shape[0]
    J = tree.part_count
    frames = _joint_frames(tree, q)
    X = [_plucker(E, r) for E, r, _ in frames]
    S = []
    for k, (E, _, Jr) in enumerate(frames):
        if k == 0:
            Sk = np.zeros((B, 6, 6))
            Sk[:, :3, :3] = Jr
            Sk[:, 3:, 3:] = E
        else:
            Sk = np.zeros((B, 6, 3))
            Sk[:, :3, :] = Jr
        S.append(Sk)
    Ic = [np.broadcast_to(bodies.spatial[k], (B, 6, 6)).copy() for k in range(J)]
    for k in range(J - 1, 0, -1):
        p = tree.parents[k]
        Ic[p] += np.swapaxes(X[k], -1, -2) @ Ic[k] @ X[k]
    M = np.zeros((B, tree.dim, tree.dim))
    for k in range(J):
        sk = tree.dof_slice(k)
        F = Ic[k] @ S[k]
        M[:, sk, sk] = np.swapaxes(S[k], -1, -2) @ F
        j = k
        while tree.parents[j] >= 0:
            F = np.swapaxes(X[j], -1, -2) @ F
            j = tree.parents[j]
            sj = tree.dof_slice(j)
            blk = np.swapaxes(F, -1, -2) @ S[j]
            M[:, sk, sj] = blk
            M[:, sj, sk] = np.swapaxes(blk, -1, -2)
    return M.reshape(batch + (tree.dim, tree.dim))


def bias_terms(tree: KinematicTree, bodies: RigidBodySet, q, qdot, gravity=GRAVITY):
    """(coriolis, gravity) generalized force vectors."""
    zero = np.zeros_like(np.asarray(q, dtype=float))
    g = inverse_dynamics(tree, bodies, q, zero, zero, gravity)
    c = inverse_dynamics(tree, bodies, q, qdot, zero, gravity) - g
    return c, g


def forward_dynamics(tree: KinematicTree, bodies: RigidBodySet, q, qdot, torque,
                     gravity=GRAVITY, fixed_root: bool = False):
    """Accelerations qdd = M^{-1} (tau - C - g) through a Cholesky factorization.

    With ``fixed_root`` the root is held still (its accelerations are zero)
    and only the joint block is solved; root generalized forces are ignored.
    """
    (q, qd, tau), batch = _check(tree, bodies, q, qdot, torque)
    M = mass_matrix(tree, bodies, q)
    rhs = tau - _rnea(tree, bodies, q, qd, np.zeros_like(q), gravity)
    sl = slice(6, None) if fixed_root else slice(None)
    Ms = M[:, sl, sl]
    try:
        L = np.linalg.cholesky(Ms)
    except np.linalg.LinAlgError as exc:
        raise SingularDynamicsError("mass matrix is not positive definite") from exc
    if not np.all(np.isfinite(L)):
        raise SingularDynamicsError("mass matrix factorization produced non-finite values")
    y = np.linalg.solve(L, rhs[:, sl, None])
    qdd = np.zeros_like(q)
    qdd[:, sl] = np.linalg.solve(np.swapaxes(L, -1, -2), y)[..., 0]
    return qdd.reshape(batch + (tree.dim,))


def kinetic_energy(tree, bodies, q, qdot):
    M = mass_matrix(tree, bodies, q)
    qd = np.asarray(qdot, dtype=float)
    return 0.5 * np.einsum("...i,...ij,...j->...", qd, M, qd)


# ---------------------------------------------------------------------------
# Trajectory-level quantities


def _derivs(tree: KinematicTree, values, dt: float):
    """Unwrapped values and their stencil derivatives; values (..., T, dim)."""
    values = unwrap_values(tree.check_q(values), tree.rotation_slots())
    D1, D2 = difference_matrices(values.shape[-2], dt)
    return values, D1 @ values, D2 @ values


def pseudoforce(tree: KinematicTree, bodies: RigidBodySet, traj: Trajectory, gravity=GRAVITY) -> np.ndarray:
    """Per-frame generalized force that exactly explains the observed motion."""
    return pseudoforce_values(tree, bodies, traj.values, traj.dt, gravity)


def pseudoforce_values(tree: KinematicTree, bodies: RigidBodySet, values, dt: float, gravity=GRAVITY) -> np.ndarray:
    """pseudoforce for raw arrays of shape (..., T, dim), batched over leading axes."""
    q, qd, qdd = _derivs(tree, values, dt)
    return inverse_dynamics(tree, bodies, q, qd, qdd, gravity)


def el_residual(tree: KinematicTree, bodies: RigidBodySet, traj: Trajectory, f_hat, gravity=GRAVITY):
    """Z_t = M_t qdd_t + C_t + g_t - F_hat_t for every frame."""
    f_hat = np.asarray(f_hat, dtype=float)
    if f_hat.shape != (traj.T, tree.dim):
        raise ShapeError(f"force array {f_hat.shape} does not match trajectory ({traj.T}, {tree.dim})")
    return pseudoforce(tree, bodies, traj, gravity) - f_hat


def residual_metric(tree, bodies, traj: Trajectory, f_bar, gravity=GRAVITY) -> float:
    """Mean over frames of the l1 norm of the Euler-Lagrange residual."""
    Z = el_residual(tree, bodies, traj, f_bar, gravity)
    return float(np.abs(Z).sum(axis=1).mean())


def deterministic_el_penalty(residuals) -> float:
    """Sum over frames of the l1 residual norms."""
    Z = np.asarray(residuals, dtype=float)
    if Z.ndim != 2:
        raise ShapeError("residuals must be (T, dim)")
    return float(np.abs(Z).sum())


def inverse_dynamics_partials(tree, bodies, q, qdot, qddot, gravity=GRAVITY, rel_step: float = 1e-5):
    """dF/dq, dF/dqd and dF/dqdd (= M) at a batch of states, each (..., dim, dim).

    dF/dq uses central differences with step rel_step * (1 + |q_j|). F is
    quadratic in qd, so central differences in qd are exact up to rounding.
    """
    (q, qd, qdd), batch = _check(tree, bodies, q, qdot, qddot)
    B, n = q.shape
    eye = np.eye(n)
    h = rel_step * (1.0 + np.abs(q))  # (B, n)
    dq = eye[None] * h[:, :, None]  # (B, n, n) row j perturbs coordinate j
    qs = np.concatenate([q[:, None] + dq, q[:, None] - dq, np.broadcast_to(q[:, None], (B, 2 * n, n))], axis=1)
    dv = eye[None] * np.ones((B, n, 1))
    vs = np.concatenate([np.broadcast_to(qd[:, None], (B, 2 * n, n)), qd[:, None] + dv, qd[:, None] - dv], axis=1)
    accs = np.broadcast_to(qdd[:, None], qs.shape)
    F = _rnea(tree, bodies, qs.reshape(-1, n), vs.reshape(-1, n), np.ascontiguousarray(accs).reshape(-1, n),
              gravity).reshape(B, 4 * n, n)
    Jq = ((F[:, :n] - F[:, n:2 * n]) / (2 * h[:, :, None])).swapaxes(1, 2)
    Jv = ((F[:, 2 * n:3 * n] - F[:, 3 * n:]) / 2.0).swapaxes(1, 2)
    M = mass_matrix(tree, bodies, q)
    shape = batch + (n, n)
    return Jq.reshape(shape), Jv.reshape(shape), M.reshape(shape)


def force_jacobian(tree, bodies, values, dt: float, gravity=GRAVITY, rel_step: float = 1e-5) -> np.ndarray:
    """dF_t/dq_s for a trajectory, shape (T, T, dim, dim).

    F_t depends on the frames inside its difference stencil through q_t,
    qdot_t = (D1 q)_t and qddot_t = (D2 q)_t.
    """
    values, qd, qdd = _derivs(tree, values, dt)
    if values.ndim != 2:
        raise ShapeError("force_jacobian expects a single (T, dim) trajectory")
    T = values.shape[0]
    D1, D2 = difference_matrices(T, dt)
    Jq, Jv, M = inverse_dynamics_partials(tree, bodies, values, qd, qdd, gravity, rel_step)
    full = D1[:, :, None, None] * Jv[:, None] + D2[:, :, None, None] * M[:, None]
    full[np.arange(T), np.arange(T)] += Jq
    return full


def residual_vjp(tree, bodies, values, dt: float, upstream, gravity=GRAVITY, rel_step: float = 1e-5) -> np.ndarray:
    """Gradient with respect to the trajectory values of sum_t <upstream_t, F_t(values)>.

    Batched over leading axes of ``values`` (..., T, dim); uses the stencil
    structure instead of forming the full Jacobian.
    """
    values, qd, qdd = _derivs(tree, values, dt)
    u = np.asarray(upstream, dtype=float)
    if u.shape != values.shape:
        raise ShapeError(f"upstream {u.shape} does not match values {values.shape}")
    D1, D2 = difference_matrices(values.shape[-2], dt)
    Jq, Jv, M = inverse_dynamics_partials(tree, bodies, values, qd, qdd, gravity, rel_step)
    uq = np.einsum("...ti,...tij->...tj", u, Jq)
    uv = np.einsum("...ti,...tij->...tj", u, Jv)
    um = np.einsum("...ti,...tij->...tj", u, M)
    return uq + np.swapaxes(D1, 0, 1) @ uv + np.swapaxes(D2, 0, 1) @ um


# ---------------------------------------------------------------------------
# Simulation


TorqueFn = Callable[[float, np.ndarray, np.ndarray], np.ndarray]


def simulate(tree: KinematicTree, bodies: RigidBodySet, q0, qd0, torque_fn: TorqueFn, dt: float,
             n_frames: int, substeps: int = 10, gravity=GRAVITY, method: str = "symplectic_euler",
             fixed_root: bool = False):
    """Integrate forward dynamics and sample every ``dt`` seconds.

    Returns (frames, velocities, torques) where torques are evaluated at the
    frame times. ``method`` is ``"symplectic_euler"`` (velocity first, then
    position) or ``"rk4"``.
    """
    q = np.array(q0, dtype=float)
    qd = np.array(qd0, dtype=float)
    h = dt / substeps

    def accel(t, q_, qd_):
        return forward_dynamics(tree, bodies, q_, qd_, torque_fn(t, q_, qd_), gravity, fixed_root)

    frames, vels, taus = [q.copy()], [qd.copy()], [np.asarray(torque_fn(0.0, q, qd), dtype=float)]
    t = 0.0
    for _ in range(n_frames - 1):
        for _ in range(substeps):
            if method == "symplectic_euler":
                qd = qd + h * accel(t, q, qd)
                q = q + h * qd
            elif method == "rk4":
                k1q, k1v = qd, accel(t, q, qd)
                k2q, k2v = qd + h / 2 * k1v, accel(t + h / 2, q + h / 2 * k1q, qd + h / 2 * k1v)
                k3q, k3v = qd + h / 2 * k2v, accel(t + h / 2, q + h / 2 * k2q, qd + h / 2 * k2v)
                k4q, k4v = qd + h * k3v, accel(t + h, q + h * k3q, qd + h * k3v)
                q = q + h / 6 * (k1q + 2 * k2q + 2 * k3q + k4q)
                qd = qd + h / 6 * (k1v + 2 * k2v + 2 * k3v + k4v)
            else:
                raise ValueError(f"unknown integration method {method!r}")
            t += h
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(qd))):
            raise FloatingPointError("integration diverged")
        frames.append(q.copy())
        vels.append(qd.copy())
        taus.append(np.asarray(torque_fn(t, q, qd), dtype=float))
    return np.array(frames), np.array(vels), np.array(taus)

"""Shared builders for tests."""
import numpy as np

from physrefine.dynamics import RigidBodySet
from physrefine.inertia import BodyParams
from physrefine.kinematics import KinematicTree, chain_tree


def random_body(rng, mass_range=(0.05, 0.5)):
    m = rng.uniform(*mass_range)
    A = rng.normal(size=(3, 3))
    R, _ = np.linalg.qr(A)
    moments = rng.uniform(0.8, 1.2, 3) * m * 0.01
    return BodyParams(m, rng.normal(scale=0.05, size=3), R @ np.diag(moments) @ R.T)


def random_chain(rng, n_links=3):
    offsets = [(0.0, 0.0, 0.0)] + [tuple(rng.normal(scale=0.1, size=3)) for _ in range(n_links - 1)]
    tree = KinematicTree.from_parents(range(-1, n_links - 1), offsets)
    bodies = RigidBodySet(tuple(random_body(rng) for _ in range(n_links)))
    return tree, bodies


def point_like_body(m, com=(0.0, 0.0, 0.0), r=1e-3):
    return BodyParams(m, com, np.eye(3) * 0.4 * m * r * r)


def free_body(m=2.0):
    return chain_tree(1), RigidBodySet((point_like_body(m, r=0.1),))

"""Losses, the training loop and synthetic data generation."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .denoiser import MLPDenoiser
from .diffusion import ShiftSchedule, forward_marginal_sample, sample_prior, reverse_step
from .dynamics import (GRAVITY, RigidBodySet, SingularDynamicsError, bodies_from_meshes, forward_dynamics,
                       inverse_dynamics,
                       load_bodies, mass_matrix, pseudoforce, pseudoforce_values,
                       residual_vjp)
from .inertia import TriangleMesh, box_mesh
from .kinematics import (DEFAULT_DT, KinematicTree, ShapeError, Trajectory, joint_positions, load_tree,
                         mini_hand_tree, save_json)

SIGMA_FLOOR = 1e-8


class TrainingDivergedError(FloatingPointError):
    """Loss or gradients became non-finite."""


# ---------------------------------------------------------------------------
# Configuration


@dataclass
class TrainConfig:
    lambda1: float = 2e3
    lambda2: float = 500.0
    c: float = 10.0
    sigma2_virtual: float = 1.0  # documentation only; the loss uses Sigma_n / c
    lr: float = 1e-3
    lr_decay: float = 0.8
    decay_every: int = 10
    weight_decay: float = 1e-2
    epochs: int = 40
    batch_size: int = 16
    T: int = 16
    N: int = 4
    seed: int = 0
    geometric: bool = True
    grad_clip: float = 1.0

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "weight_decay"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        for name in ("c", "sigma2_virtual", "lr_decay"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.lr < 0:
            raise ValueError("lr must be nonnegative")
        for name in ("decay_every", "epochs", "batch_size", "N"):
            if getattr(self, name) < 1 and not (name == "epochs" and self.epochs == 0):
                raise ValueError(f"{name} must be >= 1")
        if self.T < 3:
            raise ValueError("T must be >= 3")
        if not self.grad_clip > 0:
            raise ValueError("grad_clip must be positive")


@dataclass
class CorruptionConfig:
    """Observation corruption: jitter, windowed bias and held-pose jumps.

    Stds are in radians; root translation coordinates use them times
    ``translation_scale`` (meters per radian of corruption).
    """

    jitter_std: float = 0.04
    bias_std: float = 0.06
    bias_prob: float = 0.3
    jump_prob: float = 0.2
    window: int = 4
    window_start: int | None = None
    translation_scale: float = 0.1

    def __post_init__(self):
        if self.jitter_std < 0 or self.bias_std < 0:
            raise ValueError("corruption stds must be nonnegative")
        if not (0 <= self.bias_prob <= 1 and 0 <= self.jump_prob <= 1):
            raise ValueError("probabilities must lie in [0, 1]")
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if not self.translation_scale > 0:
            raise ValueError("translation_scale must be positive")

    def coordinate_scale(self, dim: int) -> np.ndarray:
        s = np.ones(dim)
        s[3:6] = self.translation_scale
        return s

    @classmethod
    def none(cls) -> "CorruptionConfig":
        return cls(0.0, 0.0, 0.0, 0.0)


@dataclass
class SequenceSample:
    x_gt: np.ndarray
    y: np.ndarray
    pseudoforce_gt: np.ndarray
    corrupted: np.ndarray
    dt: float = DEFAULT_DT
    tree: KinematicTree | None = field(default=None, repr=False)
    bodies: RigidBodySet | None = field(default=None, repr=False)

    def __post_init__(self):
        self.x_gt = np.asarray(self.x_gt, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        self.pseudoforce_gt = np.asarray(self.pseudoforce_gt, dtype=float)
        self.corrupted = np.asarray(self.corrupted, dtype=bool)
        if not (self.x_gt.shape == self.y.shape == self.pseudoforce_gt.shape):
            raise ShapeError("x_gt, y and pseudoforce_gt must share a shape")
        if self.corrupted.shape != self.x_gt.shape[:1]:
            raise ShapeError("corrupted mask must have one entry per frame")


@dataclass
class Normalizer:
    """Affine map to the coordinates the diffusion chain runs in.

    ``force_scale`` sets the unit in which Euler-Lagrange residuals are
    measured by the physics loss, one entry per generalized coordinate.
    """

    center: np.ndarray
    scale: np.ndarray
    force_scale: np.ndarray | None = None

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)
        self.scale = np.asarray(self.scale, dtype=float)
        self.force_scale = np.ones_like(self.scale) if self.force_scale is None \
            else np.asarray(self.force_scale, dtype=float)
        if np.any(self.scale <= 0) or np.any(self.force_scale <= 0):
            raise ValueError("scales must be positive")

    @classmethod
    def identity(cls, dim: int) -> "Normalizer":
        return cls(np.zeros(dim), np.ones(dim))

    @classmethod
    def fit(cls, samples) -> "Normalizer":
        """Center on clean data; scale motion and force by the errors the observations carry.

        The force unit is the per-coordinate RMS of pseudoforce(y) - pseudoforce(x_gt),
        so an observation has unit Euler-Lagrange residual on average.
        """
        x = np.concatenate([s.x_gt for s in samples])
        err = np.concatenate([s.y - s.x_gt for s in samples])
        rms = np.sqrt((err**2).mean(axis=0))
        ferr = np.concatenate([pseudoforce(s.tree, s.bodies, Trajectory(s.y, s.dt)) - s.pseudoforce_gt
                               for s in samples])
        frms = np.sqrt((ferr**2).mean(axis=0))
        return cls(x.mean(axis=0), np.where(rms > 1e-8, rms, 1.0), np.where(frms > 1e-12, frms, 1.0))

    def normalize(self, x):
        return (np.asarray(x, dtype=float) - self.center) / self.scale

    def denormalize(self, z):
        return np.asarray(z, dtype=float) * self.scale + self.center

    def to_json(self) -> dict:
        return {"center": self.center.tolist(), "scale": self.scale.tolist(),
                "force_scale": self.force_scale.tolist()}

    @classmethod
    def from_json(cls, doc: dict) -> "Normalizer":
        return cls(doc["center"], doc["scale"], doc.get("force_scale"))


# ---------------------------------------------------------------------------
# Losses


def loss_data(x_gt, x_hat) -> float:
    x_gt, x_hat = np.asarray(x_gt, dtype=float), np.asarray(x_hat, dtype=float)
    if x_gt.shape != x_hat.shape:
        raise ShapeError(f"shape mismatch {x_gt.shape} vs {x_hat.shape}")
    return float(np.mean((x_gt - x_hat) ** 2))


def _geometric_parts(p_gt, p_hat):
    d = p_hat - p_gt
    pos = np.mean(np.sum(d * d, axis=-1))
    dv = np.diff(d, axis=-3)
    vel = np.mean(np.sum(dv * dv, axis=-1)) if dv.shape[-3] else 0.0
    return float(pos), float(vel)


def loss_geometric(tree: KinematicTree, x_gt, x_hat) -> float:
    """Joint-position MSE plus frame-difference velocity MSE (squared meters)."""
    x_gt, x_hat = np.asarray(x_gt, dtype=float), np.asarray(x_hat, dtype=float)
    if x_gt.shape != x_hat.shape:
        raise ShapeError(f"shape mismatch {x_gt.shape} vs {x_hat.shape}")
    return sum(_geometric_parts(joint_positions(tree, x_gt), joint_positions(tree, x_hat)))


def _geometric_grad(tree: KinematicTree, x_gt, x_hat, rel_step: float = 1e-6):
    """Loss and gradient of loss_geometric with respect to x_hat (FK by central differences)."""
    p_gt = joint_positions(tree, x_gt)
    p_hat = joint_positions(tree, x_hat)
    lead, dim, J = x_hat.shape[:-1], x_hat.shape[-1], tree.part_count
    h = rel_step * (1.0 + np.abs(x_hat))
    eye = np.eye(dim)
    plus = joint_positions(tree, x_hat[..., None, :] + eye * h[..., None])
    minus = joint_positions(tree, x_hat[..., None, :] - eye * h[..., None])
    dP = (plus - minus) / (2 * h[..., None, None])  # (..., T, dim, J, 3)
    d = p_hat - p_gt
    T = x_hat.shape[-2]
    count_pos = d[..., 0].size
    g_p = 2.0 * d / count_pos
    dv = np.diff(d, axis=-3)
    if T > 1:
        count_vel = dv[..., 0].size
        gdv = 2.0 * dv / count_vel
        g_p = g_p.copy()
        g_p[..., 1:, :, :] += gdv
        g_p[..., :-1, :, :] -= gdv
    loss = sum(_geometric_parts(p_gt, p_hat))
    grad = np.einsum("...jk,...ijk->...i", g_p, dP)
    return loss, grad.reshape(lead + (dim,))


def sigma_for_step(schedule: ShiftSchedule, n: int, c: float) -> float:
    return max(schedule.Sigma(n) / c, SIGMA_FLOOR)


def loss_el(tree: KinematicTree, bodies: RigidBodySet, x0, pseudoforce_ref, sigma_n: float, dt: float,
            gravity=GRAVITY, force_scale=None) -> float:
    """(1 / 2 sigma_n) sum_t ||Z_t(x0)||^2 with Z against the reference pseudoforce.

    ``force_scale`` divides Z per coordinate (unit weights by default).
    """
    sigma = max(float(sigma_n), SIGMA_FLOOR)
    if not np.isfinite(sigma) or sigma <= 0:
        raise ValueError("sigma_n must be positive")
    Z = pseudoforce(tree, bodies, Trajectory(x0, dt), gravity) - np.asarray(pseudoforce_ref, dtype=float)
    if force_scale is not None:
        Z = Z / np.asarray(force_scale, dtype=float)
    return float(np.sum(Z * Z) / (2.0 * sigma))


def total_loss(parts: dict, config: TrainConfig) -> float:
    return config.lambda1 * (parts["data"] + parts.get("geo", 0.0)) + config.lambda2 * parts.get("el", 0.0)


# ---------------------------------------------------------------------------
# Optimizer


class AdamW:
    def __init__(self, lr: float, weight_decay: float = 1e-2, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr, self.weight_decay, self.betas, self.eps = lr, weight_decay, betas, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict, grads: dict, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        if lr == 0.0:
            return
        self.t += 1
        b1, b2 = self.betas
        for k, g in grads.items():
            m = self.m.setdefault(k, np.zeros_like(g))
            v = self.v.setdefault(k, np.zeros_like(g))
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mh = m / (1 - b1**self.t)
            vh = v / (1 - b2**self.t)
            params[k] *= 1.0 - lr * self.weight_decay
            params[k] -= lr * mh / (np.sqrt(vh) + self.eps)

    def to_json(self) -> dict:
        return {"t": self.t, "m": {k: v.tolist() for k, v in self.m.items()},
                "v": {k: v.tolist() for k, v in self.v.items()}}

    def load_json(self, doc: dict) -> None:
        self.t = int(doc["t"])
        self.m = {k: np.asarray(v, dtype=float) for k, v in doc["m"].items()}
        self.v = {k: np.asarray(v, dtype=float) for k, v in doc["v"].items()}


# ---------------------------------------------------------------------------
# Training loop


@dataclass
class TrainResult:
    denoiser: MLPDenoiser
    history: list[dict]
    optimizer: AdamW


def _add(acc: dict, grads: dict):
    for k, g in grads.items():
        acc[k] = acc[k] + g if k in acc else g
    return acc


def _batch_step(denoiser, batch, schedule, config, rng, normalizer, tree, bodies, dt, gravity):
    X = np.stack([normalizer.normalize(s.x_gt) for s in batch])
    Y = np.stack([normalizer.normalize(s.y) for s in batch])
    B, N = len(batch), schedule.N
    n = rng.integers(1, N + 1, size=B)
    xn = np.stack([forward_marginal_sample(X[b], Y[b], int(n[b]), schedule, rng) for b in range(B)])

    x_hat = denoiser.predict(xn, Y, n, cache=True)
    parts = {"data": loss_data(X, x_hat), "geo": 0.0, "el": 0.0}
    up = 2.0 * (x_hat - X) / X.size
    if config.geometric and config.lambda1 > 0:
        parts["geo"], g_raw = _geometric_grad(tree, normalizer.denormalize(X), normalizer.denormalize(x_hat))
        up = up + g_raw * normalizer.scale
    grads = denoiser.backward(config.lambda1 * up)

    if config.lambda2 > 0:
        x = sample_prior(Y, schedule, rng)
        for m in range(N, 1, -1):
            x = reverse_step(x, denoiser.predict(x, Y, m), m, schedule, rng)
        x1 = x
        x_hat1 = denoiser.predict(x1, Y, 1, cache=True)
        x0 = reverse_step(x1, x_hat1, 1, schedule, rng)
        n_el = rng.integers(2, N + 1, size=B) if N >= 2 else np.ones(B, dtype=int)
        sigma = np.array([sigma_for_step(schedule, int(k), config.c) for k in n_el])[:, None, None]
        raw = normalizer.denormalize(x0)
        F_ref = np.stack([s.pseudoforce_gt for s in batch])
        Z = (pseudoforce_values(tree, bodies, raw, dt, gravity) - F_ref) / normalizer.force_scale
        el = float(np.sum(Z * Z / (2.0 * sigma)))
        up_el = residual_vjp(tree, bodies, raw, dt, Z / (sigma * normalizer.force_scale), gravity) * normalizer.scale
        parts["el"] = float(el / B)
        grads = _add(grads, denoiser.backward(config.lambda2 * schedule.B(1) * up_el / B))
    return parts, grads


def train(denoiser: MLPDenoiser, dataset, schedule: ShiftSchedule, config: TrainConfig, rng: np.random.Generator,
          normalizer: Normalizer | None = None, optimizer: AdamW | None = None, start_epoch: int = 0,
          gravity=GRAVITY, on_epoch=None) -> TrainResult:
    """Minimize lambda1 (L_data + L_geo) + lambda2 L_EL over the dataset.

    Each batch draws n uniformly in [1, N] for the data terms and runs the
    full reverse chain for the physics term; its gradient passes through the
    last prediction only. The learning rate decays by ``lr_decay`` every
    ``decay_every`` epochs, counted from epoch 0 so resumed runs continue the
    schedule.
    """
    dataset = list(dataset)
    if not dataset:
        raise ValueError("training needs a non-empty dataset")
    tree, bodies, dt = dataset[0].tree, dataset[0].bodies, dataset[0].dt
    if tree is None or bodies is None:
        raise ValueError("samples must reference their kinematic tree and bodies")
    normalizer = normalizer or Normalizer.identity(tree.dim)
    optimizer = optimizer or AdamW(config.lr, config.weight_decay)
    history = []
    for epoch in range(start_epoch, start_epoch + config.epochs):
        lr = config.lr * config.lr_decay ** (epoch // config.decay_every)
        order = rng.permutation(len(dataset))
        sums = {"data": 0.0, "geo": 0.0, "el": 0.0, "total": 0.0}
        batches = 0
        for i in range(0, len(order), config.batch_size):
            batch = [dataset[j] for j in order[i:i + config.batch_size]]
            parts, grads = _batch_step(denoiser, batch, schedule, config, rng, normalizer, tree, bodies, dt, gravity)
            parts["total"] = total_loss(parts, config)
            if not all(np.isfinite(v) for v in parts.values()) or \
                    not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise TrainingDivergedError(f"non-finite loss or gradient at epoch {epoch}")
            norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if norm > config.grad_clip:
                grads = {k: g * (config.grad_clip / norm) for k, g in grads.items()}
            optimizer.step(denoiser.params, grads, lr)
            for k in sums:
                sums[k] += parts[k]
            batches += 1
        row = {"epoch": epoch, **{k: v / batches for k, v in sums.items()}}
        history.append(row)
        if on_epoch is not None:
            on_epoch(row)
    return TrainResult(denoiser, history, optimizer)


def fit_input_stats(denoiser: MLPDenoiser, dataset, schedule: ShiftSchedule, normalizer: Normalizer,
                    rng: np.random.Generator) -> None:
    """Standardize denoiser inputs on forward-marginal draws at every step."""
    triples = []
    for s in dataset:
        X, Y = normalizer.normalize(s.x_gt), normalizer.normalize(s.y)
        for n in range(1, schedule.N + 1):
            triples.append((forward_marginal_sample(X, Y, n, schedule, rng), Y, n))
    denoiser.fit_input_stats(triples)


def laplace_inputs(dataset, schedule: ShiftSchedule, normalizer: Normalizer, rng: np.random.Generator):
    """(x_n, y, n) triples from the training distribution for the GGN fit."""
    for s in dataset:
        X, Y = normalizer.normalize(s.x_gt), normalizer.normalize(s.y)
        for n in range(1, schedule.N + 1):
            yield forward_marginal_sample(X, Y, n, schedule, rng), Y, n


def write_loss_csv(history, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "L_data", "L_geo", "L_EL", "total"])
        for r in history:
            w.writerow([r["epoch"], repr(r["data"]), repr(r["geo"]), repr(r["el"]), repr(r["total"])])


def read_loss_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{"epoch": int(r["epoch"]), "data": float(r["L_data"]), "geo": float(r["L_geo"]),
                 "el": float(r["L_EL"]), "total": float(r["total"])} for r in csv.DictReader(fh)]


# ---------------------------------------------------------------------------
# Synthetic data


def mini_hand_meshes() -> list[TriangleMesh]:
    palm = box_mesh((0.07, 0.02, 0.08), (-0.035, -0.01, 0.0))
    segs = [box_mesh((0.015, 0.015, 0.04), (x - 0.0075, -0.0075, z)) for x in (0.02, -0.02) for z in (0.08, 0.12)]
    return [palm, segs[0], segs[1], segs[2], segs[3]]


def mini_hand() -> tuple[KinematicTree, RigidBodySet]:
    tree = mini_hand_tree()
    return tree, bodies_from_meshes(tree, mini_hand_meshes())


@dataclass
class MotionConfig:
    """Random reference motion and PD tracking gains for synthetic ground truth."""

    rot_amp: float = 0.15
    pos_amp: float = 0.02
    joint_amp: float = 0.3
    freq_range: tuple = (0.3, 1.5)
    components: int = 3
    kp: float = 150.0
    kd: float = 20.0
    noise: float = 5.0
    substeps: int = 10


def _draw_motion(dim: int, rng, cfg: MotionConfig) -> dict:
    """Random sum-of-sinusoids reference and band-limited torque noise for one sequence."""
    amp = np.full(dim, cfg.joint_amp)
    amp[0:3], amp[3:6] = cfg.rot_amp, cfg.pos_amp
    K = cfg.components
    base = 0.3 * rng.normal(size=dim) * amp
    base[3:6] = 0.0
    return {
        "A": rng.normal(0.0, 1.0, size=(K, dim)) * amp / np.sqrt(K),
        "w": 2 * np.pi * rng.uniform(*cfg.freq_range, size=(K, dim)),
        "phi": rng.uniform(0, 2 * np.pi, size=(K, dim)),
        "base": base,
        "nA": rng.normal(0.0, cfg.noise, size=(2, dim)) / np.sqrt(2),
        "nw": 2 * np.pi * rng.uniform(1.0, 4.0, size=(2, dim)),
        "nphi": rng.uniform(0, 2 * np.pi, size=(2, dim)),
    }


def _stack_motion(draws: list[dict]) -> dict:
    return {k: np.stack([d[k] for d in draws]) for k in draws[0]}


def _ref(m, t):
    return m["base"] + np.sum(m["A"] * (np.sin(m["w"] * t + m["phi"]) - np.sin(m["phi"])), axis=1)


def _ref_rate(m, t):
    return np.sum(m["A"] * m["w"] * np.cos(m["w"] * t + m["phi"]), axis=1)


def _noise(m, t):
    return np.sum(m["nA"] * np.sin(m["nw"] * t + m["nphi"]), axis=1)


def simulate_motions(tree: KinematicTree, bodies: RigidBodySet, T: int, rngs, dt: float = DEFAULT_DT,
                     motion: MotionConfig | None = None, gravity=GRAVITY, max_rounds: int = 20):
    """Integrate one PD-tracked random reference per generator, all in one batch.

    The controller is gravity compensation plus M(q) times a PD acceleration
    toward the reference with additive noise. Integration is
    symplectic Euler with ``substeps`` per frame. Sequences that diverge or
    whose root rotation leaves the principal ball are redrawn from their own
    generator. Returns (frames (count, T, dim), torques (count, T, dim)).
    """
    cfg = motion or MotionConfig()
    count, dim = len(rngs), tree.dim
    frames = np.zeros((count, T, dim))
    taus = np.zeros((count, T, dim))
    pending = list(range(count))
    h = dt / cfg.substeps
    for _ in range(max_rounds):
        if not pending:
            return frames, taus
        m = _stack_motion([_draw_motion(dim, rngs[i], cfg) for i in pending])
        q = _ref(m, 0.0)
        qd = _ref_rate(m, 0.0)
        ok = np.ones(len(pending), dtype=bool)

        def torque(t, q, qd):
            g = inverse_dynamics(tree, bodies, q, np.zeros_like(q), np.zeros_like(q), gravity)
            u = cfg.kp * (_ref(m, t) - q) + cfg.kd * (_ref_rate(m, t) - qd) + _noise(m, t)
            return g + np.einsum("bij,bj->bi", mass_matrix(tree, bodies, q), u)

        fr, tq = [q.copy()], [torque(0.0, q, qd)]
        t = 0.0
        with np.errstate(all="ignore"):
            for _ in range(T - 1):
                for _ in range(cfg.substeps):
                    qd = qd + h * forward_dynamics(tree, bodies, q, qd, torque(t, q, qd), gravity)
                    q = q + h * qd
                    t += h
                    bad = ~(np.all(np.isfinite(q), axis=1) & np.all(np.isfinite(qd), axis=1)
                            & (np.abs(q).max(axis=1) < 1e3))
                    if np.any(bad):
                        ok &= ~bad
                        q[bad], qd[bad] = fr[0][bad], 0.0
                fr.append(q.copy())
                tq.append(torque(t, q, qd))
        fr, tq = np.stack(fr, axis=1), np.stack(tq, axis=1)
        ok &= np.linalg.norm(fr[:, :, 0:3], axis=-1).max(axis=1) < np.pi
        still = []
        for j, i in enumerate(pending):
            if ok[j]:
                frames[i], taus[i] = fr[j], tq[j]
            else:
                still.append(i)
        pending = still
    if pending:
        raise FloatingPointError("synthetic integration failed repeatedly")
    return frames, taus


def corrupt(x_gt, config: CorruptionConfig, rng: np.random.Generator):
    """Observation y and a per-frame mask of bias/jump windows."""
    x_gt = np.asarray(x_gt, dtype=float)
    T, dim = x_gt.shape
    scale = config.coordinate_scale(dim)
    y = x_gt + config.jitter_std * scale * rng.standard_normal(x_gt.shape)
    mask = np.zeros(T, dtype=bool)
    L = min(config.window, T)

    def window():
        start = config.window_start if config.window_start is not None else int(rng.integers(0, T - L + 1))
        return slice(start, min(start + L, T))

    if config.bias_prob > 0 and rng.random() < config.bias_prob:
        w = window()
        y[w] += config.bias_std * scale * rng.standard_normal(dim)
        mask[w] = True
    if config.jump_prob > 0 and rng.random() < config.jump_prob:
        w = window()
        y[w] = y[max(w.start - 1, 0)]
        mask[w] = True
    return y, mask


def synth_dataset(tree: KinematicTree, bodies: RigidBodySet, count: int, T: int, corruption: CorruptionConfig,
                  rng: np.random.Generator, dt: float = DEFAULT_DT, motion: MotionConfig | None = None,
                  gravity=GRAVITY) -> list[SequenceSample]:
    """Integrated ground truth with corrupted observations; one child generator per sequence."""
    if T < 3:
        raise ValueError("T must be >= 3")
    if count == 0:
        return []
    children = rng.spawn(count)
    frames, _ = simulate_motions(tree, bodies, T, children, dt, motion, gravity)
    out = []
    for i, child in enumerate(children):
        y, mask = corrupt(frames[i], corruption, child)
        F = pseudoforce(tree, bodies, Trajectory(frames[i], dt), gravity)
        out.append(SequenceSample(frames[i], y, F, mask, dt, tree, bodies))
    return out


# ---------------------------------------------------------------------------
# Dataset files


def save_dataset(samples, out_dir, tree: KinematicTree, bodies: RigidBodySet, dt: float,
                 corruption: CorruptionConfig, seed: int) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_json(tree.to_json(), out / "tree.json")
    save_json(bodies.to_json(), out / "bodies.json")
    entries = []
    for i, s in enumerate(samples):
        gt, obs = f"seq{i:04d}_gt.json", f"seq{i:04d}_obs.json"
        save_json(Trajectory(s.x_gt, dt).to_json(), out / gt)
        save_json(Trajectory(s.y, dt).to_json(), out / obs)
        entries.append({"gt": gt, "obs": obs, "corrupted": np.flatnonzero(s.corrupted).tolist()})
    manifest = {"dt": dt, "tree": "tree.json", "bodies": "bodies.json", "seed": seed,
                "corruption": asdict(corruption), "sequences": entries}
    save_json(manifest, out / "manifest.json")


def load_dataset(data_dir, gravity=GRAVITY):
    """(samples, manifest) from a dataset directory; pseudoforces are recomputed."""
    d = Path(data_dir)
    manifest = json.loads((d / "manifest.json").read_text())
    tree = load_tree(d / manifest["tree"])
    bodies = load_bodies(d / manifest["bodies"])
    dt = float(manifest["dt"])
    samples = []
    for e in manifest["sequences"]:
        gt = Trajectory.from_json(json.loads((d / e["gt"]).read_text())).values
        obs = Trajectory.from_json(json.loads((d / e["obs"]).read_text())).values
        mask = np.zeros(len(gt), dtype=bool)
        mask[e.get("corrupted", [])] = True
        F = pseudoforce(tree, bodies, Trajectory(gt, dt), gravity)
        samples.append(SequenceSample(gt, obs, F, mask, dt, tree, bodies))
    return samples, manifest


def config_fields(cls) -> set[str]:
    return {f.name for f in fields(cls)}
